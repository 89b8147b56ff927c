import pytest

from grove.errors import MissingBindingError
from grove.templates import (
    DOCUMENTED_PLACEHOLDERS,
    PromptTemplate,
    default_templates,
    load_templates,
    render,
)


@pytest.fixture(scope="module")
def templates():
    return default_templates()


def test_ambiguity_template_renders_count(templates):
    rendered = render(templates["ambiguities"], {"STORY": "A tale.", "N": 2})
    assert "point out 2 missing background information" in rendered
    assert "with 2 simple sentences one by one" in rendered


def test_zero_placeholder_template_is_identity():
    template = PromptTemplate("t", "No placeholders here. Just prose.")
    assert render(template, {}) == "No placeholders here. Just prose."


def test_asking_why_template_embeds_chain_and_branching(templates):
    rendered = render(
        templates["asking_why"],
        {"STORY": "A tale.", "EVIDENCE CHAIN": "the hero lost his family", "B": 2},
    )
    assert "the hero lost his family" in rendered
    assert "2 factual pieces" in rendered


def test_missing_binding_names_the_placeholder(templates):
    with pytest.raises(MissingBindingError) as err:
        render(templates["asking_why"], {"STORY": "A tale.", "B": 2})
    assert err.value.placeholder == "EVIDENCE CHAIN"


def test_extra_bindings_are_ignored():
    template = PromptTemplate("t", "Hello [NAME].")
    assert render(template, {"NAME": "world", "UNUSED": "x"}) == "Hello world."


def test_substitution_is_exact_and_orderless():
    template = PromptTemplate("t", "[A] then [B] then [A].")
    assert render(template, {"A": "1st", "B": "2nd"}) == "1st then 2nd then 1st."


def test_bound_values_are_not_rescanned():
    # A value containing placeholder-looking text is inserted verbatim.
    template = PromptTemplate("t", "Story: [STORY]")
    assert render(template, {"STORY": "contains [GENRE] literally"}) == (
        "Story: contains [GENRE] literally"
    )


def test_rendering_is_idempotent(templates):
    rendered = render(
        templates["rewrite"], {"STORY": "A tale.", "EVIDENCE CHAINS": "- evidence"}
    )
    again = render(PromptTemplate("rendered", rendered), {})
    assert again == rendered


def test_every_shipped_template_matches_documented_placeholders(templates):
    assert set(templates.ids()) == set(DOCUMENTED_PLACEHOLDERS)
    for template_id in templates.ids():
        assert templates[template_id].placeholders() == DOCUMENTED_PLACEHOLDERS[template_id], (
            template_id
        )


def test_rendered_output_has_no_residual_placeholder(templates):
    bindings = {
        "STORY": "story text",
        "AMBIGUITY": "an ambiguity",
        "EVIDENCE CHAIN": "a chain",
        "EVIDENCE CHAINS": "chains",
        "RETRIEVED EXAMPLE": "example",
        "GENRE": "Science Fiction",
        "EMOTION": "sad",
        "SUBJECTS": "cats",
        "PLOTS": "a plot",
        "N": 2,
        "B": 2,
    }
    for template_id in templates.ids():
        rendered = render(templates[template_id], bindings)
        assert PromptTemplate("x", rendered).placeholders() == frozenset(), template_id


def test_templates_load_from_custom_directory(tmp_path):
    (tmp_path / "custom.txt").write_text("Say [WORD].", encoding="utf-8")
    ts = load_templates(tmp_path)
    assert ts.ids() == ("custom",)
    assert render(ts["custom"], {"WORD": "hi"}) == "Say hi."


def test_missing_directory_fails(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_templates(tmp_path / "nope")


def test_asset_hashes_are_stable(templates):
    hashes = templates.asset_hashes()
    assert set(hashes) == set(templates.ids())
    assert hashes == templates.asset_hashes()


def test_initial_story_instruction_matches_published_wording(templates):
    rendered = render(
        templates["initial_story_bare"],
        {
            "GENRE": "Science Fiction",
            "EMOTION": "sad",
            "SUBJECTS": "cats",
            "PLOTS": (
                "A soldier on the front dies in the middle of writing a letter home. "
                "It is finished and sent by the man who killed him"
            ),
        },
    )
    assert rendered == (
        "Please write a Science Fiction that makes the readers feel sad. "
        "It describes the following subjects: cats. "
        "It should at least contain the following plots (the more interesting plots the better): "
        "A soldier on the front dies in the middle of writing a letter home. "
        "It is finished and sent by the man who killed him."
    )
