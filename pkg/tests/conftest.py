import pytest

from grove.providers import LexicalEmbedder, ScriptedProvider, ScriptedRule
from grove.repository import build
from grove.types import ConditionSet, PipelineConfig, Story, PROVENANCE_HUMAN


def grove_rules(select_response: str = "2") -> list[ScriptedRule]:
    """A rule set that answers every stage of a default pipeline run.

    Expansion responses echo the prompted evidence chain through a regex
    capture, so every node text is distinct and a pure function of its
    position in the tree.
    """
    return [
        ScriptedRule("Use one or two words", "sad"),
        ScriptedRule("distinctive subjects", "1. cats\n2. soldiers"),
        ScriptedRule("Summarize the above story", "1. A hero rises.\n2. A city falls."),
        ScriptedRule(
            "Integrated Story",
            "Draft...\nUnclarities addressed.\nIntegrated Story: The integrated tale of the cat.",
        ),
        ScriptedRule(
            "Learn from the plots and subjects",
            "An initial story about a lonely soldier and his cat.",
        ),
        ScriptedRule(
            "Please write a",
            "A bare initial story with no exemplar.",
        ),
        ScriptedRule(
            "missing background information in the story",
            "1. The soldier's motive is unclear.\n2. The city's fate is unexplained.\n"
            "3. The cat's origin is unknown.\n4. The war's cause is unstated.",
        ),
        ScriptedRule(
            r"A missing detail is: (.*?)\. Except for pure coincidence, point out (\d+)",
            "\n".join(f"{i}. {{1}} fact-{i}." for i in range(1, 5)),
            mode="regex",
        ),
        ScriptedRule("only generate the number", select_response),
        ScriptedRule(
            "complete the story by including",
            "The final story, now with all evidence woven in.",
        ),
        ScriptedRule("Rate the story on a scale of 1 to 5", "4"),
        ScriptedRule(
            "each of which describes one plot",
            "1. First plot.\n2. Second plot.\n3. Third plot.",
        ),
    ]


@pytest.fixture
def provider():
    return ScriptedProvider(grove_rules())


@pytest.fixture
def embedder():
    return LexicalEmbedder(dimension=64)


@pytest.fixture
def config():
    return PipelineConfig()


@pytest.fixture
def conditions():
    return ConditionSet(
        plot="A soldier on the front dies in the middle of writing a letter home.",
        mood="sad",
        genre="Science Fiction",
        subjects=("cats",),
    )


def make_corpus(count: int = 3) -> list[Story]:
    topics = ["cats and war", "lovers in space", "survivors of the flood"]
    return [
        Story(
            text=f"Corpus story {i} about {topics[i % len(topics)]}.",
            provenance=PROVENANCE_HUMAN,
            id=f"c{i}",
        )
        for i in range(count)
    ]


@pytest.fixture
def small_repo(provider, embedder, config):
    repo, skips = build(make_corpus(3), provider, embedder, config)
    assert not skips
    return repo
