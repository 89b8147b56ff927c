import json
import random

import numpy as np
import pytest

from grove.errors import (
    FingerprintMismatchError,
    MalformedListError,
    NoSharedSlotsError,
    RefusalError,
    RepositoryBuildError,
    RepositoryLoadError,
)
from grove.providers import LexicalEmbedder, ScriptedProvider, ScriptedRule, embed
from grove.repository import (
    Repository,
    RepositoryItem,
    build,
    cosine,
    extract_conditions,
    load,
    retrieve,
    round_sig,
    save,
    score,
)
from grove.types import ConditionSet, PipelineConfig, Story, PROVENANCE_HUMAN

from conftest import grove_rules, make_corpus


def extraction_provider():
    return ScriptedProvider(grove_rules())


def test_extract_conditions_happy_path(config):
    provider = extraction_provider()
    story = Story(text="A war story.", provenance=PROVENANCE_HUMAN, id="s1")
    key = extract_conditions(story, provider, config)
    assert key.mood == "sad"
    assert key.subjects == ("cats", "soldiers")
    assert key.plot == "A hero rises.\nA city falls."
    assert key.genre is None


def test_extract_conditions_takes_external_genre(config):
    provider = extraction_provider()
    story = Story(text="A war story.", provenance=PROVENANCE_HUMAN, id="s1")
    key = extract_conditions(story, provider, config, genre="Science Fiction")
    assert key.genre == "Science Fiction"


def test_extract_conditions_retries_refusals(config):
    rules = [
        ScriptedRule("Use one or two words", "I'm sorry, I cannot", times=1),
        ScriptedRule("Use one or two words", "angry"),
    ] + grove_rules()
    provider = ScriptedProvider(rules)
    story = Story(text="A story.", provenance=PROVENANCE_HUMAN, id="s1")
    key = extract_conditions(story, provider, config)
    assert key.mood == "angry"


def test_extract_conditions_malformed_subjects_error(config):
    rules = [
        ScriptedRule("Use one or two words", "sad"),
        ScriptedRule("distinctive subjects", "\n\n"),
        ScriptedRule("Summarize the above story", "1. plot"),
    ]
    provider = ScriptedProvider(rules)
    story = Story(text="A story.", provenance=PROVENANCE_HUMAN, id="s1")
    with pytest.raises(MalformedListError):
        extract_conditions(story, provider, config)
    # initial attempt + 2 malformed retries on the subjects prompt
    subject_calls = [c for c in provider.calls if "distinctive subjects" in c[0]]
    assert len(subject_calls) == 3


def test_build_assigns_sequential_insertion_indices(config, embedder):
    provider = extraction_provider()
    repo, skips = build(make_corpus(3), provider, embedder, config)
    assert not skips
    assert [item.insertion_index for item in repo.items] == [0, 1, 2]
    assert len(repo) == 3
    for item in repo.items:
        assert set(item.key_embeddings) == set(item.key.populated_slots())


def test_build_skips_failing_story(config, embedder):
    # the story whose text mentions "REFUSEME" always draws a refusal
    rules = [
        ScriptedRule("REFUSEME", "I'm sorry, I cannot"),
    ] + grove_rules()
    provider = ScriptedProvider(rules)
    corpus = make_corpus(2) + [
        Story(text="REFUSEME please", provenance=PROVENANCE_HUMAN, id="bad")
    ]
    repo, skips = build(corpus, provider, embedder, config)
    assert len(repo) == 2
    assert [s.story_id for s in skips] == ["bad"]
    assert [item.insertion_index for item in repo.items] == [0, 1]


def test_build_fails_when_all_stories_fail(config, embedder):
    provider = ScriptedProvider([ScriptedRule("", "I'm sorry, I cannot")])
    with pytest.raises(RepositoryBuildError) as err:
        build(make_corpus(2), provider, embedder, config)
    assert set(err.value.causes) == {"c0", "c1"}


def test_build_concurrent_equals_sequential(config, embedder):
    sequential, _ = build(make_corpus(6), extraction_provider(), embedder, config)
    threaded, _ = build(make_corpus(6), extraction_provider(), embedder, config, workers=4)
    assert [i.id for i in sequential.items] == [i.id for i in threaded.items]
    for a, b in zip(sequential.items, threaded.items):
        assert a.key == b.key
        for slot in a.key_embeddings:
            assert np.array_equal(a.key_embeddings[slot], b.key_embeddings[slot])


def test_rebuild_is_byte_identical(config, embedder, tmp_path):
    paths = []
    for run in range(2):
        repo, _ = build(make_corpus(3), extraction_provider(), embedder, config)
        path = tmp_path / f"repo{run}.jsonl"
        save(repo, path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]


# --- scoring -------------------------------------------------------------------

def full_conditions(plot="A hero rises", mood="sad", genre="Science Fiction",
                    subjects=("cats",)):
    return ConditionSet(plot=plot, mood=mood, genre=genre, subjects=subjects)


def test_score_identity_counts_shared_slots(embedder):
    c = full_conditions()
    assert score(c, c, embedder) == pytest.approx(4.0, abs=1e-9)
    two = ConditionSet(mood="sad", genre="Horror")
    assert score(two, two, embedder) == pytest.approx(2.0, abs=1e-9)


def test_score_orthogonal_moods(embedder):
    a = ConditionSet(mood="cat dog bird")
    b = ConditionSet(mood="engine stars orbit")
    assert score(a, b, embedder) == 0.0


def test_score_no_shared_slots(embedder):
    a = ConditionSet(mood="sad")
    b = ConditionSet(genre="Horror")
    with pytest.raises(NoSharedSlotsError):
        score(a, b, embedder)


def test_score_two_slot_hand_computed(embedder):
    a = ConditionSet(mood="sad tale", subjects=("cats", "dogs"))
    b = ConditionSet(mood="sad song", subjects=("cats",))
    expected = 0.0
    for qt, kt in ((("sad tale"), ("sad song")), (("cats, dogs"), ("cats"))):
        va, vb = embed(embedder, qt), embed(embedder, kt)
        expected += float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    assert score(a, b, embedder) == pytest.approx(expected, abs=1e-9)


def test_score_symmetry(embedder):
    rng = random.Random(5)
    words = ["cat", "dog", "ship", "star", "war", "love", "rain", "dust"]
    for _ in range(25):
        a = full_conditions(
            plot=" ".join(rng.choices(words, k=4)),
            mood=rng.choice(words),
            genre=rng.choice(words),
            subjects=tuple(rng.choices(words, k=2)),
        )
        b = full_conditions(
            plot=" ".join(rng.choices(words, k=4)),
            mood=rng.choice(words),
            genre=rng.choice(words),
            subjects=tuple(rng.choices(words, k=2)),
        )
        assert score(a, b, embedder) == pytest.approx(score(b, a, embedder), abs=1e-12)


# --- retrieval ------------------------------------------------------------------

WORDS = [
    "cat", "dog", "ship", "star", "war", "love", "rain", "dust", "king",
    "ghost", "engine", "letter", "garden", "storm", "mirror", "island",
]


def synthetic_repository(count, embedder, rng, unique_texts=False):
    """Random condition keys; ``unique_texts`` salts each slot with a per-item
    token so no two items tie exactly (needed for perturbation tests)."""
    items = []
    for i in range(count):
        salt = f" uid{i}" if unique_texts else ""
        key = ConditionSet(
            plot=" ".join(rng.choices(WORDS, k=5)) + salt,
            mood=rng.choice(WORDS) + salt,
            genre=rng.choice(WORDS) + salt,
            subjects=tuple(w + salt for w in rng.choices(WORDS, k=2)),
        )
        embeddings = {
            slot: embed(embedder, key.slot_text(slot)) for slot in key.populated_slots()
        }
        items.append(
            RepositoryItem(
                id=f"s{i}",
                story=Story(text=f"story {i}", provenance=PROVENANCE_HUMAN, id=f"s{i}"),
                key=key,
                key_embeddings=embeddings,
                insertion_index=i,
            )
        )
    from grove.repository import EmbedderFingerprint

    return Repository(items=tuple(items), fingerprint=EmbedderFingerprint.of(embedder))


def oracle_retrieve(repo, query, k, embedder):
    """Exhaustive score-then-sort reference implementation."""
    scored = []
    for item in repo.items:
        shared = [s for s in query.populated_slots() if s in item.key.populated_slots()]
        if shared:
            value = score(query, item.key, embedder)
        else:
            value = 0.0
        scored.append((item, value))
    scored.sort(key=lambda pair: (-pair[1], pair[0].insertion_index))
    return [item for item, _ in scored[:k]]


def random_query(rng):
    return ConditionSet(
        plot=" ".join(rng.choices(WORDS, k=5)),
        mood=rng.choice(WORDS),
        genre=rng.choice(WORDS),
        subjects=tuple(rng.choices(WORDS, k=2)),
    )


def test_retrieve_boundaries(embedder):
    rng = random.Random(1)
    repo = synthetic_repository(5, embedder, rng)
    query = random_query(rng)
    assert retrieve(repo, query, 0, embedder) == []
    everything = retrieve(repo, query, 99, embedder)
    assert len(everything) == 5
    assert retrieve(repo, query, 5, embedder) == everything


def test_retrieve_matches_oracle_on_synthetic_corpus(embedder):
    rng = random.Random(42)
    repo = synthetic_repository(100, embedder, rng)
    for _ in range(20):
        query = random_query(rng)
        k = rng.choice([1, 3, 10, 100])
        got = retrieve(repo, query, k, embedder)
        want = oracle_retrieve(repo, query, k, embedder)
        assert [i.id for i in got] == [i.id for i in want]


def test_retrieve_ties_break_by_insertion_index(embedder):
    # identical keys force exact ties; insertion order must win
    key = ConditionSet(mood="sad", genre="war")
    from grove.repository import EmbedderFingerprint

    items = tuple(
        RepositoryItem(
            id=f"dup{i}",
            story=Story(text=f"story {i}", provenance=PROVENANCE_HUMAN, id=f"dup{i}"),
            key=key,
            key_embeddings={
                slot: embed(embedder, key.slot_text(slot)) for slot in key.populated_slots()
            },
            insertion_index=i,
        )
        for i in range(4)
    )
    repo = Repository(items=items, fingerprint=EmbedderFingerprint.of(embedder))
    got = retrieve(repo, key, 4, embedder)
    assert [i.id for i in got] == ["dup0", "dup1", "dup2", "dup3"]


def test_retrieve_fingerprint_mismatch(embedder):
    rng = random.Random(3)
    repo = synthetic_repository(4, embedder, rng)
    with pytest.raises(FingerprintMismatchError):
        retrieve(repo, random_query(rng), 2, LexicalEmbedder(dimension=128))


def graded_repository(count, embedder):
    """Items whose overlap with the query text grows strictly with the index,
    so every pair of items has a well-separated score: safe to compare exact
    order across float-level perturbations."""
    from grove.repository import EmbedderFingerprint

    items = []
    for i in range(count):
        blend = ["cat"] * (i + 1) + ["dust"] * (count - i)
        key = ConditionSet(
            plot=" ".join(blend),
            mood=" ".join(["sad"] * (i + 1) + ["calm"] * (count - i)),
            genre=" ".join(["war"] * (i + 1) + ["peace"] * (count - i)),
            subjects=(" ".join(["lover"] * (i + 1) + ["stone"] * (count - i)),),
        )
        items.append(
            RepositoryItem(
                id=f"g{i}",
                story=Story(text=f"story {i}", provenance=PROVENANCE_HUMAN, id=f"g{i}"),
                key=key,
                key_embeddings={
                    slot: embed(embedder, key.slot_text(slot))
                    for slot in key.populated_slots()
                },
                insertion_index=i,
            )
        )
    return Repository(items=tuple(items), fingerprint=EmbedderFingerprint.of(embedder))


def rescale_embeddings(repo, scalar, renormalize):
    items = []
    for item in repo.items:
        rescaled = {}
        for slot, vec in item.key_embeddings.items():
            stretched = vec * scalar
            if renormalize:
                norm = np.linalg.norm(stretched)
                stretched = stretched / norm if norm else stretched
            rescaled[slot] = stretched
        items.append(
            RepositoryItem(
                id=item.id, story=item.story, key=item.key,
                key_embeddings=rescaled, insertion_index=item.insertion_index,
            )
        )
    return Repository(items=tuple(items), fingerprint=repo.fingerprint)


def test_retrieve_order_invariant_under_rescaling_with_renormalization(embedder):
    repo = graded_repository(40, embedder)
    query = ConditionSet(plot="cat", mood="sad", genre="war", subjects=("lover",))
    ranked = [i.id for i in retrieve(repo, query, len(repo), embedder)]
    # graded corpus: strictly separated scores
    values = sorted(
        (score(query, item.key, embedder) for item in repo.items), reverse=True
    )
    assert all(a - b > 1e-6 for a, b in zip(values, values[1:]))
    for scalar in (0.25, 2.0, 37.5):
        scaled = rescale_embeddings(repo, scalar, renormalize=True)
        assert [i.id for i in retrieve(scaled, query, len(repo), embedder)] == ranked


def test_retrieve_order_invariant_under_pure_rescaling(embedder):
    # cosine normalizes internally, so a power-of-two scale is bit-exact and
    # even exact ties keep their insertion-index order
    rng = random.Random(7)
    repo = synthetic_repository(60, embedder, rng)
    scaled = rescale_embeddings(repo, 4.0, renormalize=False)
    for _ in range(10):
        query = random_query(rng)
        before = [i.id for i in retrieve(repo, query, len(repo), embedder)]
        after = [i.id for i in retrieve(scaled, query, len(repo), embedder)]
        assert before == after


def test_top1_scores_highest(embedder):
    rng = random.Random(11)
    repo = synthetic_repository(30, embedder, rng)
    for _ in range(5):
        query = random_query(rng)
        ranked = retrieve(repo, query, len(repo), embedder)
        top_score = score(query, ranked[0].key, embedder)
        for item in ranked[1:]:
            assert top_score >= score(query, item.key, embedder) - 1e-12


# --- persistence -----------------------------------------------------------------

def test_save_load_round_trip(config, embedder, tmp_path):
    repo, _ = build(make_corpus(3), extraction_provider(), embedder, config)
    path = tmp_path / "repo.jsonl"
    save(repo, path)
    loaded = load(path, embedder)
    assert loaded.fingerprint == repo.fingerprint
    assert len(loaded) == len(repo)
    for a, b in zip(repo.items, loaded.items):
        assert a.id == b.id
        assert a.key == b.key
        assert a.story == b.story
        assert a.insertion_index == b.insertion_index
        for slot in a.key_embeddings:
            assert np.max(np.abs(a.key_embeddings[slot] - b.key_embeddings[slot])) < 1e-9


def test_second_round_trip_is_exact(config, embedder, tmp_path):
    repo, _ = build(make_corpus(3), extraction_provider(), embedder, config)
    p1, p2 = tmp_path / "r1.jsonl", tmp_path / "r2.jsonl"
    save(repo, p1)
    save(load(p1, embedder), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_truncated_file_names_line(config, embedder, tmp_path):
    repo, _ = build(make_corpus(3), extraction_provider(), embedder, config)
    path = tmp_path / "repo.jsonl"
    save(repo, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]  # cut an item line in half
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join(lines[:3]) + "\n", encoding="utf-8")
    with pytest.raises(RepositoryLoadError) as err:
        load(broken, embedder)
    assert err.value.line == 3


def test_load_with_different_embedder_recomputes(config, embedder, tmp_path):
    repo, _ = build(make_corpus(3), extraction_provider(), embedder, config)
    path = tmp_path / "repo.jsonl"
    save(repo, path)
    other = LexicalEmbedder(dimension=32)
    loaded = load(path, other)
    assert len(loaded) == len(repo)
    assert loaded.fingerprint.dimension == 32
    for item in loaded.items:
        for slot, vec in item.key_embeddings.items():
            assert vec.shape == (32,)
            assert np.allclose(vec, embed(other, item.key.slot_text(slot)))


def test_round_sig_keeps_nine_digits():
    assert round_sig(0.123456789123) == 0.123456789
    assert round_sig(1.0) == 1.0
    assert abs(round_sig(0.98765432198) - 0.98765432198) < 1e-9


def test_cosine_zero_vectors():
    z = np.zeros(4)
    v = np.array([1.0, 0, 0, 0])
    assert cosine(z, v) == 0.0
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)
