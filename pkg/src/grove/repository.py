"""Retrieval repository: LLM condition extraction, scoring, top-k retrieval.

Each item pairs a story with the condition set extracted from it; retrieval
ranks items by the summed per-slot cosine similarity between query and key
condition embeddings.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    FingerprintMismatchError,
    GroveError,
    NoSharedSlotsError,
    RepositoryBuildError,
    RepositoryLoadError,
)
from .manifest import CallRecord
from .providers import ChatProvider, Embedder, complete_with_retries, embed, request_list
from .templates import TemplateSet, default_templates, render
from .types import CONDITION_SLOTS, ConditionSet, PipelineConfig, Story

log = logging.getLogger(__name__)

REPOSITORY_FORMAT = "grove-repository"
REPOSITORY_VERSION = 1


def round_sig(value: float, digits: int = 9) -> float:
    """Round to ``digits`` significant decimal digits (serialization contract)."""
    return float(f"{value:.{digits}g}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class EmbedderFingerprint:
    id: str
    dimension: int

    @classmethod
    def of(cls, embedder: Embedder) -> "EmbedderFingerprint":
        return cls(id=embedder.id, dimension=embedder.dimension)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "dimension": self.dimension}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EmbedderFingerprint":
        return cls(id=data["id"], dimension=int(data["dimension"]))


@dataclass(frozen=True)
class RepositoryItem:
    id: str
    story: Story
    key: ConditionSet
    key_embeddings: dict[str, np.ndarray]
    insertion_index: int


@dataclass(frozen=True)
class Repository:
    items: tuple[RepositoryItem, ...]
    fingerprint: EmbedderFingerprint

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        indices = [item.insertion_index for item in self.items]
        if len(set(indices)) != len(indices):
            raise ValueError("insertion indices must be unique")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SkipRecord:
    story_id: str
    reason: str


def extract_conditions(
    story: Story,
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    genre: str | None = None,
    sink: list | None = None,
    templates: TemplateSet | None = None,
) -> ConditionSet:
    """Query the model for mood, subjects, and plot lines of one story.

    The genre slot is only filled when a label is supplied externally
    (corpora that carry genre metadata); it is never asked of the model.
    """
    if not story.text.strip():
        raise ValueError("story text must be non-empty")
    templates = templates or default_templates()
    sampling, retry = config.sampling, config.retry
    bindings = {"STORY": story.text}

    mood_response = complete_with_retries(
        provider, render(templates["extract_mood"], bindings), sampling, retry,
        sink=sink, stage="extract-mood", key=(story.id,),
    )
    mood = mood_response.strip().splitlines()[0].strip()
    if not mood:
        raise GroveError(f"empty mood extracted for story {story.id!r}")

    subjects = request_list(
        provider, render(templates["extract_subjects"], bindings), sampling, retry, 1,
        sink=sink, stage="extract-subjects", key=(story.id,),
    )
    plots = request_list(
        provider, render(templates["extract_plots"], bindings), sampling, retry, 1,
        sink=sink, stage="extract-plots", key=(story.id,),
    )
    return ConditionSet(
        plot="\n".join(plots),
        mood=mood,
        genre=genre,
        subjects=tuple(subjects),
    )


def _embed_key(key: ConditionSet, embedder: Embedder) -> dict[str, np.ndarray]:
    return {
        slot: embed(embedder, key.slot_text(slot))  # type: ignore[arg-type]
        for slot in key.populated_slots()
    }


def build(
    corpus: Sequence[Story],
    provider: ChatProvider,
    embedder: Embedder,
    config: PipelineConfig,
    *,
    genres: Mapping[str, str] | None = None,
    sink: list | None = None,
    templates: TemplateSet | None = None,
    workers: int = 1,
) -> tuple[Repository, list[SkipRecord]]:
    """Extract conditions for every corpus story and cache key embeddings.

    Stories whose extraction fails after retries are skipped and reported.
    Items keep corpus order regardless of worker count.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    genres = genres or {}

    def _one(story: Story) -> tuple[ConditionSet, list[CallRecord]]:
        local: list[CallRecord] = []
        key = extract_conditions(
            story, provider, config,
            genre=genres.get(story.id), sink=local, templates=templates,
        )
        return key, local

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda s: _trap(_one, s), corpus))
    else:
        outcomes = [_trap(_one, story) for story in corpus]

    items: list[RepositoryItem] = []
    skips: list[SkipRecord] = []
    for story, outcome in zip(corpus, outcomes):
        if isinstance(outcome, Exception):
            skips.append(SkipRecord(story_id=story.id, reason=str(outcome)))
            continue
        key, records = outcome
        if sink is not None:
            sink.extend(records)
        items.append(
            RepositoryItem(
                id=story.id,
                story=story,
                key=key,
                key_embeddings=_embed_key(key, embedder),
                insertion_index=len(items),
            )
        )
    if not items:
        raise RepositoryBuildError({skip.story_id: skip.reason for skip in skips})
    if skips:
        log.warning("skipped %d of %d corpus stories", len(skips), len(corpus))
    return Repository(items=tuple(items), fingerprint=EmbedderFingerprint.of(embedder)), skips


def _trap(fn, *args):
    try:
        return fn(*args)
    except GroveError as err:
        return err


def score(query: ConditionSet, key: ConditionSet, embedder: Embedder) -> float:
    """Summed cosine similarity over the slots populated in both sets."""
    shared = [s for s in query.populated_slots() if s in key.populated_slots()]
    if not shared:
        raise NoSharedSlotsError("query and key share no populated slots")
    total = 0.0
    for slot in shared:
        total += cosine(
            embed(embedder, query.slot_text(slot)),  # type: ignore[arg-type]
            embed(embedder, key.slot_text(slot)),  # type: ignore[arg-type]
        )
    return total


def _score_against_item(
    query_vectors: Mapping[str, np.ndarray], item: RepositoryItem
) -> float:
    # Items sharing no slot with the query contribute an empty sum: 0.0.
    total = 0.0
    for slot, qv in query_vectors.items():
        kv = item.key_embeddings.get(slot)
        if kv is not None:
            total += cosine(qv, kv)
    return total


def retrieve(
    repo: Repository, query: ConditionSet, k: int, embedder: Embedder
) -> list[RepositoryItem]:
    """Top-k items by score, ties broken by ascending insertion index."""
    if k < 0:
        raise ValueError("k must be >= 0")
    fp = EmbedderFingerprint.of(embedder)
    if fp != repo.fingerprint:
        raise FingerprintMismatchError(str(repo.fingerprint), str(fp))
    if k == 0 or not repo.items:
        return []
    query_vectors = {
        slot: embed(embedder, query.slot_text(slot))  # type: ignore[arg-type]
        for slot in query.populated_slots()
    }
    ranked = sorted(
        repo.items,
        key=lambda item: (-_score_against_item(query_vectors, item), item.insertion_index),
    )
    return ranked[: min(k, len(ranked))]


def save(repo: Repository, path: str | Path) -> None:
    """JSONL: one header line, then one item per line; floats at 9 significant digits."""
    lines = [
        json.dumps(
            {
                "format": REPOSITORY_FORMAT,
                "version": REPOSITORY_VERSION,
                "embedder": repo.fingerprint.to_dict(),
                "items": len(repo.items),
            },
            sort_keys=True,
        )
    ]
    for item in repo.items:
        lines.append(
            json.dumps(
                {
                    "id": item.id,
                    "insertion_index": item.insertion_index,
                    "story": item.story.to_dict(),
                    "key": item.key.to_dict(),
                    "embeddings": {
                        slot: [round_sig(x) for x in vec.tolist()]
                        for slot, vec in sorted(item.key_embeddings.items())
                    },
                },
                sort_keys=True,
                ensure_ascii=False,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(path: str | Path, embedder: Embedder) -> Repository:
    """Load a repository file; recompute embeddings if the embedder differs.

    A fingerprint mismatch is downgraded to a warning: the cached vectors are
    discarded and every key is re-embedded with the supplied embedder.
    """
    path = Path(path)
    raw_lines = path.read_text(encoding="utf-8").splitlines()
    if not raw_lines:
        raise RepositoryLoadError(str(path), 1, "empty file")

    def _parse(lineno: int, text: str) -> dict:
        try:
            return json.loads(text)
        except json.JSONDecodeError as err:
            raise RepositoryLoadError(str(path), lineno, f"invalid JSON: {err.msg}") from err

    header = _parse(1, raw_lines[0])
    if header.get("format") != REPOSITORY_FORMAT:
        raise RepositoryLoadError(str(path), 1, "not a repository file (missing header)")
    stored_fp = EmbedderFingerprint.from_dict(header["embedder"])
    current_fp = EmbedderFingerprint.of(embedder)
    recompute = stored_fp != current_fp
    if recompute:
        log.warning(
            "repository %s was embedded with %s, recomputing with %s",
            path, stored_fp, current_fp,
        )

    declared = header.get("items")
    body = [(i + 2, line) for i, line in enumerate(raw_lines[1:]) if line.strip()]
    if declared is not None and len(body) != declared:
        raise RepositoryLoadError(
            str(path), len(raw_lines), f"expected {declared} item lines, found {len(body)}"
        )

    items = []
    for lineno, line in body:
        data = _parse(lineno, line)
        try:
            story = Story.from_dict(data["story"])
            key = ConditionSet.from_dict(data["key"])
            if recompute:
                embeddings = _embed_key(key, embedder)
            else:
                embeddings = {
                    slot: np.asarray(vec, dtype=np.float64)
                    for slot, vec in data["embeddings"].items()
                }
            items.append(
                RepositoryItem(
                    id=data["id"],
                    story=story,
                    key=key,
                    key_embeddings=embeddings,
                    insertion_index=int(data["insertion_index"]),
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            raise RepositoryLoadError(str(path), lineno, f"bad item record: {err}") from err
    return Repository(items=tuple(items), fingerprint=current_fp)
