"""Domain types shared by every stage of the generation pipeline.

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

CONDITION_SLOTS = ("plot", "mood", "genre", "subjects")

PROVENANCE_HUMAN = "human-corpus"
PROVENANCE_INITIAL = "generated-initial"
PROVENANCE_FINAL = "generated-final"


def baseline_provenance(strategy: str) -> str:
    return f"baseline:{strategy}"


def _clean(value: str | None) -> str | None:
    if value is None:
        return None
    value = value.strip()
    return value or None


@dataclass(frozen=True)
class ConditionSet:
    """The target control conditions: plot, mood, genre, and subjects.

    The slot set is closed; a slot left as ``None`` (or an empty subjects
    tuple) is absent for the purpose of scoring and prompting.
    """

    plot: str | None = None
    mood: str | None = None
    genre: str | None = None
    subjects: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "plot", _clean(self.plot))
        object.__setattr__(self, "mood", _clean(self.mood))
        object.__setattr__(self, "genre", _clean(self.genre))
        cleaned = tuple(s.strip() for s in self.subjects)
        if any(not s for s in cleaned):
            raise ValueError("subjects entries must be non-empty after trimming")
        object.__setattr__(self, "subjects", cleaned)

    def populated_slots(self) -> tuple[str, ...]:
        present = []
        for slot in CONDITION_SLOTS:
            if self.slot_text(slot) is not None:
                present.append(slot)
        return tuple(present)

    def slot_text(self, slot: str) -> str | None:
        """One embeddable text span per slot; subjects join with ", "."""
        if slot == "subjects":
            return ", ".join(self.subjects) if self.subjects else None
        if slot not in CONDITION_SLOTS:
            raise KeyError(slot)
        return getattr(self, slot)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConditionSet":
        unknown = set(data) - set(CONDITION_SLOTS)
        if unknown:
            raise ValueError(f"unknown condition slots: {sorted(unknown)}")
        subjects = data.get("subjects") or []
        if isinstance(subjects, str):
            subjects = [subjects]
        return cls(
            plot=data.get("plot"),
            mood=data.get("mood"),
            genre=data.get("genre"),
            subjects=tuple(subjects),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "plot": self.plot,
            "mood": self.mood,
            "genre": self.genre,
            "subjects": list(self.subjects),
        }


@dataclass(frozen=True)
class Story:
    text: str
    provenance: str
    id: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("story text must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "text": self.text, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, data: Mapping[str, str]) -> "Story":
        return cls(text=data["text"], provenance=data["provenance"], id=data["id"])


@dataclass(frozen=True)
class Ambiguity:
    """One sentence of missing background information in a story."""

    text: str
    index: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("ambiguity text must be non-empty")
        if self.index < 0:
            raise ValueError("ambiguity index must be >= 0")


@dataclass(frozen=True)
class EvidenceNode:
    node_id: int
    parent_id: int | None
    depth: int
    text: str


@dataclass(frozen=True)
class EvidenceTree:
    """A complete b-ary tree of supporting evidence rooted at one ambiguity.

    Node 0 is the root (the ambiguity itself); ids follow breadth-first
    discovery order, children ordered as parsed from the model output.
    """

    root: Ambiguity
    nodes: tuple[EvidenceNode, ...]
    branching: int
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        self._validate()

    def _validate(self) -> None:
        b, depth = self.branching, self.depth
        if b < 1 or depth < 1:
            raise ValueError("branching and depth must be >= 1")
        expected = expected_node_count(b, depth)
        if len(self.nodes) != expected:
            raise ValueError(f"expected {expected} nodes for b={b}, I={depth}, got {len(self.nodes)}")
        by_id = {n.node_id: n for n in self.nodes}
        if sorted(by_id) != list(range(expected)):
            raise ValueError("node ids must be 0..count-1 and unique")
        root = by_id[0]
        if root.depth != 0 or root.parent_id is not None or root.text != self.root.text:
            raise ValueError("node 0 must be the root ambiguity at depth 0")
        children: dict[int, list[int]] = {n.node_id: [] for n in self.nodes}
        for n in self.nodes:
            if n.node_id == 0:
                continue
            parent = by_id.get(n.parent_id if n.parent_id is not None else -1)
            if parent is None or parent.depth != n.depth - 1:
                raise ValueError(f"node {n.node_id} lacks a parent at depth {n.depth - 1}")
            children[parent.node_id].append(n.node_id)
        for n in self.nodes:
            want = b if n.depth < depth else 0
            if len(children[n.node_id]) != want:
                raise ValueError(
                    f"node {n.node_id} at depth {n.depth} has "
                    f"{len(children[n.node_id])} children, expected {want}"
                )

    def node(self, node_id: int) -> EvidenceNode:
        return self.nodes[node_id]

    def children_of(self, node_id: int) -> tuple[EvidenceNode, ...]:
        return tuple(n for n in self.nodes if n.parent_id == node_id)

    def leaves(self) -> tuple[EvidenceNode, ...]:
        return tuple(n for n in self.nodes if n.depth == self.depth)

    def path_to_root(self, node_id: int) -> tuple[EvidenceNode, ...]:
        """Nodes from the root down to ``node_id`` inclusive."""
        by_id = {n.node_id: n for n in self.nodes}
        path = [by_id[node_id]]
        while path[-1].parent_id is not None:
            path.append(by_id[path[-1].parent_id])
        return tuple(reversed(path))

    def to_dict(self) -> dict[str, Any]:
        return {
            "root": {"text": self.root.text, "index": self.root.index},
            "branching": self.branching,
            "depth": self.depth,
            "nodes": [
                {"id": n.node_id, "parent": n.parent_id, "depth": n.depth, "text": n.text}
                for n in self.nodes
            ],
        }


@dataclass(frozen=True)
class EvidenceChain:
    """A root-to-leaf path: the ambiguity followed by one evidence node per level."""

    texts: tuple[str, ...]
    tree_index: int
    node_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "texts", tuple(self.texts))
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        if len(self.texts) < 2:
            raise ValueError("a chain holds the ambiguity plus at least one evidence node")

    def joined(self, sep: str = " ") -> str:
        return sep.join(self.texts)

    def to_dict(self) -> dict[str, Any]:
        return {"texts": list(self.texts), "tree_index": self.tree_index, "node_ids": list(self.node_ids)}


@dataclass(frozen=True)
class EvidenceForest:
    trees: tuple[EvidenceTree, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if not self.trees:
            raise ValueError("forest must hold at least one tree")
        shapes = {(t.branching, t.depth) for t in self.trees}
        if len(shapes) != 1:
            raise ValueError(f"all trees must share (b, I); got {sorted(shapes)}")

    def to_dict(self) -> dict[str, Any]:
        return {"trees": [t.to_dict() for t in self.trees]}


def expected_node_count(branching: int, depth: int) -> int:
    """Sum of b^d for d in 0..I."""
    return sum(branching**d for d in range(depth + 1))


@dataclass(frozen=True)
class SamplingParams:
    nucleus_p: float = 0.73
    temperature: float = 0.72
    seed: int | None = None

    def __post_init__(self):
        if not (0.0 < self.nucleus_p <= 1.0):
            raise ValueError("nucleus_p must be in (0, 1]")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {"nucleus_p": self.nucleus_p, "temperature": self.temperature, "seed": self.seed}


@dataclass(frozen=True)
class RetryPolicy:
    """Retry budgets: a budget of 2 means one initial attempt plus two retries."""

    max_refusal_retries: int = 2
    max_malformed_retries: int = 2

    def __post_init__(self):
        if self.max_refusal_retries < 0 or self.max_malformed_retries < 0:
            raise ValueError("retry budgets must be >= 0")

    def to_dict(self) -> dict[str, int]:
        return {
            "max_refusal_retries": self.max_refusal_retries,
            "max_malformed_retries": self.max_malformed_retries,
        }


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the generation loop.

    ``exemplars`` is the few-shot count k, ``ambiguities`` the tree count N,
    ``branching`` the per-node evidence count b, and ``depth`` the number of
    asking-why iterations I (each chain carries I evidence nodes below its
    root).
    """

    exemplars: int = 1
    ambiguities: int = 2
    branching: int = 2
    depth: int = 2
    sampling: SamplingParams = field(default_factory=SamplingParams)
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.exemplars < 0:
            raise ValueError("exemplars (k) must be >= 0")
        if self.ambiguities < 1:
            raise ValueError("ambiguities (N) must be >= 1")
        if self.branching < 1:
            raise ValueError("branching (b) must be >= 1")
        if self.depth < 1:
            raise ValueError("depth (I) must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "exemplars": self.exemplars,
            "ambiguities": self.ambiguities,
            "branching": self.branching,
            "depth": self.depth,
            "sampling": self.sampling.to_dict(),
            "retry": self.retry.to_dict(),
        }
