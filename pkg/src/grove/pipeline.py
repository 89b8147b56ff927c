"""The generation loop: retrieve, draft, ask why, select chains, rewrite.

Also the four baseline strategies (ICL, CoT, Prompt-E, Story-S) run against
the same provider and retrieval repository.

Expansion calls at one tree depth are independent and may run on a worker
pool; node ids and transcript order are fixed by tree position before
dispatch, so results and manifests are identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence

from .errors import (
    ChainConstraintError,
    GroveError,
    PipelineStageError,
    TreeGrowthError,
)
from .manifest import RunManifest, canonical_json
from .providers import (
    ChatProvider,
    Embedder,
    complete_with_retries,
    request_int,
    request_list,
)
from .repository import Repository, RepositoryItem, retrieve
from .templates import TemplateSet, default_templates, render
from .types import (
    Ambiguity,
    ConditionSet,
    EvidenceChain,
    EvidenceForest,
    EvidenceNode,
    EvidenceTree,
    PipelineConfig,
    PROVENANCE_FINAL,
    PROVENANCE_INITIAL,
    Story,
    baseline_provenance,
)

STRATEGY_GROVE = "grove"
STRATEGY_ICL = "icl"
STRATEGY_COT = "cot"
STRATEGY_PROMPT_E = "prompt-e"
STRATEGY_STORY_S = "story-s"
STRATEGIES = (STRATEGY_GROVE, STRATEGY_ICL, STRATEGY_COT, STRATEGY_PROMPT_E, STRATEGY_STORY_S)

COT_MARKER = "Integrated Story"

CHAIN_JOIN = " "  # node texts joined with a single space wherever a chain becomes prompt text


@dataclass(frozen=True)
class ExampleSet:
    items: tuple[RepositoryItem, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))


@dataclass(frozen=True)
class GenerationResult:
    initial: Story
    forest: EvidenceForest
    selected_chains: tuple[EvidenceChain, ...]
    final: Story
    manifest_ref: str

    def __post_init__(self):
        object.__setattr__(self, "selected_chains", tuple(self.selected_chains))
        by_tree = [c.tree_index for c in self.selected_chains]
        if sorted(by_tree) != sorted({t.root.index for t in self.forest.trees}):
            raise ValueError("exactly one selected chain per forest tree")

    def to_dict(self) -> dict[str, Any]:
        return {
            "initial": self.initial.to_dict(),
            "forest": self.forest.to_dict(),
            "selected_chains": [c.to_dict() for c in self.selected_chains],
            "final": self.final.to_dict(),
            "manifest_ref": self.manifest_ref,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class BaselineResult:
    strategy: str
    story: Story
    variants: tuple[Story, ...] = ()
    samples: tuple[Story, ...] = ()
    sample_scores: tuple[float, ...] = ()
    cot_marker_found: bool | None = None
    manifest_ref: str = ""

    def stories_for_evaluation(self) -> tuple[Story, ...]:
        """Prompt-E is judged as the average over its variants; others by one story."""
        return self.variants if self.strategy == STRATEGY_PROMPT_E else (self.story,)

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "story": self.story.to_dict(),
            "variants": [s.to_dict() for s in self.variants],
            "samples": [s.to_dict() for s in self.samples],
            "sample_scores": list(self.sample_scores),
            "cot_marker_found": self.cot_marker_found,
            "manifest_ref": self.manifest_ref,
        }


def _require_full_conditions(conditions: ConditionSet) -> None:
    missing = [s for s in ("genre", "mood", "subjects", "plot") if conditions.slot_text(s) is None]
    if missing:
        raise ValueError(f"conditions must populate genre, mood, subjects, plot; missing {missing}")


def _condition_bindings(conditions: ConditionSet) -> dict[str, str]:
    return {
        "GENRE": conditions.genre or "(unspecified)",
        "EMOTION": conditions.mood or "(unspecified)",
        "SUBJECTS": conditions.slot_text("subjects") or "(unspecified)",
        "PLOTS": conditions.plot or "(unspecified)",
    }


def instruction_prompt(
    conditions: ConditionSet,
    examples: ExampleSet,
    templates: TemplateSet | None = None,
) -> str:
    """The in-context-learning instruction; the exemplar block is omitted at k=0."""
    templates = templates or default_templates()
    bindings = _condition_bindings(conditions)
    if examples.items:
        bindings["RETRIEVED EXAMPLE"] = "\n\n".join(item.story.text for item in examples.items)
        return render(templates["initial_story"], bindings)
    return render(templates["initial_story_bare"], bindings)


def generate_initial(
    conditions: ConditionSet,
    examples: ExampleSet,
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    sink: list | None = None,
    templates: TemplateSet | None = None,
    stage: str = "initial",
) -> Story:
    _require_full_conditions(conditions)
    prompt = instruction_prompt(conditions, examples, templates)
    text = complete_with_retries(
        provider, prompt, config.sampling, config.retry, sink=sink, stage=stage
    )
    return Story(text=text, provenance=PROVENANCE_INITIAL, id="initial")


def find_ambiguities(
    story: Story,
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    conditions: ConditionSet | None = None,
    conditioned: bool = False,
    sink: list | None = None,
    templates: TemplateSet | None = None,
) -> list[Ambiguity]:
    """Ask for the N pieces of missing background information.

    ``conditioned=True`` switches to the variant template that restates the
    target conditions (off by default).
    """
    templates = templates or default_templates()
    n = config.ambiguities
    if conditioned:
        if conditions is None:
            raise ValueError("conditioned ambiguity discovery needs the target conditions")
        bindings: dict[str, str | int] = {"STORY": story.text, "N": n}
        bindings.update(_condition_bindings(conditions))
        prompt = render(templates["ambiguities_conditioned"], bindings)
    else:
        prompt = render(templates["ambiguities"], {"STORY": story.text, "N": n})
    items = request_list(
        provider, prompt, config.sampling, config.retry, n,
        sink=sink, stage="ambiguities",
    )
    return [Ambiguity(text=text, index=i) for i, text in enumerate(items[:n])]


def _execute_slots(
    slots: Sequence[Any],
    runner: Callable[[Any, list], Any],
    sink: list | None,
    workers: int,
) -> list[Any]:
    """Run one task per slot, possibly in parallel, with deterministic output.

    Transcript records and results are folded back in slot order; if several
    slots fail, the first failure in slot order is raised.
    """
    results: list[Any] = [None] * len(slots)
    errors: list[Exception | None] = [None] * len(slots)
    sinks: list[list] = [[] for _ in slots]

    def _call(i: int) -> None:
        try:
            results[i] = runner(slots[i], sinks[i])
        except Exception as err:  # re-raised in slot order below
            errors[i] = err

    if workers > 1 and len(slots) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_call, range(len(slots))))
    else:
        for i in range(len(slots)):
            _call(i)

    if sink is not None:
        for local in sinks:
            sink.extend(local)
    for err in errors:
        if err is not None:
            raise err
    return results


def _grow_trees(
    story: Story,
    ambiguities: Sequence[Ambiguity],
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    sink: list | None = None,
    templates: TemplateSet | None = None,
    workers: int = 1,
) -> list[EvidenceTree]:
    """Breadth-first growth of one complete b-ary tree per ambiguity."""
    templates = templates or default_templates()
    b, depth = config.branching, config.depth

    texts: list[list[str]] = [[amb.text] for amb in ambiguities]
    parents: list[list[int | None]] = [[None] for _ in ambiguities]
    depths: list[list[int]] = [[0] for _ in ambiguities]
    frontiers: list[list[int]] = [[0] for _ in ambiguities]

    def _path_texts(ti: int, node_id: int) -> list[str]:
        path = []
        cursor: int | None = node_id
        while cursor is not None:
            path.append(texts[ti][cursor])
            cursor = parents[ti][cursor]
        return list(reversed(path))

    for _level in range(depth):
        slots = [(ti, nid) for ti in range(len(ambiguities)) for nid in frontiers[ti]]

        def _expand(slot: tuple[int, int], local_sink: list) -> list[str]:
            ti, nid = slot
            chain = _path_texts(ti, nid)
            prompt = render(
                templates["asking_why"],
                {"STORY": story.text, "EVIDENCE CHAIN": CHAIN_JOIN.join(chain), "B": b},
            )
            try:
                items = request_list(
                    provider, prompt, config.sampling, config.retry, b,
                    sink=local_sink, stage="expand", key=(ambiguities[ti].index, nid),
                )
            except GroveError as err:
                raise TreeGrowthError(ambiguities[ti].index, tuple(chain), err) from err
            return items[:b]

        children_lists = _execute_slots(slots, _expand, sink, workers)

        next_frontiers: list[list[int]] = [[] for _ in ambiguities]
        for (ti, nid), children in zip(slots, children_lists):
            for child_text in children:
                child_id = len(texts[ti])
                texts[ti].append(child_text)
                parents[ti].append(nid)
                depths[ti].append(depths[ti][nid] + 1)
                next_frontiers[ti].append(child_id)
        frontiers = next_frontiers

    trees = []
    for ti, amb in enumerate(ambiguities):
        nodes = tuple(
            EvidenceNode(node_id=i, parent_id=parents[ti][i], depth=depths[ti][i], text=texts[ti][i])
            for i in range(len(texts[ti]))
        )
        trees.append(EvidenceTree(root=amb, nodes=nodes, branching=b, depth=depth))
    return trees


def grow_tree(
    story: Story,
    ambiguity: Ambiguity,
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    sink: list | None = None,
    templates: TemplateSet | None = None,
    workers: int = 1,
) -> EvidenceTree:
    return _grow_trees(
        story, [ambiguity], provider, config,
        sink=sink, templates=templates, workers=workers,
    )[0]


def build_forest(
    story: Story,
    ambiguities: Sequence[Ambiguity],
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    sink: list | None = None,
    templates: TemplateSet | None = None,
    workers: int = 1,
) -> EvidenceForest:
    if len(ambiguities) != config.ambiguities:
        raise ValueError(
            f"expected {config.ambiguities} ambiguities, got {len(ambiguities)}"
        )
    if [a.index for a in ambiguities] != list(range(len(ambiguities))):
        raise ValueError("ambiguity indices must be 0..N-1 in order")
    trees = _grow_trees(
        story, ambiguities, provider, config,
        sink=sink, templates=templates, workers=workers,
    )
    return EvidenceForest(trees=tuple(trees))


def enumerate_chains(tree: EvidenceTree) -> list[EvidenceChain]:
    """Every root-to-leaf path once, ordered by leaf breadth-first index."""
    chains = []
    for leaf in tree.leaves():
        path = tree.path_to_root(leaf.node_id)
        chains.append(
            EvidenceChain(
                texts=tuple(n.text for n in path),
                tree_index=tree.root.index,
                node_ids=tuple(n.node_id for n in path),
            )
        )
    return chains


def _chain_listing(chains: Sequence[EvidenceChain]) -> str:
    return "\n".join(f"{i + 1}. {chain.joined(CHAIN_JOIN)}" for i, chain in enumerate(chains))


def select_chain(
    story: Story,
    tree: EvidenceTree,
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    sink: list | None = None,
    templates: TemplateSet | None = None,
) -> EvidenceChain:
    """Have the model pick the chain closest to the story, by its 1-based number."""
    templates = templates or default_templates()
    chains = enumerate_chains(tree)
    prompt = render(
        templates["chain_selection"],
        {"STORY": story.text, "EVIDENCE CHAINS": _chain_listing(chains)},
    )
    number = request_int(
        provider, prompt, config.sampling, config.retry, 1, len(chains),
        sink=sink, stage="select", key=(tree.root.index,),
    )
    return chains[number - 1]


def rewrite(
    story: Story,
    chains: Sequence[EvidenceChain],
    provider: ChatProvider,
    config: PipelineConfig,
    *,
    sink: list | None = None,
    templates: TemplateSet | None = None,
) -> Story:
    """Weave the selected chains back into the story.

    Chains from one tree are mutually exclusive readings, so at most one
    chain per tree is accepted.
    """
    templates = templates or default_templates()
    if len(chains) != config.ambiguities:
        raise ChainConstraintError(
            f"expected {config.ambiguities} chains, got {len(chains)}"
        )
    tree_indices = [c.tree_index for c in chains]
    if len(set(tree_indices)) != len(tree_indices):
        raise ChainConstraintError(
            f"chains must come from distinct trees; got tree indices {tree_indices}"
        )
    block = "\n".join(f"- {chain.joined(CHAIN_JOIN)}" for chain in chains)
    prompt = render(
        templates["rewrite"], {"STORY": story.text, "EVIDENCE CHAINS": block}
    )
    text = complete_with_retries(
        provider, prompt, config.sampling, config.retry, sink=sink, stage="rewrite"
    )
    return Story(text=text, provenance=PROVENANCE_FINAL, id="final")


def _config_snapshot(
    config: PipelineConfig,
    provider: ChatProvider,
    embedder: Embedder | None,
    templates: TemplateSet,
    conditions: ConditionSet,
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    snapshot: dict[str, Any] = {
        "pipeline": config.to_dict(),
        "provider": provider.id,
        "embedder": embedder.fingerprint() if embedder is not None else None,
        "templates": templates.asset_hashes(),
        "conditions": conditions.to_dict(),
    }
    if extra:
        snapshot.update(extra)
    return snapshot


def run_grove(
    conditions: ConditionSet,
    repo: Repository | None,
    provider: ChatProvider,
    embedder: Embedder | None,
    config: PipelineConfig,
    *,
    workers: int = 1,
    manifest: RunManifest | None = None,
    templates: TemplateSet | None = None,
    conditioned_ambiguities: bool = False,
) -> tuple[GenerationResult, RunManifest]:
    """Execute the full loop and return the result with its transcript."""
    templates = templates or default_templates()
    if config.exemplars > 0 and (repo is None or len(repo) == 0):
        raise ValueError("a non-empty repository is required unless k=0")
    if manifest is None:
        manifest = RunManifest(
            _config_snapshot(config, provider, embedder, templates, conditions,
                             extra={"strategy": STRATEGY_GROVE})
        )

    def _stage(name: str, fn: Callable[[], Any]) -> Any:
        try:
            return fn()
        except GroveError as err:
            raise PipelineStageError(name, err) from err

    if config.exemplars > 0:
        assert repo is not None and embedder is not None
        examples = ExampleSet(
            tuple(_stage("retrieve", lambda: retrieve(repo, conditions, config.exemplars, embedder)))
        )
    else:
        examples = ExampleSet(())

    initial = _stage("initial", lambda: generate_initial(
        conditions, examples, provider, config, sink=manifest.records, templates=templates,
    ))
    ambiguities = _stage("ambiguities", lambda: find_ambiguities(
        initial, provider, config,
        conditions=conditions, conditioned=conditioned_ambiguities,
        sink=manifest.records, templates=templates,
    ))
    forest = _stage("forest", lambda: build_forest(
        initial, ambiguities, provider, config,
        sink=manifest.records, templates=templates, workers=workers,
    ))
    selections = _stage("select", lambda: _execute_slots(
        list(forest.trees),
        lambda tree, local: select_chain(
            initial, tree, provider, config, sink=local, templates=templates
        ),
        manifest.records,
        workers,
    ))
    final = _stage("rewrite", lambda: rewrite(
        initial, selections, provider, config, sink=manifest.records, templates=templates,
    ))

    result = GenerationResult(
        initial=initial,
        forest=forest,
        selected_chains=tuple(selections),
        final=final,
        manifest_ref=manifest.run_id,
    )
    manifest.finalize(result.to_dict())
    return result, manifest


def parse_cot_response(response: str) -> tuple[str, bool]:
    """Text after the last "Integrated Story" marker; whole response if absent."""
    position = response.rfind(COT_MARKER)
    if position < 0:
        return response, False
    tail = response[position + len(COT_MARKER):]
    tail = tail.lstrip(" \t\r\n:\"'").strip()
    if not tail:
        return response, False
    return tail, True


def prompt_e_variants(templates: TemplateSet | None = None) -> tuple[str, ...]:
    templates = templates or default_templates()
    return tuple(templates["prompt_e_variants"].body.splitlines())


def generate_baseline(
    strategy: str,
    conditions: ConditionSet,
    repo: Repository | None,
    provider: ChatProvider,
    embedder: Embedder | None,
    config: PipelineConfig,
    *,
    samples: int = 3,
    scorer: Callable[[Story], float] | None = None,
    manifest: RunManifest | None = None,
    templates: TemplateSet | None = None,
) -> tuple[BaselineResult, RunManifest]:
    """Run one baseline strategy against the shared retrieval setup."""
    templates = templates or default_templates()
    if strategy not in (STRATEGY_ICL, STRATEGY_COT, STRATEGY_PROMPT_E, STRATEGY_STORY_S):
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    if config.exemplars > 0 and (repo is None or len(repo) == 0):
        raise ValueError("a non-empty repository is required unless k=0")
    if manifest is None:
        manifest = RunManifest(
            _config_snapshot(config, provider, embedder, templates, conditions,
                             extra={"strategy": strategy, "samples": samples})
        )
    sink = manifest.records

    if config.exemplars > 0:
        assert repo is not None and embedder is not None
        examples = ExampleSet(tuple(retrieve(repo, conditions, config.exemplars, embedder)))
    else:
        examples = ExampleSet(())
    _require_full_conditions(conditions)
    base_prompt = instruction_prompt(conditions, examples, templates)
    stage = f"baseline-{strategy}"

    if strategy == STRATEGY_ICL:
        text = complete_with_retries(
            provider, base_prompt, config.sampling, config.retry, sink=sink, stage=stage
        )
        result = BaselineResult(
            strategy=strategy,
            story=Story(text=text, provenance=baseline_provenance(strategy), id="icl"),
        )

    elif strategy == STRATEGY_COT:
        suffix = render(templates["cot_suffix"], {"N": config.ambiguities})
        response = complete_with_retries(
            provider, f"{base_prompt} {suffix}", config.sampling, config.retry,
            sink=sink, stage=stage,
        )
        text, marker_found = parse_cot_response(response)
        sink[-1].parsed = (
            "integrated-story-marker: present" if marker_found
            else "integrated-story-marker: absent (full response kept)"
        )
        result = BaselineResult(
            strategy=strategy,
            story=Story(text=text, provenance=baseline_provenance(strategy), id="cot"),
            cot_marker_found=marker_found,
        )

    elif strategy == STRATEGY_PROMPT_E:
        variants = []
        for i, sentence in enumerate(prompt_e_variants(templates)):
            text = complete_with_retries(
                provider, f"{base_prompt} {sentence}", config.sampling, config.retry,
                sink=sink, stage=stage, key=(i,),
            )
            variants.append(
                Story(text=text, provenance=baseline_provenance(strategy), id=f"prompt-e-{i}")
            )
        result = BaselineResult(
            strategy=strategy, story=variants[0], variants=tuple(variants)
        )

    else:  # STRATEGY_STORY_S
        if samples < 1:
            raise ValueError("story-s needs a sample count >= 1")
        if scorer is None:
            raise ValueError("story-s needs an evaluation scorer")
        drafts = []
        for i in range(samples):
            text = complete_with_retries(
                provider, base_prompt, config.sampling, config.retry,
                sink=sink, stage=stage, key=(i,),
            )
            drafts.append(
                Story(text=text, provenance=baseline_provenance(strategy), id=f"story-s-{i}")
            )
        scores = tuple(float(scorer(draft)) for draft in drafts)
        best = max(range(samples), key=lambda i: (scores[i], -i))
        result = BaselineResult(
            strategy=strategy,
            story=drafts[best],
            samples=tuple(drafts),
            sample_scores=scores,
        )

    result = replace(result, manifest_ref=manifest.run_id)
    manifest.finalize(result.to_dict())
    return result, manifest
