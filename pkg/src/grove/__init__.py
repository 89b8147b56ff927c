"""Retrieval-augmented story generation with evidence-forest rewriting.

The engine retrieves exemplar stories by condition similarity, drafts an
initial story, grows a forest of asking-why evidence trees over its
ambiguities, selects one chain per tree, and rewrites the story around the
selected evidence. Deterministic offline providers make every stage
replayable and testable.
"""

from .errors import GroveError
from .evaluation import (
    METRICS,
    LikertReport,
    OverlapReport,
    count_plots,
    likert_eval,
    ngram_overlap,
    overlap_report,
)
from .manifest import CallRecord, RunManifest, replay_provider
from .pipeline import (
    STRATEGIES,
    BaselineResult,
    ExampleSet,
    GenerationResult,
    build_forest,
    enumerate_chains,
    find_ambiguities,
    generate_baseline,
    generate_initial,
    grow_tree,
    rewrite,
    run_grove,
    select_chain,
)
from .providers import (
    ChatProvider,
    Embedder,
    HttpChatProvider,
    LexicalEmbedder,
    ScriptedProvider,
    ScriptedRule,
    TranscriptProvider,
    complete,
    detect_refusal,
    embed,
)
from .repository import (
    Repository,
    RepositoryItem,
    build,
    extract_conditions,
    load,
    retrieve,
    save,
    score,
)
from .templates import PromptTemplate, default_templates, load_templates, render
from .types import (
    Ambiguity,
    ConditionSet,
    EvidenceChain,
    EvidenceForest,
    EvidenceTree,
    PipelineConfig,
    RetryPolicy,
    SamplingParams,
    Story,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
