"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class GroveError(Exception):
    """Base class for all errors raised by this package."""


class MissingBindingError(GroveError):
    """A template placeholder has no binding."""

    def __init__(self, template_id: str, placeholder: str):
        self.template_id = template_id
        self.placeholder = placeholder
        super().__init__(
            f"template {template_id!r} has unbound placeholder [{placeholder}]"
        )


class EmptyPromptError(GroveError):
    """complete() was handed an empty prompt."""


class OverLengthPromptError(GroveError):
    """Prompt exceeds the provider's maximum input length."""

    def __init__(self, length: int, limit: int):
        self.length = length
        self.limit = limit
        super().__init__(f"prompt of {length} chars exceeds provider limit {limit}")


class TransportError(GroveError):
    """Network-level failure talking to a remote provider. Retryable."""


class RefusalError(GroveError):
    """The model declined to produce the requested content."""

    def __init__(self, response: str, attempts: int = 1):
        self.response = response
        self.attempts = attempts
        super().__init__(f"provider refused after {attempts} attempt(s): {response[:120]!r}")


class MalformedListError(GroveError):
    """A numbered-list response had fewer items than required after retries."""

    def __init__(self, expected: int, got: int, response: str, attempts: int = 1):
        self.expected = expected
        self.got = got
        self.response = response
        self.attempts = attempts
        super().__init__(
            f"expected at least {expected} list item(s), got {got} "
            f"after {attempts} attempt(s); last response: {response[:120]!r}"
        )


class NumberExtractionError(GroveError):
    """No integer in the accepted range appeared in the response after retries."""

    def __init__(self, low: int, high: int, response: str, attempts: int = 1):
        self.low = low
        self.high = high
        self.response = response
        self.attempts = attempts
        super().__init__(
            f"no integer in [{low}, {high}] found after {attempts} attempt(s); "
            f"last response: {response[:120]!r}"
        )


class ScriptedProviderError(GroveError):
    """The scripted provider had no rule for a prompt."""


class EmbeddingError(GroveError):
    """Text could not be embedded (empty input)."""


class NoSharedSlotsError(GroveError):
    """Two condition sets have no populated slot in common."""


class FingerprintMismatchError(GroveError):
    """Repository embeddings were produced by a different embedder."""

    def __init__(self, expected: str, got: str):
        super().__init__(f"repository embedder is {expected!r}, caller supplied {got!r}")


class RepositoryLoadError(GroveError):
    """A repository file failed to parse."""

    def __init__(self, path: str, line: int, reason: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class RepositoryBuildError(GroveError):
    """Every corpus story failed condition extraction."""

    def __init__(self, causes: dict[str, str]):
        self.causes = dict(causes)
        listing = "; ".join(f"{sid}: {why}" for sid, why in self.causes.items())
        super().__init__(f"all {len(self.causes)} corpus stories failed extraction: {listing}")


class TreeGrowthError(GroveError):
    """Evidence-tree expansion failed at a specific node."""

    def __init__(self, tree_index: int, node_path: tuple[str, ...], cause: Exception):
        self.tree_index = tree_index
        self.node_path = node_path
        self.cause = cause
        super().__init__(
            f"tree {tree_index}: expansion failed at node path "
            f"{' -> '.join(t[:40] for t in node_path)!r}: {cause}"
        )


class ChainConstraintError(GroveError):
    """A rewrite was given zero or multiple chains from the same tree."""


class PipelineStageError(GroveError):
    """A pipeline stage failed; wraps the underlying error."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class UsageError(GroveError):
    """Bad command line; maps to exit code 1."""
