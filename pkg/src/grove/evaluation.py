"""Automatic measurement: Likert scoring, plot enumeration, n-gram overlap."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import GroveError, MalformedListError, RefusalError
from .manifest import CallRecord
from .parsing import parse_list_items, tokenize
from .providers import ChatProvider, complete_with_retries, request_int, request_list
from .templates import TemplateSet, default_templates, render
from .types import ConditionSet, RetryPolicy, SamplingParams, Story

METRICS = ("grammar", "coherence", "likability", "relevance", "complexity", "creativity")

DEFAULT_TRIALS = 3

_DEFAULT_METRIC_TEMPLATES = {metric: f"likert_{metric}" for metric in METRICS}


@dataclass(frozen=True)
class MetricScore:
    mean: float
    variance: float
    raw: tuple[int, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "variance": self.variance, "raw": list(self.raw)}


@dataclass(frozen=True)
class LikertReport:
    scores: dict[str, MetricScore]
    trials: int

    def total_mean(self) -> float:
        """Sum of the six metric means; the overall score used by Story-S."""
        return sum(self.scores[m].mean for m in METRICS)

    def to_dict(self) -> dict[str, Any]:
        return {metric: self.scores[metric].to_dict() for metric in METRICS}


@dataclass(frozen=True)
class OverlapReport:
    """Per-n overlap ratios for n in 1..4.

    ``short_text_ns`` flags the n values the generated story was too short
    for; their ratio is reported as 0.0.
    """

    ratios: dict[int, float]
    short_text_ns: tuple[int, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {str(n): self.ratios[n] for n in sorted(self.ratios)}
        data["short_text_ns"] = list(self.short_text_ns)
        return data


def likert_eval(
    story: Story,
    conditions: ConditionSet,
    provider: ChatProvider,
    trials: int = DEFAULT_TRIALS,
    *,
    sampling: SamplingParams | None = None,
    retry: RetryPolicy | None = None,
    sink: list[CallRecord] | None = None,
    templates: TemplateSet | None = None,
    metric_templates: Mapping[str, str] | None = None,
) -> LikertReport:
    """Score the story 1-5 on each metric, re-querying ``trials`` times.

    Each (metric, trial) is one provider call; a response without a rating is
    re-asked within the retry budget. Variance is the population variance
    over the trial scores.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sampling = sampling or SamplingParams()
    retry = retry or RetryPolicy()
    templates = templates or default_templates()
    template_ids = dict(_DEFAULT_METRIC_TEMPLATES)
    if metric_templates:
        template_ids.update(metric_templates)

    bindings: dict[str, str] = {
        "STORY": story.text,
        "GENRE": conditions.genre or "(unspecified)",
        "EMOTION": conditions.mood or "(unspecified)",
        "SUBJECTS": conditions.slot_text("subjects") or "(unspecified)",
        "PLOTS": conditions.plot or "(unspecified)",
    }

    scores: dict[str, MetricScore] = {}
    for metric in METRICS:
        prompt = render(templates[template_ids[metric]], bindings)
        raw = []
        for trial in range(trials):
            raw.append(
                request_int(
                    provider, prompt, sampling, retry, 1, 5,
                    sink=sink, stage="likert", key=(story.id, metric, trial),
                )
            )
        scores[metric] = MetricScore(
            mean=statistics.fmean(raw),
            variance=statistics.pvariance(raw),
            raw=tuple(raw),
        )
    return LikertReport(scores=scores, trials=trials)


def count_plots(
    story: Story,
    provider: ChatProvider,
    trials: int = 1,
    *,
    sampling: SamplingParams | None = None,
    retry: RetryPolicy | None = None,
    sink: list[CallRecord] | None = None,
    templates: TemplateSet | None = None,
) -> float:
    """Mean number of plot sentences the model enumerates for the story."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not story.text.strip():
        raise ValueError("story text must be non-empty")
    sampling = sampling or SamplingParams()
    retry = retry or RetryPolicy()
    templates = templates or default_templates()
    prompt = render(templates["plot_count"], {"STORY": story.text})

    counts = []
    last_error: GroveError | None = None
    for trial in range(trials):
        try:
            items = request_list(
                provider, prompt, sampling, retry, 1,
                sink=sink, stage="plot-count", key=(story.id, trial),
            )
            counts.append(len(items))
        except (MalformedListError, RefusalError) as err:
            last_error = err
    if not counts:
        assert last_error is not None
        raise last_error
    return statistics.fmean(counts)


def ngram_overlap(generated: Story, reference: Story, n: int) -> float:
    """Fraction of the generated story's distinct n-grams found in the reference.

    Both texts are lowercased and split on non-alphanumerics, so the ratio is
    unaffected by punctuation or case.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    generated_tokens = tokenize(generated.text)
    if len(generated_tokens) < n:
        raise ValueError(
            f"generated story has {len(generated_tokens)} token(s), fewer than n={n}"
        )
    reference_tokens = tokenize(reference.text)
    generated_grams = set(zip(*(generated_tokens[i:] for i in range(n))))
    reference_grams = set(zip(*(reference_tokens[i:] for i in range(n))))
    return len(generated_grams & reference_grams) / len(generated_grams)


def overlap_report(generated: Story, reference: Story, max_n: int = 4) -> OverlapReport:
    """ngram_overlap for n = 1..max_n; too-short n values yield 0.0 and a flag."""
    token_count = len(tokenize(generated.text))
    ratios: dict[int, float] = {}
    short = []
    for n in range(1, max_n + 1):
        if token_count < n:
            ratios[n] = 0.0
            short.append(n)
        else:
            ratios[n] = ngram_overlap(generated, reference, n)
    return OverlapReport(ratios=ratios, short_text_ns=tuple(short))
