"""Benchmark driver: sweep condition combinations across strategies.

Each (conditions, strategy) case writes one manifest file named by a content
hash, so an interrupted sweep resumes by skipping completed cases.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping

from .errors import GroveError
from .evaluation import METRICS, count_plots, likert_eval
from .manifest import content_key
from .pipeline import (
    STRATEGIES,
    STRATEGY_GROVE,
    STRATEGY_STORY_S,
    generate_baseline,
    run_grove,
)
from .providers import ChatProvider, Embedder
from .repository import Repository
from .templates import TemplateSet, default_templates
from .types import ConditionSet, PipelineConfig, Story

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkPlan:
    plots: tuple[str, ...]
    moods: tuple[str, ...]
    genres: tuple[str, ...]
    subjects: tuple[str, ...]
    strategies: tuple[str, ...]

    def __post_init__(self):
        for name in ("plots", "moods", "genres", "subjects", "strategies"):
            values = getattr(self, name)
            object.__setattr__(self, name, tuple(values))
            if not getattr(self, name):
                raise ValueError(f"plan list {name!r} must be non-empty")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")

    @property
    def case_count(self) -> int:
        """Condition combinations per strategy."""
        return len(self.plots) * len(self.moods) * len(self.genres) * len(self.subjects)

    def cases(self) -> Iterator[tuple[tuple[int, int, int, int], ConditionSet]]:
        """Lexicographic over (plot, mood, genre, subject) indices."""
        for pi, plot in enumerate(self.plots):
            for mi, mood in enumerate(self.moods):
                for gi, genre in enumerate(self.genres):
                    for si, subject in enumerate(self.subjects):
                        yield (pi, mi, gi, si), ConditionSet(
                            plot=plot, mood=mood, genre=genre, subjects=(subject,)
                        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BenchmarkPlan":
        return cls(
            plots=tuple(data["plots"]),
            moods=tuple(data["moods"]),
            genres=tuple(data["genres"]),
            subjects=tuple(data["subjects"]),
            strategies=tuple(data.get("strategies", STRATEGIES)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "BenchmarkPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict[str, Any]:
        return {
            "plots": list(self.plots),
            "moods": list(self.moods),
            "genres": list(self.genres),
            "subjects": list(self.subjects),
            "strategies": list(self.strategies),
        }


def case_key(conditions: ConditionSet, strategy: str, config: PipelineConfig,
             trials: int, samples: int) -> str:
    return content_key({
        "conditions": conditions.to_dict(),
        "strategy": strategy,
        "config": config.to_dict(),
        "trials": trials,
        "samples": samples,
    })


def _evaluate_stories(
    stories: list[Story],
    conditions: ConditionSet,
    provider: ChatProvider,
    config: PipelineConfig,
    trials: int,
    sink,
    templates: TemplateSet,
) -> dict[str, Any]:
    """Per-case metric values: means over the case's stories (Prompt-E averages 4)."""
    metric_values = {metric: [] for metric in METRICS}
    plot_counts = []
    for story in stories:
        report = likert_eval(
            story, conditions, provider, trials,
            sampling=config.sampling, retry=config.retry, sink=sink, templates=templates,
        )
        for metric in METRICS:
            metric_values[metric].append(report.scores[metric].mean)
        plot_counts.append(
            count_plots(
                story, provider, 1,
                sampling=config.sampling, retry=config.retry, sink=sink, templates=templates,
            )
        )
    return {
        "metrics": {m: statistics.fmean(vs) for m, vs in metric_values.items()},
        "plot_count": statistics.fmean(plot_counts),
    }


def _run_case(
    conditions: ConditionSet,
    strategy: str,
    repo: Repository | None,
    provider: ChatProvider,
    embedder: Embedder | None,
    config: PipelineConfig,
    trials: int,
    samples: int,
    templates: TemplateSet,
) -> dict[str, Any]:
    if strategy == STRATEGY_GROVE:
        result, manifest = run_grove(
            conditions, repo, provider, embedder, config, templates=templates
        )
        stories = [result.final]
    else:
        scorer = None
        if strategy == STRATEGY_STORY_S:
            def scorer(story: Story) -> float:
                return likert_eval(
                    story, conditions, provider, trials,
                    sampling=config.sampling, retry=config.retry, templates=templates,
                ).total_mean()

        result, manifest = generate_baseline(
            strategy, conditions, repo, provider, embedder, config,
            samples=samples, scorer=scorer, templates=templates,
        )
        stories = list(result.stories_for_evaluation())

    evaluation = _evaluate_stories(
        stories, conditions, provider, config, trials, manifest.records, templates
    )
    return {
        "status": "ok",
        "conditions": conditions.to_dict(),
        "strategy": strategy,
        "metrics": evaluation["metrics"],
        "plot_count": evaluation["plot_count"],
        "stories": [s.to_dict() for s in stories],
        "manifest": manifest.to_dict(),
    }


def _write_atomic(path: Path, data: dict[str, Any]) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def run_benchmark(
    plan: BenchmarkPlan,
    repo: Repository | None,
    provider: ChatProvider,
    embedder: Embedder | None,
    config: PipelineConfig,
    *,
    manifest_dir: str | Path,
    trials: int = 3,
    samples: int = 3,
    workers: int = 1,
    templates: TemplateSet | None = None,
) -> dict[str, Any]:
    """Execute every case x strategy, evaluate outputs, aggregate per strategy.

    Completed cases (one JSON file each under ``manifest_dir``) are skipped on
    restart; failures are recorded per case, never fatal.
    """
    templates = templates or default_templates()
    manifest_dir = Path(manifest_dir)
    manifest_dir.mkdir(parents=True, exist_ok=True)

    tasks = []
    for indices, conditions in plan.cases():
        for strategy_index, strategy in enumerate(plan.strategies):
            key = case_key(conditions, strategy, config, trials, samples)
            tasks.append((indices + (strategy_index,), conditions, strategy, key))

    def _execute(task) -> dict[str, Any]:
        _indices, conditions, strategy, key = task
        path = manifest_dir / f"{key}.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        try:
            record = _run_case(
                conditions, strategy, repo, provider, embedder, config,
                trials, samples, templates,
            )
        except GroveError as err:
            log.warning("case %s/%s failed: %s", strategy, key, err)
            record = {
                "status": "failed",
                "conditions": conditions.to_dict(),
                "strategy": strategy,
                "error": str(err),
            }
        record["case_key"] = key
        _write_atomic(path, record)
        return record

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_execute, tasks))
    else:
        records = [_execute(task) for task in tasks]

    return aggregate_report(plan, records, config, trials, samples)


def aggregate_report(
    plan: BenchmarkPlan,
    records: list[dict[str, Any]],
    config: PipelineConfig,
    trials: int,
    samples: int,
) -> dict[str, Any]:
    strategies: dict[str, Any] = {}
    for strategy in plan.strategies:
        rows = [r for r in records if r["strategy"] == strategy]
        ok = [r for r in rows if r["status"] == "ok"]
        aggregate: dict[str, Any] = {
            "cases": len(rows),
            "completed": len(ok),
            "failed": len(rows) - len(ok),
        }
        if ok:
            aggregate["metrics"] = {
                metric: {
                    "mean": statistics.fmean(r["metrics"][metric] for r in ok),
                    "variance": statistics.pvariance([r["metrics"][metric] for r in ok]),
                }
                for metric in METRICS
            }
            aggregate["plot_count"] = {
                "mean": statistics.fmean(r["plot_count"] for r in ok),
                "variance": statistics.pvariance([r["plot_count"] for r in ok]),
            }
        strategies[strategy] = aggregate

    total = len(records)
    failed = sum(1 for r in records if r["status"] != "ok")
    return {
        "plan": plan.to_dict(),
        "case_count": plan.case_count,
        "total_runs": total,
        "failed_runs": failed,
        "failure_rate": (failed / total) if total else 0.0,
        "config": config.to_dict(),
        "trials": trials,
        "samples": samples,
        "strategies": strategies,
        "cases": [
            {
                "case_key": r.get("case_key"),
                "strategy": r["strategy"],
                "conditions": r["conditions"],
                "status": r["status"],
                "metrics": r.get("metrics"),
                "plot_count": r.get("plot_count"),
                "error": r.get("error"),
            }
            for r in records
        ],
    }
