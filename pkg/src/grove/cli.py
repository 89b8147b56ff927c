"""Command-line surface: build-repo, generate, evaluate, bench, inspect-run.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; machine-readable output goes to files or stdout as JSON. Settings
resolve as flags > environment (GROVE_*) > config file > defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable

from .bench import BenchmarkPlan, run_benchmark
from .errors import GroveError, UsageError
from .evaluation import count_plots, likert_eval, overlap_report
from .manifest import RunManifest
from .pipeline import (
    STRATEGIES,
    STRATEGY_GROVE,
    generate_baseline,
    run_grove,
)
from .providers import (
    ChatProvider,
    Embedder,
    HttpChatProvider,
    LexicalEmbedder,
    ScriptedProvider,
)
from .repository import build as build_repository
from .repository import load as load_repository
from .repository import save as save_repository
from .reporting import write_benchmark_report, write_evaluation_report
from .templates import TemplateSet, default_templates, load_templates
from .types import (
    ConditionSet,
    PipelineConfig,
    PROVENANCE_FINAL,
    PROVENANCE_HUMAN,
    RetryPolicy,
    SamplingParams,
    Story,
)

ENV_PREFIX = "GROVE_"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolve(flag_value, env_name: str, cfg: dict, cfg_key: str, default, cast=None):
    if flag_value is not None:
        return flag_value
    env = os.environ.get(ENV_PREFIX + env_name)
    if env is not None:
        return cast(env) if cast else env
    if cfg_key in cfg:
        value = cfg[cfg_key]
        return cast(value) if cast else value
    return default


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise GroveError(f"config file {path}: {err}")


def _build_pipeline_config(args, cfg: dict) -> PipelineConfig:
    sampling = SamplingParams(
        nucleus_p=_resolve(args.nucleus_p, "NUCLEUS_P", cfg, "nucleus_p", 0.73, float),
        temperature=_resolve(args.temperature, "TEMPERATURE", cfg, "temperature", 0.72, float),
        seed=_resolve(args.seed, "SEED", cfg, "seed", None, int),
    )
    retry = RetryPolicy(
        max_refusal_retries=_resolve(
            args.refusal_retries, "REFUSAL_RETRIES", cfg, "refusal_retries", 2, int
        ),
        max_malformed_retries=_resolve(
            args.malformed_retries, "MALFORMED_RETRIES", cfg, "malformed_retries", 2, int
        ),
    )
    return PipelineConfig(
        exemplars=_resolve(args.k, "K", cfg, "k", 1, int),
        ambiguities=_resolve(args.n, "N", cfg, "n", 2, int),
        branching=_resolve(args.b, "B", cfg, "b", 2, int),
        depth=_resolve(args.i, "I", cfg, "i", 2, int),
        sampling=sampling,
        retry=retry,
    )


def _build_provider(args, cfg: dict) -> ChatProvider:
    kind = _resolve(args.provider, "PROVIDER", cfg, "provider", "scripted")
    if kind == "scripted":
        rules = _resolve(args.rules, "RULES", cfg, "rules", None)
        if not rules:
            raise UsageError("the scripted provider needs --rules FILE")
        return ScriptedProvider.from_rules_file(rules)
    if kind == "http":
        endpoint = _resolve(args.endpoint, "ENDPOINT", cfg, "endpoint", None)
        model = _resolve(args.model, "MODEL", cfg, "model", None)
        if not endpoint or not model:
            raise UsageError("the http provider needs --endpoint URL and --model NAME")
        return HttpChatProvider(
            endpoint,
            model,
            api_key=_resolve(args.api_key, "API_KEY", cfg, "api_key", None),
            timeout=_resolve(args.timeout, "TIMEOUT", cfg, "timeout", 60.0, float),
        )
    raise UsageError(f"unknown provider {kind!r} (expected scripted or http)")


def _build_embedder(args, cfg: dict) -> Embedder:
    kind = _resolve(args.embedder, "EMBEDDER", cfg, "embedder", "lexical")
    if kind != "lexical":
        raise UsageError(f"unknown embedder {kind!r} (only lexical is built in)")
    return LexicalEmbedder(dimension=_resolve(args.dim, "DIM", cfg, "dim", 256, int))


def _load_templates(args) -> TemplateSet:
    if getattr(args, "templates", None):
        return load_templates(args.templates)
    return default_templates()


def _load_conditions(spec: str) -> ConditionSet:
    try:
        data = json.loads(spec)
    except json.JSONDecodeError:
        path = Path(spec)
        if not path.exists():
            raise UsageError(f"--conditions is neither JSON nor an existing file: {spec}")
        data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise UsageError("conditions JSON must be an object with plot/mood/genre/subjects")
    try:
        return ConditionSet.from_dict(data)
    except ValueError as err:
        raise UsageError(str(err))


def load_corpus(path: str | Path) -> tuple[list[Story], dict[str, str]]:
    """JSONL of {id, text, genre?} or a directory of plain-text files."""
    path = Path(path)
    stories: list[Story] = []
    genres: dict[str, str] = {}
    if path.is_dir():
        for file in sorted(p for p in path.iterdir() if p.is_file()):
            text = file.read_text(encoding="utf-8").strip()
            if text:
                stories.append(Story(text=text, provenance=PROVENANCE_HUMAN, id=file.stem))
        return stories, genres
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as err:
            raise GroveError(f"{path}:{lineno}: invalid JSON: {err.msg}")
        try:
            story_id = str(data["id"])
            stories.append(
                Story(text=data["text"], provenance=PROVENANCE_HUMAN, id=story_id)
            )
        except (KeyError, TypeError, ValueError) as err:
            raise GroveError(f"{path}:{lineno}: bad corpus record: {err}")
        if data.get("genre"):
            genres[story_id] = data["genre"]
    return stories, genres


def _emit(data: Any, out: str | None) -> None:
    text = json.dumps(data, indent=2, ensure_ascii=False)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# --- commands -----------------------------------------------------------------

def cmd_build_repo(args) -> int:
    cfg = _load_config_file(args.config)
    provider = _build_provider(args, cfg)
    embedder = _build_embedder(args, cfg)
    config = _build_pipeline_config(args, cfg)
    templates = _load_templates(args)
    corpus, genres = load_corpus(args.corpus)
    if not corpus:
        raise GroveError(f"corpus {args.corpus} holds no stories")
    repo, skips = build_repository(
        corpus, provider, embedder, config,
        genres=genres, templates=templates, workers=args.workers,
    )
    save_repository(repo, args.out)
    _emit(
        {
            "out": str(args.out),
            "items": len(repo),
            "skipped": [{"id": s.story_id, "reason": s.reason} for s in skips],
        },
        None,
    )
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config_file(args.config)
    provider = _build_provider(args, cfg)
    embedder = _build_embedder(args, cfg)
    config = _build_pipeline_config(args, cfg)
    templates = _load_templates(args)
    conditions = _load_conditions(args.conditions)
    repo = load_repository(args.repo, embedder) if args.repo else None

    if args.strategy == STRATEGY_GROVE:
        result, manifest = run_grove(
            conditions, repo, provider, embedder, config,
            workers=args.workers, templates=templates,
        )
    else:
        scorer = None
        if args.strategy == "story-s":
            def scorer(story: Story) -> float:
                return likert_eval(
                    story, conditions, provider, args.trials,
                    sampling=config.sampling, retry=config.retry, templates=templates,
                ).total_mean()

        result, manifest = generate_baseline(
            args.strategy, conditions, repo, provider, embedder, config,
            samples=args.samples, scorer=scorer, templates=templates,
        )

    if args.manifest_out:
        manifest.save(args.manifest_out)
    _emit(result.to_dict(), args.out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config_file(args.config)
    provider = _build_provider(args, cfg)
    config = _build_pipeline_config(args, cfg)
    templates = _load_templates(args)
    conditions = _load_conditions(args.conditions)

    story_text = Path(args.story).read_text(encoding="utf-8").strip()
    if not story_text:
        raise GroveError(f"story file {args.story} is empty")
    story = Story(text=story_text, provenance=PROVENANCE_FINAL, id=Path(args.story).stem)

    likert = likert_eval(
        story, conditions, provider, args.trials,
        sampling=config.sampling, retry=config.retry, templates=templates,
    )
    plots = count_plots(
        story, provider, args.plot_trials,
        sampling=config.sampling, retry=config.retry, templates=templates,
    )
    report: dict[str, Any] = {
        "story_id": story.id,
        "likert": likert.to_dict(),
        "plot_count": plots,
        "overlap": None,
    }
    if args.reference:
        reference_text = Path(args.reference).read_text(encoding="utf-8").strip()
        if not reference_text:
            raise GroveError(f"reference file {args.reference} is empty")
        reference = Story(
            text=reference_text, provenance=PROVENANCE_HUMAN, id=Path(args.reference).stem
        )
        report["overlap"] = overlap_report(story, reference).to_dict()

    _emit(report, args.out)
    if args.figures_dir:
        write_evaluation_report(report, args.figures_dir)
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config_file(args.config)
    plan = BenchmarkPlan.load(args.plan)
    if args.dry_run:
        _emit(
            {
                "cases": plan.case_count,
                "strategies": list(plan.strategies),
                "total_runs": plan.case_count * len(plan.strategies),
            },
            None,
        )
        return 0
    provider = _build_provider(args, cfg)
    embedder = _build_embedder(args, cfg)
    config = _build_pipeline_config(args, cfg)
    templates = _load_templates(args)
    repo = load_repository(args.repo, embedder) if args.repo else None

    outdir = Path(args.out)
    manifest_dir = Path(args.manifest_dir) if args.manifest_dir else outdir / "manifests"
    report = run_benchmark(
        plan, repo, provider, embedder, config,
        manifest_dir=manifest_dir, trials=args.trials, samples=args.samples,
        workers=args.workers, templates=templates,
    )
    written = write_benchmark_report(report, outdir)
    _emit(
        {
            "out": str(outdir),
            "files": [str(p) for p in written],
            "cases": plan.case_count,
            "total_runs": report["total_runs"],
            "failure_rate": report["failure_rate"],
        },
        None,
    )
    return 0


def cmd_inspect_run(args) -> int:
    manifest = RunManifest.load(args.manifest)
    records = manifest.records
    if args.stage:
        records = [r for r in records if r.stage == args.stage]
        if not records:
            raise GroveError(f"manifest has no records for stage {args.stage!r}")
    _emit([r.to_dict() for r in records], None)
    return 0


# --- wiring ---------------------------------------------------------------------

def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("provider")
    group.add_argument("--provider", choices=["scripted", "http"], default=None)
    group.add_argument("--rules", help="scripted provider rules file (JSON)")
    group.add_argument("--endpoint", help="http provider URL")
    group.add_argument("--model", help="http provider model id")
    group.add_argument("--api-key", dest="api_key")
    group.add_argument("--timeout", type=float, default=None)


def _add_embedder_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("embedder")
    group.add_argument("--embedder", choices=["lexical"], default=None)
    group.add_argument("--dim", type=int, default=None, help="lexical embedder dimension")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("pipeline config")
    group.add_argument("--config", help="JSON config file (lowest precedence)")
    group.add_argument("--k", type=int, default=None, help="few-shot exemplar count")
    group.add_argument("--n", type=int, default=None, help="ambiguity / tree count")
    group.add_argument("--b", type=int, default=None, help="evidence branching factor")
    group.add_argument("--i", type=int, default=None, help="asking-why iterations (tree depth)")
    group.add_argument("--nucleus-p", dest="nucleus_p", type=float, default=None)
    group.add_argument("--temperature", type=float, default=None)
    group.add_argument("--seed", type=int, default=None)
    group.add_argument("--refusal-retries", dest="refusal_retries", type=int, default=None)
    group.add_argument("--malformed-retries", dest="malformed_retries", type=int, default=None)
    group.add_argument("--templates", help="alternative template asset directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="grove", description="Retrieval-augmented story generation engine")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    p = commands.add_parser("build-repo", parents=[], help="extract conditions for a corpus")
    p.add_argument("--corpus", required=True, help="JSONL file or directory of text files")
    p.add_argument("--out", required=True, help="repository output path (JSONL)")
    p.add_argument("--workers", type=int, default=1)
    _add_provider_flags(p)
    _add_embedder_flags(p)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_build_repo)

    p = commands.add_parser("generate", help="run one strategy for one condition set")
    p.add_argument("--conditions", required=True, help="JSON object or path to one")
    p.add_argument("--repo", help="repository file (omit only with --k 0)")
    p.add_argument("--strategy", choices=list(STRATEGIES), default=STRATEGY_GROVE)
    p.add_argument("--manifest-out", dest="manifest_out", help="write the run manifest here")
    p.add_argument("--out", help="result JSON path (default: stdout)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--samples", type=int, default=3, help="story-s sample count")
    p.add_argument("--trials", type=int, default=3, help="likert trials for story-s scoring")
    _add_provider_flags(p)
    _add_embedder_flags(p)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_generate)

    p = commands.add_parser("evaluate", help="score one story")
    p.add_argument("--story", required=True, help="text file holding the story")
    p.add_argument("--conditions", required=True, help="JSON object or path to one")
    p.add_argument("--reference", help="reference story for n-gram overlap")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--plot-trials", dest="plot_trials", type=int, default=1)
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument("--figures-dir", dest="figures_dir", help="also render CSV + figures here")
    _add_provider_flags(p)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("bench", help="sweep a benchmark plan")
    p.add_argument("--plan", required=True, help="plan JSON file")
    p.add_argument("--out", default="bench-out", help="report directory")
    p.add_argument("--manifest-dir", dest="manifest_dir", help="case manifest directory")
    p.add_argument("--dry-run", dest="dry_run", action="store_true")
    p.add_argument("--repo", help="repository file")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--trials", type=int, default=3)
    _add_provider_flags(p)
    _add_embedder_flags(p)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_bench)

    p = commands.add_parser("inspect-run", help="print records from a run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", help="only records for this stage")
    p.set_defaults(handler=cmd_inspect_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except GroveError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
