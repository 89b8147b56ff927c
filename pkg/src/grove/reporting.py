"""Report rendering: delimited summaries and matplotlib figures.

Every report path writes the JSON payload, CSV tables, and PNG charts side
by side so results can be read by machines and skimmed by people.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import METRICS


def _write_json(path: Path, data: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_benchmark_report(report: Mapping[str, Any], outdir: str | Path) -> list[Path]:
    """report.json + summary.csv + cases.csv + figures/*.png under ``outdir``."""
    outdir = Path(outdir)
    figures = outdir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = outdir / "report.json"
    _write_json(json_path, report)
    written.append(json_path)

    summary_path = outdir / "summary.csv"
    with summary_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["strategy", "metric", "mean", "variance", "completed", "failed"])
        for strategy, aggregate in report["strategies"].items():
            for metric in METRICS:
                stats = aggregate.get("metrics", {}).get(metric)
                writer.writerow([
                    strategy, metric,
                    "" if stats is None else f"{stats['mean']:.6f}",
                    "" if stats is None else f"{stats['variance']:.6f}",
                    aggregate["completed"], aggregate["failed"],
                ])
            plots = aggregate.get("plot_count")
            writer.writerow([
                strategy, "plot_count",
                "" if plots is None else f"{plots['mean']:.6f}",
                "" if plots is None else f"{plots['variance']:.6f}",
                aggregate["completed"], aggregate["failed"],
            ])
    written.append(summary_path)

    cases_path = outdir / "cases.csv"
    with cases_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["case_key", "strategy", "plot", "mood", "genre", "subjects", "status"]
            + list(METRICS) + ["plot_count", "error"]
        )
        for case in report["cases"]:
            conditions = case["conditions"]
            metrics = case.get("metrics") or {}
            writer.writerow(
                [
                    case.get("case_key", ""),
                    case["strategy"],
                    conditions.get("plot", ""),
                    conditions.get("mood", ""),
                    conditions.get("genre", ""),
                    ", ".join(conditions.get("subjects") or []),
                    case["status"],
                ]
                + [f"{metrics[m]:.6f}" if m in metrics else "" for m in METRICS]
                + [
                    "" if case.get("plot_count") is None else f"{case['plot_count']:.6f}",
                    case.get("error", "") or "",
                ]
            )
    written.append(cases_path)

    written.append(_metric_means_figure(report, figures / "metric_means.png"))
    written.append(_plot_count_figure(report, figures / "plot_counts.png"))
    return written


def _metric_means_figure(report: Mapping[str, Any], path: Path) -> Path:
    strategies = [
        s for s, agg in report["strategies"].items() if agg.get("metrics")
    ]
    fig, ax = plt.subplots(figsize=(9, 4.5))
    if strategies:
        width = 0.8 / len(strategies)
        positions = range(len(METRICS))
        for offset, strategy in enumerate(strategies):
            aggregate = report["strategies"][strategy]
            means = [aggregate["metrics"][m]["mean"] for m in METRICS]
            ax.bar(
                [p + offset * width for p in positions], means, width=width, label=strategy
            )
        ax.set_xticks([p + 0.4 - width / 2 for p in positions])
        ax.set_xticklabels(METRICS, rotation=20)
        ax.legend()
    ax.set_ylabel("mean score (1-5)")
    ax.set_title("Per-strategy metric means")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_count_figure(report: Mapping[str, Any], path: Path) -> Path:
    rows = [
        (s, agg["plot_count"]["mean"])
        for s, agg in report["strategies"].items()
        if agg.get("plot_count")
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        names, values = zip(*rows)
        ax.bar(names, values)
    ax.set_ylabel("mean plot count")
    ax.set_title("Average number of plots per story")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_evaluation_report(report: Mapping[str, Any], outdir: str | Path) -> list[Path]:
    """CSV + figures for one story's evaluation report."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = outdir / "report.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["measure", "value"])
        for metric in METRICS:
            stats = report["likert"][metric]
            writer.writerow([f"likert_{metric}_mean", f"{stats['mean']:.6f}"])
            writer.writerow([f"likert_{metric}_variance", f"{stats['variance']:.6f}"])
        writer.writerow(["plot_count", f"{report['plot_count']:.6f}"])
        overlap = report.get("overlap")
        if overlap:
            for n in ("1", "2", "3", "4"):
                if n in overlap:
                    writer.writerow([f"overlap_{n}gram", f"{overlap[n]:.6f}"])
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    means = [report["likert"][m]["mean"] for m in METRICS]
    errors = [report["likert"][m]["variance"] ** 0.5 for m in METRICS]
    ax.bar(METRICS, means, yerr=errors, capsize=4)
    ax.set_ylim(0, 5)
    ax.set_ylabel("score (1-5)")
    ax.set_title("Likert scores")
    plt.setp(ax.get_xticklabels(), rotation=20)
    fig.tight_layout()
    likert_path = outdir / "likert.png"
    fig.savefig(likert_path, dpi=120)
    plt.close(fig)
    written.append(likert_path)

    overlap = report.get("overlap")
    if overlap:
        fig, ax = plt.subplots(figsize=(5, 4))
        ns = [n for n in ("1", "2", "3", "4") if n in overlap]
        ax.bar([f"{n}-gram" for n in ns], [overlap[n] for n in ns])
        ax.set_ylim(0, 1)
        ax.set_ylabel("overlap ratio")
        ax.set_title("N-gram overlap with reference")
        fig.tight_layout()
        overlap_path = outdir / "overlap.png"
        fig.savefig(overlap_path, dpi=120)
        plt.close(fig)
        written.append(overlap_path)
    return written
