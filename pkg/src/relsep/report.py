"""Run artifacts: delimited tables, JSON metric reports, and figures.

Text outputs are fully deterministic (LF endings, repr-formatted
floats) so identical runs produce byte-identical files. Figures are
rendered headlessly next to the tables they chart.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402
from .trainer import TrainResult  # noqa: E402


def write_text(path, text: str) -> None:
    """UTF-8 with LF endings regardless of platform."""
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def write_training_log(path, result: TrainResult) -> None:
    """One row per loss entry per epoch, totals repeated for grepping."""
    lines = ["epoch\trelation\tkind\tdirection\tvalue\ttotal"]
    for epoch, breakdown in result.history:
        for relation, kind, direction, value in breakdown.entries:
            lines.append(f"{epoch}\t{relation}\t{kind}\t{direction}\t"
                         f"{value!r}\t{breakdown.total!r}")
    write_text(path, "\n".join(lines) + "\n")


def write_embeddings(path, embeddings: np.ndarray) -> None:
    rows = [f"{i}\t" + "\t".join(repr(float(v)) for v in row)
            for i, row in enumerate(np.asarray(embeddings))]
    write_text(path, "\n".join(rows) + "\n")


def read_embeddings(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        rows.append([float(v) for v in parts[1:]])
    return np.array(rows, dtype=np.float64)


def report_to_json(report: MetricsReport) -> str:
    payload = {
        "dataset": report.dataset,
        "split": report.split,
        "config_hash": report.config_hash,
        "trials": report.trials,
        "metrics": {name: {"mean": mean, "std": std}
                    for name, (mean, std) in report.metrics.items()},
    }
    return json.dumps(payload, indent=2) + "\n"


def report_to_tsv(report: MetricsReport) -> str:
    lines = ["metric\tmean\tstd"]
    lines += [f"{name}\t{mean!r}\t{std!r}"
              for name, (mean, std) in report.metrics.items()]
    return "\n".join(lines) + "\n"


def write_metrics(directory, name: str, report: MetricsReport) -> None:
    """JSON and TSV twins of one report."""
    directory = Path(directory)
    write_text(directory / f"{name}.json", report_to_json(report))
    write_text(directory / f"{name}.tsv", report_to_tsv(report))


def write_sweep_table(path, points, value: str = "micro_f1") -> None:
    """Robustness curve data, one row per removal rate."""
    lines = [f"rate\t{value}_mean\t{value}_std"]
    for rate, report in points:
        mean, std = report.metrics[value]
        lines.append(f"{rate!r}\t{mean!r}\t{std!r}")
    write_text(path, "\n".join(lines) + "\n")


def write_ablation_table(path, rows) -> None:
    """One row per variant with the classification metric triple."""
    lines = ["variant\tmicro_f1_mean\tmicro_f1_std\tmacro_f1_mean"
             "\tmacro_f1_std\tauc_mean\tauc_std"]
    for variant, report in rows:
        cells = [variant]
        for metric in ("micro_f1", "macro_f1", "auc"):
            mean, std = report.metrics[metric]
            cells += [repr(mean), repr(std)]
        lines.append("\t".join(cells))
    write_text(path, "\n".join(lines) + "\n")


def save_loss_curve(path, result: TrainResult) -> None:
    epochs = [e for e, _ in result.history]
    totals = [b.total for _, b in result.history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, totals, lw=1.5)
    if result.best_epoch >= 0:
        ax.axvline(result.best_epoch, color="gray", ls="--", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metrics_bar(path, report: MetricsReport) -> None:
    names = list(report.metrics)
    means = [report.metrics[n][0] for n in names]
    stds = [report.metrics[n][1] for n in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("score")
    ax.set_title(f"Evaluation (split {report.split}, "
                 f"{report.trials} trials)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_sweep_curve(path, points, value: str = "micro_f1") -> None:
    rates = [r for r, _ in points]
    means = np.array([rep.metrics[value][0] for _, rep in points])
    stds = np.array([rep.metrics[value][1] for _, rep in points])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rates, means, marker="o")
    ax.fill_between(rates, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("edge removal rate")
    ax.set_ylabel(value)
    ax.set_title("Robustness to edge removal")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_bars(path, rows, value: str = "micro_f1") -> None:
    names = [variant for variant, _ in rows]
    means = [rep.metrics[value][0] for _, rep in rows]
    stds = [rep.metrics[value][1] for _, rep in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
    ax.set_ylabel(value)
    ax.set_title("Variant comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
