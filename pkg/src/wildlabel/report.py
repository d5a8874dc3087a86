"""Figure + CSV rendering for evaluation, benchmark and annotation outputs.

Every renderer writes PNG figures next to same-named CSV files so reports
stay both eyeballable and greppable.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .taxonomy import EXPRESSION_KEYS

_SCENARIO_LABELS = {
    "clean": "clean only",
    "mix": "naive mix",
    "noisemix": "noise-modeled mix",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def confusion_heatmap(confusion, classes, title: str, path: Path) -> Path:
    """Row-normalized confusion heatmap; None rows render blank."""
    n = len(classes)
    grid = np.full((n, n), np.nan)
    for i, row in enumerate(confusion):
        if row is not None:
            grid[i] = row
    fig, ax = plt.subplots(figsize=(6.0, 5.2))
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=100)
    ax.set_xticks(range(n), classes, rotation=45, ha="right")
    ax.set_yticks(range(n), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    ax.set_title(title)
    for i in range(n):
        for j in range(n):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.0f}", ha="center", va="center",
                        color="white" if grid[i, j] < 55 else "black",
                        fontsize=8)
    fig.colorbar(im, ax=ax, label="% of actual class")
    return _save(fig, path)


def confusion_csv(confusion, classes, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actual"] + list(classes))
        for name, row in zip(classes, confusion):
            writer.writerow([name] + (["" for _ in classes] if row is None
                                      else [f"{v:.4f}" for v in row]))
    return path


def accuracy_bars(accuracies: dict[str, list[float]], path: Path,
                  title: str = "test accuracy per scenario") -> Path:
    """Bar chart of per-seed accuracies grouped by scenario."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    names = list(accuracies)
    n_seeds = max(len(v) for v in accuracies.values())
    width = 0.8 / n_seeds
    for s in range(n_seeds):
        xs = np.arange(len(names)) + (s - (n_seeds - 1) / 2) * width
        ys = [accuracies[name][s] if s < len(accuracies[name]) else np.nan
              for name in names]
        ax.bar(xs, ys, width=width * 0.95, label=f"seed {s}")
    ax.set_xticks(range(len(names)),
                  [_SCENARIO_LABELS.get(n, n) for n in names])
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def recall_delta_bars(deltas: dict[str, float | None], path: Path,
                      title: str) -> Path:
    keys = [k for k in EXPRESSION_KEYS if deltas.get(k) is not None]
    values = [deltas[k] for k in keys]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    colors = ["#2a9d8f" if v >= 0 else "#e76f51" for v in values]
    ax.bar(keys, values, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("recall delta (points)")
    ax.set_title(title)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    return _save(fig, path)


def loss_curves(history: list[dict], path: Path,
                title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    phases = sorted({h["phase"] for h in history},
                    key=lambda p: (p != "pretrain", p))
    offset = 0
    for phase in phases:
        entries = [h for h in history if h["phase"] == phase]
        xs = [offset + h["iteration"] for h in entries]
        ax.plot(xs, [h["loss"] for h in entries], linewidth=0.7, label=phase)
        offset = xs[-1] + 1 if xs else offset
    ax.set_xlabel("iteration")
    ax.set_ylabel("minibatch loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def query_confusion_heatmap(result: dict, path: Path) -> Path:
    emotions = result["emotions"]
    categories = result["categories"]
    grid = np.array(result["matrix"])
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    im = ax.imshow(grid, cmap="magma", vmin=0,
                   vmax=max(1.0, float(grid.max())))
    ax.set_xticks(range(len(categories)), categories, rotation=45, ha="right")
    ax.set_yticks(range(len(emotions)), emotions)
    ax.set_xlabel("resolved category")
    ax.set_ylabel("queried emotion")
    ax.set_title("query-to-annotation confusion (%)")
    for i in range(len(emotions)):
        for j in range(len(categories)):
            ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center",
                    fontsize=7,
                    color="white" if grid[i, j] < 0.6 * grid.max() else "black")
    fig.colorbar(im, ax=ax, label="% of queried images")
    return _save(fig, path)


def render_eval(report_json: dict, outdir: Path, stem: str = "eval") -> list[Path]:
    outdir = Path(outdir)
    classes = report_json.get("classes", list(EXPRESSION_KEYS))
    title = (f"{_SCENARIO_LABELS.get(report_json.get('scenario'), 'model')} "
             f"({report_json['accuracy']:.2f}%)")
    files = [
        confusion_heatmap(report_json["confusion"], classes, title,
                          outdir / f"{stem}_confusion.png"),
        confusion_csv(report_json["confusion"], classes,
                      outdir / f"{stem}_confusion.csv"),
    ]
    return files


def render_simulate(result_json: dict, outdir: Path) -> list[Path]:
    """Figures + CSVs for a benchmark result: accuracy bars, per-seed
    accuracy table, recall deltas, and seed-0 confusion matrices."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    runs = result_json["runs"]
    scenarios = list(runs[0]["comparison"]["accuracies"])
    accuracies = {s: [r["comparison"]["accuracies"][s] for r in runs]
                  for s in scenarios}
    files = [accuracy_bars(accuracies, outdir / "accuracies.png")]

    acc_csv = outdir / "accuracies.csv"
    with open(acc_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed"] + scenarios)
        for run in runs:
            writer.writerow([run["seed"]] + [
                f"{run['comparison']['accuracies'][s]:.4f}" for s in scenarios])
    files.append(acc_csv)

    mean_deltas: dict[str, float | None] = {}
    for key in EXPRESSION_KEYS:
        vals = [r["comparison"]["recall_delta_noise_vs_naive"].get(key)
                for r in runs]
        vals = [v for v in vals if v is not None]
        mean_deltas[key] = float(np.mean(vals)) if vals else None
    files.append(recall_delta_bars(
        mean_deltas, outdir / "recall_deltas.png",
        "noise-modeled mix vs naive mix (mean over seeds)"))
    delta_csv = outdir / "recall_deltas.csv"
    with open(delta_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "mean_delta_points"])
        for key, value in mean_deltas.items():
            writer.writerow([key, "" if value is None else f"{value:.4f}"])
    files.append(delta_csv)

    for scenario, report in runs[0]["reports"].items():
        files.extend(render_eval(report, outdir, stem=f"seed0_{scenario}"))
    return files


def render_stats(stats_json: dict, outdir: Path) -> list[Path]:
    """Figures + CSVs for annotation statistics output."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    confusion = stats_json.get("query_confusion")
    if confusion and confusion.get("emotions"):
        files.append(query_confusion_heatmap(
            confusion, outdir / "query_confusion.png"))
        qc_csv = outdir / "query_confusion.csv"
        with open(qc_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["queried"] + list(confusion["categories"])
                            + ["n"])
            for emotion, row, total in zip(confusion["emotions"],
                                           confusion["matrix"],
                                           confusion["row_totals"]):
                writer.writerow([emotion] + [f"{v:.4f}" for v in row] + [total])
        files.append(qc_csv)

    agreement = stats_json.get("agreement")
    if agreement and agreement.get("resolved_counts"):
        counts = agreement["resolved_counts"]
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.bar(list(counts), list(counts.values()), color="#457b9d")
        ax.set_ylabel("resolved images")
        ax.set_title("resolved label counts per category")
        plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
        files.append(_save(fig, outdir / "resolved_counts.png"))
        counts_csv = outdir / "resolved_counts.csv"
        with open(counts_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category", "count"])
            for key, value in counts.items():
                writer.writerow([key, value])
        files.append(counts_csv)
    return files


def render_history(history_json: list[dict], outdir: Path,
                   stem: str = "train") -> list[Path]:
    outdir = Path(outdir)
    files = [loss_curves(history_json, outdir / f"{stem}_loss.png")]
    hist_csv = outdir / f"{stem}_loss.csv"
    hist_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(hist_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "iteration", "loss", "lr"])
        for entry in history_json:
            writer.writerow([entry["phase"], entry["iteration"],
                             f"{entry['loss']:.6f}", entry["lr"]])
    files.append(hist_csv)
    return files
