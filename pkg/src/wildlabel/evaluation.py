"""Accuracy and per-class confusion reporting, plus scenario comparison."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .taxonomy import EXPRESSION_KEYS, NUM_EXPRESSIONS
from .trainer import Classifier, Sample, samples_to_arrays


def test_set_digest(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(X.shape).encode())
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.int64).tobytes())
    return h.hexdigest()


@dataclass
class EvalReport:
    """Overall accuracy (%), row-normalized confusion (% per actual class,
    None rows for empty classes), per-class recall, and class counts."""

    accuracy: float
    confusion: list[list[float] | None]
    per_class_recall: dict[str, float | None]
    class_counts: dict[str, int]
    n_samples: int
    test_set_hash: str
    scenario: str | None = None
    model: dict | None = None
    config_hash: str | None = None

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "per_class_recall": self.per_class_recall,
            "class_counts": self.class_counts,
            "n_samples": self.n_samples,
            "test_set_hash": self.test_set_hash,
            "scenario": self.scenario,
            "model": self.model,
            "config_hash": self.config_hash,
            "classes": list(EXPRESSION_KEYS),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            accuracy=obj["accuracy"],
            confusion=obj["confusion"],
            per_class_recall=obj["per_class_recall"],
            class_counts=obj["class_counts"],
            n_samples=obj["n_samples"],
            test_set_hash=obj["test_set_hash"],
            scenario=obj.get("scenario"),
            model=obj.get("model"),
            config_hash=obj.get("config_hash"),
        )


def evaluate(model: Classifier, test: Sequence[Sample], *,
             scenario: str | None = None,
             config_hash: str | None = None) -> EvalReport:
    """Argmax predictions over the test set (ties break toward the lowest
    class code), tallied into accuracy, recalls and a confusion matrix."""
    if not test:
        raise ValueError("test set must be nonempty")
    X, y = samples_to_arrays(test)
    logits = model.forward(X)
    preds = np.argmax(logits, axis=1)

    counts = np.zeros((NUM_EXPRESSIONS, NUM_EXPRESSIONS), dtype=np.int64)
    for actual, pred in zip(y, preds):
        counts[actual, pred] += 1
    row_totals = counts.sum(axis=1)

    confusion: list[list[float] | None] = []
    recalls: dict[str, float | None] = {}
    for i in range(NUM_EXPRESSIONS):
        if row_totals[i] == 0:
            confusion.append(None)
            recalls[EXPRESSION_KEYS[i]] = None
        else:
            row = counts[i] / row_totals[i] * 100.0
            confusion.append([float(v) for v in row])
            recalls[EXPRESSION_KEYS[i]] = float(row[i])

    accuracy = float(np.trace(counts) / len(y) * 100.0)
    return EvalReport(
        accuracy=accuracy,
        confusion=confusion,
        per_class_recall=recalls,
        class_counts={EXPRESSION_KEYS[i]: int(row_totals[i])
                      for i in range(NUM_EXPRESSIONS)},
        n_samples=len(y),
        test_set_hash=test_set_digest(X, y),
        scenario=scenario,
        model=model.describe(),
        config_hash=config_hash,
    )


@dataclass
class ScenarioComparison:
    """Side-by-side accuracies plus per-class recall deltas between the
    noise-modeled and naive mixes."""

    accuracies: dict[str, float]
    recall_delta_noise_vs_naive: dict[str, float | None]
    test_set_hash: str

    def to_json(self) -> dict:
        return {
            "accuracies": self.accuracies,
            "recall_delta_noise_vs_naive": self.recall_delta_noise_vs_naive,
            "test_set_hash": self.test_set_hash,
        }


def compare_scenarios(reports: Sequence[EvalReport]) -> ScenarioComparison:
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    hashes = {r.test_set_hash for r in reports}
    if len(hashes) != 1:
        raise ValueError(f"reports evaluated on different test sets: {hashes}")
    by_scenario = {}
    for r in reports:
        name = r.scenario or f"report{len(by_scenario)}"
        if name in by_scenario:
            raise ValueError(f"duplicate scenario {name!r}")
        by_scenario[name] = r

    deltas: dict[str, float | None] = {}
    noise = by_scenario.get("noisemix")
    naive = by_scenario.get("mix")
    if noise and naive:
        for key in EXPRESSION_KEYS:
            a = noise.per_class_recall.get(key)
            b = naive.per_class_recall.get(key)
            deltas[key] = (a - b) if a is not None and b is not None else None

    return ScenarioComparison(
        accuracies={name: r.accuracy for name, r in by_scenario.items()},
        recall_delta_noise_vs_naive=deltas,
        test_set_hash=hashes.pop(),
    )


def format_report_text(report: EvalReport) -> str:
    lines = [
        f"scenario: {report.scenario or '-'}",
        f"samples:  {report.n_samples}",
        f"accuracy: {report.accuracy:.2f}%",
        "",
        "confusion (% per actual class):",
        "actual\\pred " + " ".join(f"{k[:4]:>6}" for k in EXPRESSION_KEYS),
    ]
    for key, row in zip(EXPRESSION_KEYS, report.confusion):
        if row is None:
            lines.append(f"{key:>11} " + " ".join(f"{'-':>6}" for _ in EXPRESSION_KEYS))
        else:
            lines.append(f"{key:>11} " + " ".join(f"{v:6.2f}" for v in row))
    return "\n".join(lines)


def format_report_csv(report: EvalReport) -> str:
    lines = ["actual," + ",".join(EXPRESSION_KEYS) + ",count,recall"]
    for i, key in enumerate(EXPRESSION_KEYS):
        row = report.confusion[i]
        cells = (["" for _ in EXPRESSION_KEYS] if row is None
                 else [f"{v:.4f}" for v in row])
        recall = report.per_class_recall[key]
        lines.append(",".join([key] + cells
                              + [str(report.class_counts[key]),
                                 "" if recall is None else f"{recall:.4f}"]))
    lines.append(f"overall,,,,,,,,{report.n_samples},{report.accuracy:.4f}")
    return "\n".join(lines) + "\n"
