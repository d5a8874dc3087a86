"""Label-confusion modeling over the 7-way expression space.

The central object is the row-stochastic matrix Q with Q[i][j] =
P(observed noisy label j | true label i), rows and columns in
`ExpressionLabel` code order. From Q and a classifier's class probabilities
we get a posterior over true labels given an observed noisy label, and a
forward-corrected training distribution over noisy labels.

Two orientations matter and are easy to confuse:

* `estimate_from_pairs` learns the true -> noisy channel from dual-labeled
  data; this is the Q used during training.
* `query_noise_matrix` is a noisy-generation channel compiled from published
  per-query annotation shares (queried emotion rows vs annotated category
  columns); the simulator uses it to flip clean labels into noisy ones.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import WildlabelError
from .taxonomy import (
    EXPRESSION_KEYS,
    NUM_EXPRESSIONS,
    AnnotationCategory,
    ExpressionLabel,
)

ROW_SUM_TOL = 1e-9


class InconsistentNoiseModelError(WildlabelError):
    """Raised when a posterior's normalizer underflows to ~0."""


class NoiseMatrix:
    """Immutable 7x7 row-stochastic matrix of label-confusion probabilities."""

    __slots__ = ("_q",)

    def __init__(self, q):
        arr = np.array(q, dtype=np.float64, copy=True)
        if arr.shape != (NUM_EXPRESSIONS, NUM_EXPRESSIONS):
            raise ValueError(f"expected shape (7, 7), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("entries must be finite")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("entries must lie in [0, 1]")
        row_sums = arr.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            raise ValueError(f"rows must sum to 1 +- {ROW_SUM_TOL}, got {row_sums}")
        arr.setflags(write=False)
        self._q = arr

    @property
    def values(self) -> np.ndarray:
        """Read-only (7, 7) view."""
        return self._q

    def __getitem__(self, idx):
        return self._q[idx]

    def __eq__(self, other):
        return isinstance(other, NoiseMatrix) and np.array_equal(self._q, other._q)

    def __repr__(self):
        return f"NoiseMatrix({self._q.tolist()!r})"

    @classmethod
    def identity(cls) -> "NoiseMatrix":
        return cls(np.eye(NUM_EXPRESSIONS))

    def row(self, label: ExpressionLabel) -> np.ndarray:
        return self._q[label.value]


def estimate_from_pairs(
    pairs: Iterable[tuple[ExpressionLabel, ExpressionLabel]],
    smoothing: float = 0.0,
) -> NoiseMatrix:
    """Estimate Q by smoothed counting of (true, noisy) label pairs.

    Q[i][j] = (count(i, j) + a) / (count(i, .) + 7a).
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    counts = np.zeros((NUM_EXPRESSIONS, NUM_EXPRESSIONS), dtype=np.float64)
    n = 0
    for true, noisy in pairs:
        counts[int(true), int(noisy)] += 1.0
        n += 1
    if n == 0:
        raise ValueError("pairs must be nonempty")
    row_totals = counts.sum(axis=1)
    if smoothing == 0.0 and np.any(row_totals == 0.0):
        empty = [EXPRESSION_KEYS[i] for i in np.flatnonzero(row_totals == 0.0)]
        raise ValueError(
            f"no pairs for true class(es) {empty}; use smoothing > 0"
        )
    q = (counts + smoothing) / (row_totals + NUM_EXPRESSIONS * smoothing)[:, None]
    return NoiseMatrix(q)


# Published annotation shares (percent) per queried emotion, measured on a
# 24k double-annotated sample of web images. Rows: queried emotion; columns:
# the category the image was finally annotated as.
QUERY_CONFUSION_ROW_ORDER = (
    ExpressionLabel.HAPPY,
    ExpressionLabel.SAD,
    ExpressionLabel.SURPRISE,
    ExpressionLabel.FEAR,
    ExpressionLabel.DISGUST,
    ExpressionLabel.ANGER,
)
QUERY_CONFUSION_COLUMN_ORDER = (
    AnnotationCategory.HAPPY,
    AnnotationCategory.SAD,
    AnnotationCategory.SURPRISE,
    AnnotationCategory.FEAR,
    AnnotationCategory.DISGUST,
    AnnotationCategory.ANGER,
    AnnotationCategory.NEUTRAL,
    AnnotationCategory.NO_FACE,
    AnnotationCategory.NONE,
    AnnotationCategory.UNCERTAIN,
)
QUERY_CONFUSION_PERCENTAGES = np.array(
    [
        [68.18, 2.66, 1.23, 0.74, 0.33, 1.59, 5.67, 18.54, 0.74, 0.33],
        [16.50, 42.42, 1.52, 1.88, 0.57, 4.73, 16.55, 13.31, 1.57, 0.98],
        [27.60, 6.31, 20.11, 5.62, 1.07, 4.85, 17.10, 14.73, 1.65, 0.96],
        [18.74, 10.91, 6.49, 17.69, 1.47, 6.39, 13.92, 20.49, 2.22, 1.67],
        [26.71, 7.47, 4.48, 4.53, 12.61, 9.62, 17.34, 12.41, 2.99, 1.84],
        [22.28, 7.39, 2.31, 2.11, 1.19, 30.59, 16.21, 14.43, 2.34, 1.14],
    ]
)
QUERY_CONFUSION_PERCENTAGES.setflags(write=False)


def query_noise_matrix() -> NoiseMatrix:
    """The 7x7 flip channel compiled from the published query-confusion table.

    Each queried-emotion row is restricted to the 7 expression columns and
    renormalized; the neutral row (no neutral queries were issued) is the
    identity row.
    """
    q = np.zeros((NUM_EXPRESSIONS, NUM_EXPRESSIONS), dtype=np.float64)
    q[ExpressionLabel.NEUTRAL.value, ExpressionLabel.NEUTRAL.value] = 1.0
    col_for_label = {
        cat.value: col
        for col, cat in enumerate(QUERY_CONFUSION_COLUMN_ORDER)
        if cat.value < NUM_EXPRESSIONS
    }
    for row, emotion in enumerate(QUERY_CONFUSION_ROW_ORDER):
        shares = np.array(
            [
                QUERY_CONFUSION_PERCENTAGES[row, col_for_label[label.value]]
                for label in ExpressionLabel
            ]
        )
        q[emotion.value] = shares / shares.sum()
    return NoiseMatrix(q)


def flip_labels(
    true_labels: Sequence[int] | np.ndarray,
    matrix: NoiseMatrix,
    rng: np.random.Generator,
) -> np.ndarray:
    """Replace each label i by j with probability matrix[i][j], independently."""
    labels = np.asarray(true_labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_EXPRESSIONS):
        raise ValueError("labels must be expression codes 0..6")
    out = np.empty_like(labels)
    u = rng.random(labels.shape)
    cum = np.cumsum(matrix.values, axis=1)
    # searchsorted per row: first column whose cumulative mass exceeds u
    for i in range(NUM_EXPRESSIONS):
        mask = labels == i
        if np.any(mask):
            out[mask] = np.searchsorted(cum[i], u[mask], side="right")
    return np.minimum(out, NUM_EXPRESSIONS - 1)


def _check_distribution(p, tol: float = 1e-6) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (NUM_EXPRESSIONS,):
        raise ValueError(f"expected 7 class probabilities, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(arr.sum() - 1.0) > tol:
        raise ValueError(f"probabilities must sum to 1 +- {tol}")
    return arr


def posterior(p, matrix: NoiseMatrix, noisy: ExpressionLabel | int) -> np.ndarray:
    """Posterior over true labels given classifier probabilities p and an
    observed noisy label j: post[i] = p[i] Q[i][j] / sum_k p[k] Q[k][j]."""
    arr = _check_distribution(p)
    j = int(noisy)
    unnorm = arr * matrix.values[:, j]
    denom = unnorm.sum()
    if denom < 1e-300:
        raise InconsistentNoiseModelError(
            f"inconsistent noise model: zero mass on noisy label {j}"
        )
    return unnorm / denom


def forward_corrected_probs(p, matrix: NoiseMatrix) -> np.ndarray:
    """Noisy-label distribution q[j] = sum_i p[i] Q[i][j].

    Training on a noisy sample scores q against the observed noisy label
    with cross-entropy, so the classifier itself keeps modeling true labels.
    """
    arr = _check_distribution(p)
    return arr @ matrix.values


def update_noise_matrix(
    posteriors: np.ndarray,
    noisy_labels: Sequence[int] | np.ndarray,
    smoothing: float = 0.0,
) -> NoiseMatrix:
    """Refresh Q from per-sample posteriors over true labels.

    Q'[i][j] = (sum over samples with noisy=j of post[i] + a)
             / (sum over all samples of post[i] + 7a).
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    post = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(noisy_labels, dtype=np.int64)
    if post.ndim != 2 or post.shape[1] != NUM_EXPRESSIONS:
        raise ValueError(f"posteriors must be (n, 7), got {post.shape}")
    if len(labels) != len(post):
        raise ValueError("posteriors and noisy_labels must have the same length")
    acc = np.zeros((NUM_EXPRESSIONS, NUM_EXPRESSIONS), dtype=np.float64)
    for j in range(NUM_EXPRESSIONS):
        mask = labels == j
        if np.any(mask):
            acc[:, j] = post[mask].sum(axis=0)
    denom = post.sum(axis=0) + NUM_EXPRESSIONS * smoothing
    if np.any(denom <= 0):
        raise ValueError("a true class has zero posterior mass; use smoothing > 0")
    q = (acc + smoothing) / denom[:, None]
    return NoiseMatrix(q)


def save_matrix(matrix: NoiseMatrix, path: str | Path) -> None:
    """Write Q as text: a comment header naming the class order, then 7 lines
    of 7 decimal fields."""
    lines = [
        "# wildlabel noise matrix: Q[i][j] = P(noisy j | true i)",
        "# classes: " + " ".join(EXPRESSION_KEYS),
    ]
    for row in matrix.values:
        lines.append(" ".join(format(v, ".17g") for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix(path: str | Path) -> NoiseMatrix:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(tok) for tok in line.split()])
    return NoiseMatrix(rows)
