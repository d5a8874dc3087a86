"""Reference classifiers and the three training regimes over noisy labels.

Scenarios:

* clean only: random init, SGD on expert-labeled data.
* naive mix: pretrain on clean, then train on clean+noisy with noisy labels
  taken at face value.
* noise-modeled mix: pretrain on clean, bootstrap-upsample clean to half the
  noisy count, then train the mixture scoring noisy samples through the
  confusion matrix (forward correction).

Training is plain minibatch SGD (no momentum), learning rate divided by 10
every `lr_drop_every` iterations, stopping when the trailing-window mean loss
stops improving or at `max_iterations`. Everything is deterministic under
`TrainConfig.seed`; batch math goes through numpy reductions with fixed
operand shapes and order, so any internal BLAS parallelism keeps the
reduction order (and therefore the trajectory) stable on a given platform.
"""

from __future__ import annotations

import abc
import hashlib
import json
import math
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import WildlabelError
from .noisemodel import NoiseMatrix
from .seeds import derive_seed
from .taxonomy import NUM_EXPRESSIONS, ExpressionLabel


class SampleSource(Enum):
    CLEAN = "clean"
    NOISY = "noisy"


@dataclass(frozen=True)
class Sample:
    """One training sample: a flat feature vector plus a 7-way label."""

    features: np.ndarray
    label: ExpressionLabel
    source: SampleSource = SampleSource.CLEAN


class ScenarioKind(Enum):
    CLEAN_ONLY = "clean"
    NAIVE_MIX = "mix"
    NOISE_MODELED_MIX = "noisemix"


@dataclass
class TrainConfig:
    batch_size: int = 256
    initial_lr: float = 0.001
    lr_drop_every: int = 10_000
    max_iterations: int = 40_000
    seed: int = 0
    convergence_window: int = 500
    convergence_tol: float = 1e-4
    scenario: ScenarioKind | None = None
    em_refresh_epochs: int | None = None
    em_smoothing: float = 1.0

    def __post_init__(self):
        for name in ("batch_size", "initial_lr", "lr_drop_every", "max_iterations",
                     "convergence_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.em_refresh_epochs is not None and self.em_refresh_epochs <= 0:
            raise ValueError("em_refresh_epochs must be positive or None")

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "initial_lr": self.initial_lr,
            "lr_drop_every": self.lr_drop_every,
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "convergence_window": self.convergence_window,
            "convergence_tol": self.convergence_tol,
            "scenario": self.scenario.value if self.scenario else None,
            "em_refresh_epochs": self.em_refresh_epochs,
            "em_smoothing": self.em_smoothing,
        }


# `paper` keeps the published optimizer constants; `desk` is sized for
# minute-scale runs on one core.
_PRESETS = {
    "paper": dict(batch_size=256, initial_lr=0.001, lr_drop_every=10_000,
                  max_iterations=40_000),
    "desk": dict(batch_size=64, initial_lr=0.05, lr_drop_every=1_000,
                 max_iterations=3_000),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[name])
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """initial_lr / 10^floor(iteration / lr_drop_every)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.initial_lr * 10.0 ** (-(iteration // config.lr_drop_every))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Classifier(abc.ABC):
    """7-way classifier with explicit analytic gradients.

    `loss_and_gradient` scores softmax outputs against per-sample target
    distributions with cross-entropy; the forward-corrected loss composes
    with a NoiseMatrix via `corrected_loss_and_gradient` below.
    """

    n_classes = NUM_EXPRESSIONS

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    @abc.abstractmethod
    def forward(self, X: np.ndarray) -> np.ndarray:
        """Logits of shape (n, 7)."""

    @abc.abstractmethod
    def backward(self, X: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given the upstream gradient on the logits."""

    @abc.abstractmethod
    def describe(self) -> dict:
        """JSON-serializable architecture description for checkpoints."""

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.forward(np.asarray(X, dtype=np.float64)))

    def loss_and_gradient(self, X, targets):
        """Mean cross-entropy against target distributions, plus gradients."""
        X = np.asarray(X, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        p = softmax(self.forward(X))
        loss = float(-np.mean(
            np.sum(targets * np.log(np.maximum(p, 1e-300)), axis=1)))
        dlogits = (p - targets) / len(X)
        return loss, self.backward(X, dlogits)

    def apply_gradients(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            self.params[name] -= lr * g

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.params])

    def set_params_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for name, value in self.params.items():
            size = value.size
            self.params[name] = vec[offset:offset + size].reshape(value.shape).copy()
            offset += size
        if offset != vec.size:
            raise ValueError(f"expected {offset} parameters, got {vec.size}")


class AffineSoftmax(Classifier):
    """Single affine layer followed by softmax."""

    def __init__(self, feature_dim: int, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        rng = np.random.default_rng(seed)
        self.params = {
            "W": _glorot(rng, feature_dim, self.n_classes),
            "b": np.zeros(self.n_classes),
        }

    def forward(self, X):
        return X @ self.params["W"] + self.params["b"]

    def backward(self, X, dlogits):
        return {"W": X.T @ dlogits, "b": dlogits.sum(axis=0)}

    def describe(self):
        return {"kind": "affine", "feature_dim": self.feature_dim}


class ReluNet(Classifier):
    """One rectified hidden layer of configurable width, then affine-softmax."""

    def __init__(self, feature_dim: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        if hidden <= 0:
            raise ValueError("hidden width must be positive")
        self.feature_dim = feature_dim
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        self.params = {
            "W1": _glorot(rng, feature_dim, hidden),
            "b1": np.zeros(hidden),
            "W2": _glorot(rng, hidden, self.n_classes),
            "b2": np.zeros(self.n_classes),
        }

    def _hidden(self, X):
        z1 = X @ self.params["W1"] + self.params["b1"]
        return z1, np.maximum(z1, 0.0)

    def forward(self, X):
        _, h = self._hidden(X)
        return h @ self.params["W2"] + self.params["b2"]

    def backward(self, X, dlogits):
        z1, h = self._hidden(X)
        dh = dlogits @ self.params["W2"].T
        dz1 = dh * (z1 > 0.0)
        return {
            "W1": X.T @ dz1,
            "b1": dz1.sum(axis=0),
            "W2": h.T @ dlogits,
            "b2": dlogits.sum(axis=0),
        }

    def describe(self):
        return {"kind": "relunet", "feature_dim": self.feature_dim,
                "hidden": self.hidden}


def build_model(kind: str, feature_dim: int, hidden: int = 32, seed: int = 0) -> Classifier:
    if kind == "affine":
        return AffineSoftmax(feature_dim, seed=seed)
    if kind == "relunet":
        return ReluNet(feature_dim, hidden=hidden, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def one_hot(labels: np.ndarray, n_classes: int = NUM_EXPRESSIONS) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def corrected_loss_and_gradient(model: Classifier, X, noisy_labels, matrix: NoiseMatrix):
    """Forward-corrected loss on noisy samples: cross-entropy of p @ Q against
    the observed noisy label. The logit gradient works out to p minus the
    posterior over true labels."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(noisy_labels, dtype=np.int64)
    loss, dlogits = _per_sample_grads(model, X, y,
                                      clean_mask=np.zeros(len(X), dtype=bool),
                                      matrix=matrix)
    return loss, model.backward(X, dlogits)


def _per_sample_grads(model, X, labels, clean_mask, matrix):
    """Shared batch loss: one-hot cross-entropy on clean rows, forward
    correction on noisy rows (or everywhere one-hot when matrix is None).
    Returns (mean loss, dlogits already divided by the batch size)."""
    n = len(X)
    p = softmax(model.forward(X))
    losses = np.empty(n)
    dlogits = p.copy()
    if matrix is None:
        ci = np.arange(n)
        ni = np.array([], dtype=np.int64)
    else:
        ci = np.flatnonzero(clean_mask)
        ni = np.flatnonzero(~clean_mask)
    if ci.size:
        py = p[ci, labels[ci]]
        losses[ci] = -np.log(np.maximum(py, 1e-300))
        dlogits[ci, labels[ci]] -= 1.0
    if ni.size:
        q = matrix.values
        pn = p[ni]
        yn = labels[ni]
        qy = (pn @ q)[np.arange(ni.size), yn]
        qy_safe = np.maximum(qy, 1e-300)
        losses[ni] = -np.log(qy_safe)
        post = pn * q[:, yn].T / qy_safe[:, None]
        dlogits[ni] = pn - post
    return float(losses.mean()), dlogits / n


class TrainingDivergedError(WildlabelError):
    """Loss became non-finite; carries a diagnostic parameter snapshot."""

    def __init__(self, phase: str, iteration: int, loss: float, model: Classifier):
        super().__init__(
            f"training diverged in phase {phase!r} at iteration {iteration}: "
            f"loss={loss}")
        self.phase = phase
        self.iteration = iteration
        self.loss = loss
        self.model_state = {k: v.copy() for k, v in model.params.items()}
        self.model_desc = model.describe()


@dataclass(frozen=True)
class HistoryEntry:
    phase: str
    iteration: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: Classifier
    history: list[HistoryEntry]
    scenario: ScenarioKind
    q_final: NoiseMatrix | None = None
    em_refreshes: int = 0

    def phase_losses(self, phase: str) -> list[float]:
        return [h.loss for h in self.history if h.phase == phase]


def samples_to_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ValueError("empty sample list")
    dims = {s.features.shape for s in samples}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature shapes: {dims}")
    X = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    y = np.array([int(s.label) for s in samples], dtype=np.int64)
    return X, y


def stratified_split(
    samples: Sequence[Sample], test_fraction: float, seed: int
) -> tuple[list[Sample], list[Sample]]:
    """Per-label random split; each label contributes floor(fraction * n)
    samples to the test side. Disjoint, exhaustive, deterministic under seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for label in ExpressionLabel:
        idxs = [i for i, s in enumerate(samples) if s.label == label]
        k = int(math.floor(test_fraction * len(idxs)))
        if idxs and k:
            perm = rng.permutation(len(idxs))
            test_idx.update(idxs[j] for j in perm[:k])
        elif idxs:
            rng.permutation(len(idxs))  # keep the stream position label-stable
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


def upsample_clean(
    clean: Sequence[Sample], noisy_count: int, seed: int
) -> list[Sample]:
    """Bootstrap the clean set up to half the noisy count.

    Every original sample is kept at least once; the remainder is drawn with
    replacement. Returns the clean list unchanged when it is already large
    enough."""
    if not clean:
        raise ValueError("clean set must be nonempty")
    target = max(len(clean), noisy_count // 2)
    if len(clean) >= target:
        return list(clean)
    rng = np.random.default_rng(seed)
    extras = rng.integers(0, len(clean), size=target - len(clean))
    return list(clean) + [clean[i] for i in extras]


def _run_phase(model, X, y, clean_mask, matrix, phase, config, history,
               noisy_slice=None):
    rng = np.random.default_rng(derive_seed(config.seed, f"batches-{phase}"))
    n = len(X)
    window = config.convergence_window
    prev_mean = None
    window_losses: list[float] = []
    current_q = matrix
    refreshes = 0
    iters_per_epoch = max(1, math.ceil(n / config.batch_size))
    for it in range(config.max_iterations):
        lr = lr_at(it, config)
        idx = rng.integers(0, n, size=config.batch_size)
        loss, dlogits = _per_sample_grads(
            model, X[idx], y[idx], clean_mask[idx], current_q)
        if not np.isfinite(loss):
            raise TrainingDivergedError(phase, it, loss, model)
        model.apply_gradients(model.backward(X[idx], dlogits), lr)
        history.append(HistoryEntry(phase, it, loss, lr))
        window_losses.append(loss)
        if len(window_losses) == window:
            cur_mean = float(np.mean(window_losses))
            window_losses = []
            if prev_mean is not None:
                improvement = (prev_mean - cur_mean) / max(abs(prev_mean), 1e-12)
                if improvement < config.convergence_tol:
                    break
            prev_mean = cur_mean
        if (current_q is not None and config.em_refresh_epochs
                and noisy_slice is not None
                and (it + 1) % (config.em_refresh_epochs * iters_per_epoch) == 0):
            from .noisemodel import update_noise_matrix

            posts = _posteriors_for(model, X[noisy_slice], y[noisy_slice], current_q)
            current_q = update_noise_matrix(posts, y[noisy_slice],
                                            smoothing=config.em_smoothing)
            refreshes += 1
    return current_q, refreshes


def _posteriors_for(model, X, noisy_labels, matrix, batch: int = 4096):
    out = np.empty((len(X), NUM_EXPRESSIONS))
    q = matrix.values
    for start in range(0, len(X), batch):
        p = model.predict_proba(X[start:start + batch])
        yb = noisy_labels[start:start + batch]
        unnorm = p * q[:, yb].T
        out[start:start + batch] = unnorm / np.maximum(
            unnorm.sum(axis=1, keepdims=True), 1e-300)
    return out


def train(
    scenario: ScenarioKind,
    clean_train: Sequence[Sample],
    noisy_train: Sequence[Sample] | None,
    q: NoiseMatrix | None,
    model: Classifier,
    config: TrainConfig,
) -> TrainResult:
    """Run one training scenario. Mix scenarios pretrain on the clean set
    first; the noise-modeled mix upsamples clean to half the noisy count
    (seeded from config.seed via the "upsample" label) before both phases."""
    if config.scenario is not None and config.scenario != scenario:
        raise ValueError(
            f"config.scenario={config.scenario} conflicts with {scenario}")
    if scenario is ScenarioKind.NOISE_MODELED_MIX and q is None:
        raise ValueError("noise-modeled mix requires a NoiseMatrix")
    needs_noisy = scenario is not ScenarioKind.CLEAN_ONLY
    if needs_noisy and not noisy_train:
        raise ValueError(f"{scenario.value} requires a noisy training set")

    history: list[HistoryEntry] = []
    q_final = q
    refreshes = 0

    if scenario is ScenarioKind.CLEAN_ONLY:
        Xc, yc = samples_to_arrays(clean_train)
        _run_phase(model, Xc, yc, np.ones(len(Xc), dtype=bool), None,
                   "train", config, history)
        return TrainResult(model, history, scenario)

    if scenario is ScenarioKind.NOISE_MODELED_MIX:
        clean_used = upsample_clean(clean_train, len(noisy_train),
                                    derive_seed(config.seed, "upsample"))
    else:
        clean_used = list(clean_train)

    Xc, yc = samples_to_arrays(clean_used)
    _run_phase(model, Xc, yc, np.ones(len(Xc), dtype=bool), None,
               "pretrain", config, history)

    Xn, yn = samples_to_arrays(noisy_train)
    X = np.vstack([Xc, Xn])
    y = np.concatenate([yc, yn])
    clean_mask = np.concatenate(
        [np.ones(len(Xc), dtype=bool), np.zeros(len(Xn), dtype=bool)])
    matrix = q if scenario is ScenarioKind.NOISE_MODELED_MIX else None
    noisy_slice = slice(len(Xc), len(X))
    q_final, refreshes = _run_phase(
        model, X, y, clean_mask, matrix, "train", config, history,
        noisy_slice=noisy_slice if matrix is not None else None)
    return TrainResult(model, history, scenario,
                       q_final=q_final, em_refreshes=refreshes)


def config_hash(config: TrainConfig, scenario: ScenarioKind, model_desc: dict) -> str:
    payload = json.dumps(
        {"config": config.to_json(), "scenario": scenario.value,
         "model": model_desc},
        sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(model: Classifier, path: str | Path, *,
                    scenario: ScenarioKind | None = None,
                    config: TrainConfig | None = None,
                    features: dict | None = None) -> None:
    obj = {
        "model": model.describe(),
        "params": {k: v.tolist() for k, v in model.params.items()},
        "scenario": scenario.value if scenario else None,
        "config_hash": (config_hash(config, scenario, model.describe())
                        if config and scenario else None),
        "features": features,  # crop parameters, so eval can mirror them
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[Classifier, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    desc = obj["model"]
    model = build_model(desc["kind"], desc["feature_dim"],
                        hidden=desc.get("hidden", 32))
    for name, value in obj["params"].items():
        model.params[name] = np.array(value, dtype=np.float64)
    return model, obj


# -- catalog bridge ----------------------------------------------------------

def assign_splits(catalog, test_fraction: float, seed: int) -> tuple[int, int]:
    """Persist a per-label train/test split over resolved records.

    Each resolved expression label contributes floor(fraction * n) records
    to the test side, chosen by a seeded permutation over catalog order.
    Re-running with the same seed rewrites nothing."""
    from .catalog import Split
    from .taxonomy import to_expression

    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    by_label: dict[int, list[str]] = {}
    for record in catalog.records():
        if record.resolved is None:
            continue
        label = to_expression(record.resolved.category)
        if label is None:
            continue
        by_label.setdefault(label.value, []).append(record.image_id)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    n_train = n_test = 0
    for label_value in sorted(by_label):
        ids = by_label[label_value]
        k = int(math.floor(test_fraction * len(ids)))
        perm = rng.permutation(len(ids))
        test_ids = {ids[i] for i in perm[:k]}
        for image_id in ids:
            split = Split.TEST if image_id in test_ids else Split.TRAIN
            catalog.set_split(image_id, split)
            if split is Split.TEST:
                n_test += 1
            else:
                n_train += 1
    return n_train, n_test


@dataclass
class CatalogDatasets:
    clean_train: list[Sample]
    clean_test: list[Sample]
    noisy: list[Sample]


def load_samples_from_catalog(catalog, crop_size: int = 32,
                              margin: float = 0.25,
                              grayscale: bool = True) -> CatalogDatasets:
    """Build flat pixel samples from a workspace catalog.

    Clean samples come from resolved records (one sample per landmarked
    face), labeled by the resolved expression and separated by split tag.
    Noisy samples are gate-kept, never-annotated records labeled by their
    intended query emotion."""
    from .catalog import Split
    from .facegate import register_crop
    from .taxonomy import to_expression

    clean_train: list[Sample] = []
    clean_test: list[Sample] = []
    noisy: list[Sample] = []
    for record in catalog.records():
        if not record.gate_kept:
            continue
        faces = [f for f in record.faces if f.landmarks is not None]
        if not faces:
            continue
        data = catalog.blob_bytes(record.image_id)
        if record.resolved is not None:
            label = to_expression(record.resolved.category)
            if label is None:
                continue
            source = SampleSource.CLEAN
            sink = clean_test if record.split is Split.TEST else clean_train
        elif not record.annotations:
            label = record.primary_intended_emotion()
            if label is None:
                continue
            source = SampleSource.NOISY
            sink = noisy
        else:
            continue  # partially annotated, not usable either way
        for face in faces:
            features = register_crop(data, face, crop_size, margin=margin,
                                     grayscale=grayscale).ravel()
            sink.append(Sample(features, label, source))
    return CatalogDatasets(clean_train, clean_test, noisy)
