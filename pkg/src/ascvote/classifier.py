"""Per-patch classifiers: a trainable desk-scale reference model plus prediction I/O.

The reference model is deliberately small: patches are mean-pooled onto a g x g
grid, the pooled features are standardized with training-set statistics, and a
single tanh hidden layer feeds a softmax output. It exists to exercise the full
train / predict / transfer / vote pipeline; real convolutional networks plug in
through the prediction file format instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .validation import as_float_array, check_labels, check_probability_rows, check_seed

WEIGHT_INIT_HALF_RANGE = 0.05

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0
    patience: int = 25

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        check_seed(self.seed)


@dataclass
class ReferenceModelParams:
    """Weights, biases and featurization state of the reference model."""

    grid: int
    hidden_width: int
    n_classes: int
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    seed: int = 0

    def __post_init__(self):
        g2 = self.grid * self.grid
        expected = {
            "w_hidden": (g2, self.hidden_width),
            "b_hidden": (self.hidden_width,),
            "w_out": (self.hidden_width, self.n_classes),
            "b_out": (self.n_classes,),
            "feature_mean": (g2,),
            "feature_std": (g2,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if self.grid < 1 or self.hidden_width < 1 or self.n_classes < 2:
            raise ValueError("grid and hidden_width must be positive, n_classes at least 2")

    def copy(self) -> "ReferenceModelParams":
        return ReferenceModelParams(
            grid=self.grid,
            hidden_width=self.hidden_width,
            n_classes=self.n_classes,
            w_hidden=self.w_hidden.copy(),
            b_hidden=self.b_hidden.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
            feature_mean=self.feature_mean.copy(),
            feature_std=self.feature_std.copy(),
            seed=self.seed,
        )


@dataclass
class ModelGradients:
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass(frozen=True)
class TrainResult:
    params: ReferenceModelParams
    loss_history: tuple[float, ...]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pooling_bounds(size: int, grid: int) -> np.ndarray:
    return (np.arange(grid + 1) * size) // grid


def featurize(patches, grid: int, mean: np.ndarray | None = None, std: np.ndarray | None = None) -> np.ndarray:
    """Mean-pool patches onto a g x g grid and flatten to g*g features.

    When training statistics are supplied the features are standardized with
    them; otherwise the raw pooled values come back.
    """
    arr = as_float_array(patches, "patches")
    single = arr.ndim == 2
    if single:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise ValueError("patches must be a 2-d patch or a 3-d stack of patches")
    n, h, w = arr.shape
    if grid < 1 or grid > min(h, w):
        raise ValueError("grid must lie in [1, min(patch dimensions)]")
    rb = pooling_bounds(h, grid)
    cb = pooling_bounds(w, grid)
    feats = np.empty((n, grid * grid), dtype=np.float64)
    for i in range(grid):
        for j in range(grid):
            block = arr[:, rb[i] : rb[i + 1], cb[j] : cb[j + 1]]
            feats[:, i * grid + j] = block.mean(axis=(1, 2))
    if mean is not None:
        safe_std = np.where(np.asarray(std) < 1e-12, 1.0, np.asarray(std))
        feats = (feats - np.asarray(mean)) / safe_std
    return feats[0] if single else feats


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    return mean, std


def init_params(
    grid: int,
    hidden_width: int,
    n_classes: int,
    seed: int,
    feature_mean: np.ndarray | None = None,
    feature_std: np.ndarray | None = None,
) -> ReferenceModelParams:
    """Fresh parameters: uniform(-0.05, 0.05) weights, zero biases."""
    rng = np.random.default_rng(check_seed(seed))
    g2 = grid * grid
    return ReferenceModelParams(
        grid=grid,
        hidden_width=hidden_width,
        n_classes=n_classes,
        w_hidden=rng.uniform(-WEIGHT_INIT_HALF_RANGE, WEIGHT_INIT_HALF_RANGE, (g2, hidden_width)),
        b_hidden=np.zeros(hidden_width),
        w_out=rng.uniform(-WEIGHT_INIT_HALF_RANGE, WEIGHT_INIT_HALF_RANGE, (hidden_width, n_classes)),
        b_out=np.zeros(n_classes),
        feature_mean=feature_mean if feature_mean is not None else np.zeros(g2),
        feature_std=feature_std if feature_std is not None else np.ones(g2),
        seed=seed,
    )


def _forward(params: ReferenceModelParams, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(feats @ params.w_hidden + params.b_hidden)
    logits = hidden @ params.w_out + params.b_out
    return hidden, logits


def hidden_activations(params: ReferenceModelParams, patches) -> np.ndarray:
    feats = featurize(patches, params.grid, params.feature_mean, params.feature_std)
    if feats.ndim == 1:
        feats = feats[None, :]
    return np.tanh(feats @ params.w_hidden + params.b_hidden)


def predict(params: ReferenceModelParams, patches) -> np.ndarray:
    """Class probabilities for one patch (1-d result) or a stack (2-d result)."""
    feats = featurize(patches, params.grid, params.feature_mean, params.feature_std)
    single = feats.ndim == 1
    if single:
        feats = feats[None, :]
    _, logits = _forward(params, feats)
    probs = softmax(logits)
    return probs[0] if single else probs


def cross_entropy_loss(params: ReferenceModelParams, patches, labels) -> float:
    """Mean cross-entropy of the model on a batch."""
    y = check_labels(labels, params.n_classes)
    feats = featurize(patches, params.grid, params.feature_mean, params.feature_std)
    if feats.ndim == 1:
        feats = feats[None, :]
    _, logits = _forward(params, feats)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(y.size), y].mean())


def gradient(params: ReferenceModelParams, patches, labels) -> ModelGradients:
    """Analytic gradient of the mean cross-entropy over the batch."""
    y = check_labels(labels, params.n_classes)
    if y.size == 0:
        raise ValueError("batch must be non-empty")
    feats = featurize(patches, params.grid, params.feature_mean, params.feature_std)
    if feats.ndim == 1:
        feats = feats[None, :]
    return _gradient_from_features(params, feats, y)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ReferenceModelParams,
    grads: ModelGradients,
    state: AdamState,
    learning_rate: float,
) -> None:
    """One Adam update, applied in place to the parameter arrays."""
    state.t += 1
    t = state.t
    for name in ("w_hidden", "b_hidden", "w_out", "b_out"):
        g = getattr(grads, name)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        getattr(params, name)[...] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)


def train(
    patches,
    labels,
    n_classes: int,
    cfg: TrainConfig,
    init: ReferenceModelParams | None = None,
    *,
    grid: int = 4,
    hidden_width: int = 64,
) -> TrainResult:
    """Minibatch cross-entropy training with Adam.

    Returns the parameters with the lowest full-set loss seen, together with
    the per-epoch loss history (initial loss first). Training stops early once
    the loss has not improved for ``cfg.patience`` epochs. With an ``init`` the
    architecture and featurization statistics are taken from it, which is what
    the super-classifier transfer relies on; otherwise fresh statistics are
    computed from the training set.
    """
    y = check_labels(labels, n_classes)
    if y.size == 0:
        raise ValueError("training set is empty")
    present = np.unique(y)
    if present.size != n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ValueError(f"every class needs at least one example; missing {missing}")

    if init is not None:
        if init.n_classes != n_classes:
            raise ValueError("init class count does not match the task")
        params = init.copy()
        feats = featurize(patches, params.grid, params.feature_mean, params.feature_std)
    else:
        raw = featurize(patches, grid)
        if raw.ndim == 1:
            raw = raw[None, :]
        mean, std = feature_statistics(raw)
        params = init_params(grid, hidden_width, n_classes, cfg.seed, mean, std)
        safe_std = np.where(std < 1e-12, 1.0, std)
        feats = (raw - mean) / safe_std
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[0] != y.size:
        raise ValueError("patches and labels disagree in length")

    def full_loss(p: ReferenceModelParams) -> float:
        # divergence shows up as inf/nan here and is reported below, not warned
        with np.errstate(over="ignore", invalid="ignore"):
            _, logits = _forward(p, feats)
            z = logits - logits.max(axis=1, keepdims=True)
            log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return float(-log_probs[np.arange(y.size), y].mean())

    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    best_loss = full_loss(params)
    best_params = params.copy()
    history = [best_loss]
    stall = 0
    n = y.size
    batch = min(cfg.batch_size, n)
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            take = order[lo : lo + batch]
            grads = _gradient_from_features(params, feats[take], y[take])
            adam_step(params, grads, state, cfg.learning_rate)
        loss = full_loss(params)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"training diverged (loss={loss}); lower the learning rate "
                f"(currently {cfg.learning_rate:g})"
            )
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = params.copy()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    return TrainResult(params=best_params, loss_history=tuple(history))


def _gradient_from_features(params: ReferenceModelParams, feats: np.ndarray, y: np.ndarray) -> ModelGradients:
    hidden, logits = _forward(params, feats)
    probs = softmax(logits)
    d_logits = probs.copy()
    d_logits[np.arange(y.size), y] -= 1.0
    d_logits /= y.size
    d_hidden = (d_logits @ params.w_out.T) * (1.0 - hidden**2)
    return ModelGradients(
        w_hidden=feats.T @ d_hidden,
        b_hidden=d_hidden.sum(axis=0),
        w_out=hidden.T @ d_logits,
        b_out=d_logits.sum(axis=0),
    )


def init_super_from_base(
    base: ReferenceModelParams, n_super_classes: int, seed: int
) -> ReferenceModelParams:
    """Transfer initialization for a super classifier.

    The hidden layer and featurization statistics are copied verbatim from the
    base model; only the output layer is re-initialized, sized for the category
    members plus the negative class.
    """
    if n_super_classes < 2:
        raise ValueError("a super task needs at least 2 classes")
    rng = np.random.default_rng(check_seed(seed))
    return ReferenceModelParams(
        grid=base.grid,
        hidden_width=base.hidden_width,
        n_classes=n_super_classes,
        w_hidden=base.w_hidden.copy(),
        b_hidden=base.b_hidden.copy(),
        w_out=rng.uniform(
            -WEIGHT_INIT_HALF_RANGE, WEIGHT_INIT_HALF_RANGE, (base.hidden_width, n_super_classes)
        ),
        b_out=np.zeros(n_super_classes),
        feature_mean=base.feature_mean.copy(),
        feature_std=base.feature_std.copy(),
        seed=seed,
    )


def save_model(params: ReferenceModelParams, path) -> None:
    """Model checkpoint with explicit shapes and the init-seed provenance."""
    np.savez(
        path,
        grid=params.grid,
        hidden_width=params.hidden_width,
        n_classes=params.n_classes,
        w_hidden=params.w_hidden,
        b_hidden=params.b_hidden,
        w_out=params.w_out,
        b_out=params.b_out,
        feature_mean=params.feature_mean,
        feature_std=params.feature_std,
        seed=params.seed,
    )


def load_model(path) -> ReferenceModelParams:
    with np.load(path) as data:
        return ReferenceModelParams(
            grid=int(data["grid"]),
            hidden_width=int(data["hidden_width"]),
            n_classes=int(data["n_classes"]),
            w_hidden=data["w_hidden"],
            b_hidden=data["b_hidden"],
            w_out=data["w_out"],
            b_out=data["b_out"],
            feature_mean=data["feature_mean"],
            feature_std=data["feature_std"],
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-patch class probabilities, keyed by (segment_id, channel, patch_index)."""

    keys: tuple[tuple[str, int, int], ...]
    probs: np.ndarray

    def __post_init__(self):
        check_probability_rows(self.probs, "probs")
        if len(self.keys) != self.probs.shape[0]:
            raise ValueError("keys and probability rows disagree in length")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("patch keys must be unique")

    @property
    def n_rows(self) -> int:
        return len(self.keys)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def segment_order(self) -> list[str]:
        seen: dict[str, None] = {}
        for seg, _, _ in self.keys:
            seen.setdefault(seg)
        return list(seen)

    def segment_rows(self) -> dict[str, np.ndarray]:
        """Row indices per segment, sorted by (channel, patch_index)."""
        grouped: dict[str, list[int]] = {}
        for i, (seg, _, _) in enumerate(self.keys):
            grouped.setdefault(seg, []).append(i)
        return {
            seg: np.array(sorted(rows, key=lambda i: self.keys[i][1:]), dtype=np.int64)
            for seg, rows in grouped.items()
        }


def export_predictions(matrix: PredictionMatrix, path) -> None:
    """Write the prediction exchange file: segment_id, channel, patch_index, p_0..p_{C-1}."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["segment_id", "channel", "patch_index"] + [f"p_{i}" for i in range(matrix.n_classes)]
        )
        for key, row in zip(matrix.keys, matrix.probs):
            writer.writerow([key[0], key[1], key[2]] + [repr(float(v)) for v in row])


def import_predictions(
    path,
    n_classes: int | None = None,
    expected_keys=None,
) -> PredictionMatrix:
    """Read and validate a prediction file.

    Rows whose probabilities sum outside 1 +/- 1e-6 are rejected with their
    line number; rows inside that tolerance but not exact are renormalised.
    ``expected_keys`` (any iterable of (segment_id, channel, patch_index))
    makes missing patches an error.
    """
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty prediction file")
    header = [c.strip() for c in rows[0]]
    if header[:3] != ["segment_id", "channel", "patch_index"] or len(header) < 5:
        raise ValueError(f"{path}: header must be segment_id,channel,patch_index,p_0,...")
    file_classes = len(header) - 3
    if n_classes is not None and file_classes != n_classes:
        raise ValueError(f"{path}: expected {n_classes} classes, file has {file_classes}")

    keys: list[tuple[str, int, int]] = []
    probs = np.empty((len(rows) - 1, file_classes), dtype=np.float64)
    seen: set[tuple[str, int, int]] = set()
    count = 0
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns")
        try:
            key = (row[0].strip(), int(row[1]), int(row[2]))
            values = np.array([float(v) for v in row[3:]], dtype=np.float64)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed row") from None
        if key in seen:
            raise ValueError(f"{path}:{lineno}: duplicate patch key {key}")
        seen.add(key)
        if values.min() < 0.0:
            raise ValueError(f"{path}:{lineno}: negative probability")
        total = float(values.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"{path}:{lineno}: probabilities sum to {total:.8f}, not 1")
        if abs(total - 1.0) > 1e-9:
            values = values / total
        keys.append(key)
        probs[count] = values
        count += 1
    probs = probs[:count]
    if expected_keys is not None:
        missing = sorted(set(expected_keys) - seen)
        if missing:
            raise ValueError(f"{path}: missing predictions for {len(missing)} patches, first {missing[0]}")
    return PredictionMatrix(keys=tuple(keys), probs=probs)


class PatchClassifier(BaseEstimator, ClassifierMixin):
    """Sklearn-style wrapper around the reference model.

    ``fit`` takes a stack of patches with integer labels; ``predict_proba``
    returns softmax probabilities; ``predict`` returns the argmax class with
    ties going to the lowest index.
    """

    def __init__(
        self,
        grid: int = 4,
        hidden_width: int = 64,
        learning_rate: float = 1e-4,
        batch_size: int = 32,
        max_epochs: int = 200,
        patience: int = 25,
        random_state: int = 0,
        n_classes: int | None = None,
        init_params: ReferenceModelParams | None = None,
    ):
        self.grid = grid
        self.hidden_width = hidden_width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state
        self.n_classes = n_classes
        self.init_params = init_params

    def fit(self, X, y):
        y = np.asarray(y)
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.random_state,
            patience=self.patience,
        )
        result = train(
            X,
            y,
            n_classes,
            cfg,
            init=self.init_params,
            grid=self.grid,
            hidden_width=self.hidden_width,
        )
        self.params_ = result.params
        self.loss_curve_ = result.loss_history
        self.classes_ = np.arange(n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this PatchClassifier is not fitted yet; call fit first")

    def predict_proba(self, X):
        self._check_fitted()
        probs = predict(self.params_, X)
        return probs[None, :] if probs.ndim == 1 else probs

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
