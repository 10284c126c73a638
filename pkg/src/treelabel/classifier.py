"""Per-node classifier: multinomial softmax over feature vectors.

The interface (train / predict / evaluate on feature vectors) is the plug
point for heavier backends; this reference implementation is a linear model
trained by mini-batch gradient descent with early stopping on validation
macro-F1, deterministic in its seed.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import features as feat

MODEL_MAGIC = b"TLM1"


class ClassifierError(ValueError):
    pass


class SaliencyUnavailableError(ClassifierError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 200
    patience: int = 5
    seed: int = 0
    batch_size: int = 32


@dataclass
class Metrics:
    per_class_f1: dict[str, float]
    macro_f1: float
    confusion: np.ndarray  # rows = true class, cols = predicted

    def to_json(self) -> dict:
        return {
            "per_class_f1": {k: float(v) for k, v in self.per_class_f1.items()},
            "macro_f1": float(self.macro_f1),
            "confusion": self.confusion.tolist(),
        }


@dataclass
class Model:
    node: str
    classes: list[str]  # taxonomy child order, fixed across versions
    weights: np.ndarray  # C x D
    bias: np.ndarray  # C
    version: int = 1
    trained_on: int = 0
    feature_source: str = feat.BUILTIN
    metrics: Metrics | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def loss_and_grad(W, b, X, y):
    """Mean cross-entropy of the softmax model and its analytic gradient."""
    n = X.shape[0]
    logits = X @ W.T + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    loss = -log_p[np.arange(n), y].mean()
    G = np.exp(log_p)
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, G.T @ X, G.sum(axis=0)


def predict(model: Model, X: np.ndarray) -> np.ndarray:
    """Probability vectors over the model's classes; rows sum to 1."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ClassifierError(
            f"feature dimension {X.shape[1]} does not match model dimension {model.dim}"
        )
    return softmax(X @ model.weights.T + model.bias)


def evaluate(model: Model, X: np.ndarray, y: np.ndarray) -> Metrics:
    """Per-class F1 (0 when precision+recall is 0), unweighted macro, confusion."""
    if len(y) == 0:
        raise ClassifierError("cannot evaluate on an empty set")
    pred = predict(model, X).argmax(axis=1)
    c = model.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for truth, guess in zip(y, pred):
        confusion[truth, guess] += 1
    per_class = {}
    for k, name in enumerate(model.classes):
        tp = confusion[k, k]
        fp = confusion[:, k].sum() - tp
        fn = confusion[k, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class[name] = (
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    macro = float(np.mean(list(per_class.values())))
    return Metrics(per_class_f1=per_class, macro_f1=macro, confusion=confusion)


def _macro_f1(model_like_W, b, classes, X, y) -> float:
    stub = Model(node="", classes=list(classes), weights=model_like_W, bias=b)
    return evaluate(stub, X, y).macro_f1


def train(
    node: str,
    classes: list[str],
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    config: TrainConfig | None = None,
    version: int = 1,
    feature_source: str = feat.BUILTIN,
) -> Model:
    """Fit softmax weights; early-stop on validation macro-F1, keep the best.

    Refuses to train when a class has no training samples or the validation
    pool is empty.
    """
    config = config or TrainConfig()
    if len(classes) < 2:
        raise ClassifierError(f"node {node!r} needs at least 2 classes")
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if X_train.shape[0] == 0:
        raise ClassifierError("empty training pool")
    if len(X_val) == 0:
        raise ClassifierError("empty validation pool")
    counts = np.bincount(y_train, minlength=len(classes))
    for k, count in enumerate(counts):
        if count == 0:
            raise ClassifierError(
                f"class {classes[k]!r} has no training samples; training refused"
            )

    d = X_train.shape[1]
    c = len(classes)
    W = np.zeros((c, d))
    b = np.zeros(c)
    rng = np.random.default_rng(config.seed)

    best = (-1.0, W.copy(), b.copy())
    stale = 0
    n = X_train.shape[0]
    for _epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            _, gW, gb = loss_and_grad(W, b, X_train[batch], y_train[batch])
            W -= config.learning_rate * gW
            b -= config.learning_rate * gb
        score = _macro_f1(W, b, classes, X_val, y_val)
        if score > best[0]:
            best = (score, W.copy(), b.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    _, W, b = best
    return Model(
        node=node,
        classes=list(classes),
        weights=W,
        bias=b,
        version=version,
        trained_on=n,
        feature_source=feature_source,
    )


# -- saliency ----------------------------------------------------------------

def saliency(model: Model, image_bytes: bytes, class_id: str) -> np.ndarray:
    """Heatmap in [0,1] of each pixel's linear contribution to `class_id`.

    Only defined for models trained on the built-in extractor: the 64
    spatial features back-project onto their 8x8 cells; histogram features
    have no location and spread uniformly (a constant the min-max
    normalization cancels unless everything ties).
    """
    if model.feature_source != feat.BUILTIN:
        raise SaliencyUnavailableError(
            "saliency requires a model trained on built-in extractor features"
        )
    if class_id not in model.classes:
        raise ClassifierError(f"unknown class {class_id!r} for node {model.node!r}")
    vec = feat.extract(image_bytes).astype(np.float64)
    with Image.open(io.BytesIO(image_bytes)) as img:
        w_px, h_px = img.size

    row = model.weights[model.classes.index(class_id)]
    grid = feat.GRID
    cell_contrib = (row[: grid * grid] * vec[: grid * grid]).reshape(grid, grid)
    hist_contrib = float(row[grid * grid :] @ vec[grid * grid :])

    rows = np.minimum(np.arange(h_px) * grid // h_px, grid - 1)
    cols = np.minimum(np.arange(w_px) * grid // w_px, grid - 1)
    heat = cell_contrib[np.ix_(rows, cols)] + hist_contrib / (w_px * h_px)

    lo, hi = float(heat.min()), float(heat.max())
    if hi - lo <= 0.0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


# -- model file: header + row-major float32 weights and bias ------------------

def save_model(path, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        node_raw = model.node.encode("utf-8")
        src_raw = model.feature_source.encode("utf-8")
        fh.write(struct.pack("<HIII", len(node_raw), model.version, model.n_classes, model.dim))
        fh.write(node_raw)
        fh.write(struct.pack("<H", len(src_raw)))
        fh.write(src_raw)
        fh.write(struct.pack("<I", model.trained_on))
        for name in model.classes:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(model.weights.astype("<f4").tobytes(order="C"))
        fh.write(model.bias.astype("<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise ClassifierError(f"{path}: not a model file")
        node_len, version, c, d = struct.unpack("<HIII", fh.read(14))
        node = fh.read(node_len).decode("utf-8")
        (src_len,) = struct.unpack("<H", fh.read(2))
        source = fh.read(src_len).decode("utf-8")
        (trained_on,) = struct.unpack("<I", fh.read(4))
        classes = []
        for _ in range(c):
            (name_len,) = struct.unpack("<H", fh.read(2))
            classes.append(fh.read(name_len).decode("utf-8"))
        weights = np.frombuffer(fh.read(4 * c * d), dtype="<f4").reshape(c, d).astype(np.float64)
        bias = np.frombuffer(fh.read(4 * c), dtype="<f4").astype(np.float64)
    return Model(
        node=node,
        classes=classes,
        weights=weights,
        bias=bias,
        version=version,
        trained_on=trained_on,
        feature_source=source,
    )
