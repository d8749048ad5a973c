"""A small deterministic MLP classifier with manual backpropagation.

Training is plain mini-batch SGD with momentum on the soft-target cross entropy,
with a single step drop of the learning rate. Everything runs in float64 with a
fixed reduction order, and BLAS is pinned to one thread while training so the
weights are bit-reproducible on any machine configuration.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .data_io import Dataset, TensorFile, read_tensors, write_tensors
from .errors import ShapeError, TrainingError
from .rng import substream


def fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shape: tuple[int, ...]
    seed: int = 0
    epochs_trained: int = 0

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, input_shape, hidden, classes: int, seed: int) -> MlpModel:
        """Glorot-uniform weights and zero biases."""
        dims = [int(np.prod(input_shape))] + list(hidden) + [classes]
        ws, bs = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(substream(seed, "init", i).uniform(-limit, limit, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, tuple(input_shape), seed)

    def _flat(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects images of shape {self.input_shape}, got {x.shape[1:]}")
        return x.reshape(x.shape[0], -1) - 0.5

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations of every layer for flattened, centred inputs ``x``."""
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if i < len(self.weights) - 1 else z)
        return acts

    def logits(self, images) -> np.ndarray:
        return self.forward(self._flat(images))[-1]

    def hidden(self, images, layer: int = -1) -> np.ndarray:
        """Post-ReLU activations of a hidden layer (last by default)."""
        return self.forward(self._flat(images))[1:-1][layer]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def fingerprint(self) -> str:
        return fingerprint(*self.params())

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.input_shape, self.seed, self.epochs_trained)

    def save(self, path) -> None:
        path = Path(path)
        write_tensors(path, [TensorFile.from_array(p.astype(np.float32)) for p in self.params()])
        np.save(path.with_suffix(".f64.npy"), np.concatenate([p.ravel() for p in self.params()]))
        sidecar = {"layer_dims": self.layer_dims, "input_shape": list(self.input_shape),
                   "seed": self.seed, "epochs_trained": self.epochs_trained}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> MlpModel:
        """Load a checkpoint; exact float64 weights are used when present."""
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        tensors = read_tensors(path)
        dims = meta["layer_dims"]
        exact = path.with_suffix(".f64.npy")
        flat = np.load(exact) if exact.exists() else None
        ws, bs, pos = [], [], 0
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if flat is not None:
                w = flat[pos:pos + a * b].reshape(a, b)
                pos += a * b
                bias = flat[pos:pos + b].copy()
                pos += b
            else:
                w = tensors[2 * i].data.astype(np.float64)
                bias = tensors[2 * i + 1].data.astype(np.float64)
            if w.shape != (a, b):
                raise ShapeError(f"layer {i} weight shape {w.shape} != {(a, b)}")
            ws.append(w.copy())
            bs.append(bias)
        return cls(ws, bs, tuple(meta["input_shape"]), meta["seed"], meta["epochs_trained"])


# --------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def soft_target_ce(logits, target) -> float | np.ndarray:
    """-sum_k target_k log softmax(logits)_k, per row when given a batch."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("target probabilities must sum to 1")
    loss = -(target * log_softmax(logits)).sum(axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def hard_ce(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    return -log_softmax(logits)[np.arange(labels.size), labels]


def one_hot(labels, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_and_grads(model: MlpModel, x: np.ndarray, targets: np.ndarray):
    """Mean soft-target CE over the batch and its gradient for every parameter."""
    acts = model.forward(x)
    logp = log_softmax(acts[-1])
    n = x.shape[0]
    loss = float(-(targets * logp).sum() / n)
    delta = (np.exp(logp) - targets) / n
    grads = []
    for i in range(len(model.weights) - 1, -1, -1):
        gw = acts[i].T @ delta
        gb = delta.sum(axis=0)
        grads = [gw, gb] + grads
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, grads


def input_gradient(model: MlpModel, images, classes) -> np.ndarray:
    """d logit[class] / d pixel for every image, shaped like ``images``."""
    images = np.asarray(images, dtype=np.float64)
    acts = model.forward(model._flat(images))
    delta = np.zeros_like(acts[-1])
    delta[np.arange(len(images)), np.asarray(classes)] = 1.0
    for i in range(len(model.weights) - 1, -1, -1):
        delta = delta @ model.weights[i].T
        if i:
            delta = delta * (acts[i] > 0)
    return delta.reshape(images.shape)


# --------------------------------------------------------------------------
# training

Augment = Callable[[np.ndarray, np.ndarray, np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_drop_epoch_fraction: float = 0.5
    lr_drop_factor: float = 0.01
    hidden: tuple[int, ...] = (256,)
    seed: int = 0
    # (images, soft_targets, rng, epoch) -> (images, soft_targets)
    augment: Augment | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        drop = int(np.floor(self.epochs * self.lr_drop_epoch_fraction))
        return self.lr * (self.lr_drop_factor if epoch >= drop else 1.0)


def train(data: Dataset, cfg: TrainConfig):
    """Train a fresh MLP on ``data``; return (model, history)."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = MlpModel.init(data.image_shape, cfg.hidden, data.class_count, cfg.seed)
    targets_all = data.soft_labels if data.soft_labels is not None else one_hot(data.labels, data.class_count)
    velocity = [np.zeros_like(p) for p in model.params()]
    history = []
    n = len(data)
    with threadpool_limits(limits=1, user_api="blas"):
        for epoch in range(cfg.epochs):
            order = substream(cfg.seed, "shuffle", epoch).permutation(n)
            aug_rng = substream(cfg.seed, "augment", epoch)
            lr = cfg.lr_at(epoch)
            tot_loss = 0.0
            correct = 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                imgs, tgt = data.images[idx], targets_all[idx]
                if cfg.augment is not None:
                    imgs, tgt = cfg.augment(imgs, tgt, aug_rng, epoch)
                x = model._flat(imgs)
                loss, grads = loss_and_grads(model, x, tgt)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                params = model.params()
                for p, g, v in zip(params, grads, velocity):
                    v *= cfg.momentum
                    v += g
                    p -= lr * v
                tot_loss += loss * len(idx)
                correct += int((np.argmax(model.forward(x)[-1], axis=1) == np.argmax(tgt, axis=1)).sum())
            if not all(np.isfinite(p).all() for p in model.params()):
                raise TrainingError(f"non-finite parameters after epoch {epoch}")
            model.epochs_trained += 1
            history.append({"epoch": epoch, "lr": lr, "loss": tot_loss / n, "accuracy": correct / n})
    return model, history


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class LogitsTable:
    scores: np.ndarray
    dataset_fingerprint: str = ""
    model_fingerprint: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ShapeError(f"logits must be (N, K), got {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("logits must be finite")
        object.__setattr__(self, "scores", s)

    @property
    def predictions(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.scores, axis=1)

    def __len__(self):
        return self.scores.shape[0]


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    wrong_counts: np.ndarray
    mean_ce: float
    logits: LogitsTable


def model_logits(model, images) -> np.ndarray:
    """Logits from an :class:`MlpModel` or any object/callable producing (N, K) scores."""
    if hasattr(model, "logits"):
        out = model.logits(images)
    else:
        out = model(images)
    return np.asarray(out, dtype=np.float64)


def wrong_counts(predictions, labels, classes: int) -> np.ndarray:
    """W_c: number of samples predicted as c whose true label differs."""
    predictions = np.asarray(predictions)
    wrong = predictions != np.asarray(labels)
    return np.bincount(predictions[wrong], minlength=classes)[:classes]


def evaluate(model, data: Dataset, labels=None) -> EvalResult:
    """Accuracy, per-class wrong counts, mean CE and logits of ``model`` on ``data``.

    ``labels`` overrides ``data.labels`` (e.g. to score one half of a composite).
    """
    labels = data.labels if labels is None else np.asarray(labels)
    with threadpool_limits(limits=1, user_api="blas"):
        scores = model_logits(model, data.images)
    if scores.shape[0] != len(data):
        raise ShapeError(f"{scores.shape[0]} logit rows for {len(data)} samples")
    k = scores.shape[1]
    table = LogitsTable(scores, fingerprint(data.images, labels),
                        model.fingerprint() if hasattr(model, "fingerprint") else "")
    pred = table.predictions
    acc = float(np.mean(pred == labels))
    return EvalResult(acc, wrong_counts(pred, labels, max(k, data.class_count)),
                      float(np.mean(hard_ce(scores, labels))), table)


def accuracy(model, images, labels) -> float:
    with threadpool_limits(limits=1, user_api="blas"):
        scores = model_logits(model, images)
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


# --------------------------------------------------------------------------
# saliency


@dataclass(frozen=True)
class SaliencyStack:
    maps: np.ndarray
    flat: np.ndarray

    def __len__(self):
        return self.maps.shape[0]


def box_blur3(maps: np.ndarray) -> np.ndarray:
    """3x3 mean filter; border pixels average over their in-image neighbours."""
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    pad = np.zeros((n, h + 2, w + 2))
    pad[:, 1:-1, 1:-1] = maps
    ones = np.zeros((h + 2, w + 2))
    ones[1:-1, 1:-1] = 1.0
    total = np.zeros((n, h, w))
    count = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            total += pad[:, dy:dy + h, dx:dx + w]
            count += ones[dy:dy + h, dx:dx + w]
    return total / count


def normalize_maps(maps: np.ndarray) -> SaliencyStack:
    """Min-max normalise each map to [0, 1]; constant maps become zeros and are flagged."""
    maps = np.asarray(maps, dtype=np.float64)
    lo = maps.min(axis=(1, 2), keepdims=True)
    hi = maps.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = (span <= 0).reshape(-1)
    out = np.where(span > 0, (maps - lo) / np.where(span > 0, span, 1.0), 0.0)
    return SaliencyStack(out, flat)


def saliency(model: MlpModel, images, classes=None, raw: bool = False):
    """Input-gradient saliency maps.

    |d logit / d pixel| is reduced over channels by max, smoothed with a 3x3 box
    filter and min-max normalised. ``classes`` defaults to the predicted class.
    ``raw=True`` returns the unsmoothed, unnormalised maps instead.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    with threadpool_limits(limits=1, user_api="blas"):
        if classes is None:
            classes = np.argmax(model.logits(images), axis=1)
        classes = np.broadcast_to(np.asarray(classes), (len(images),))
        grad = np.abs(input_gradient(model, images, classes)).max(axis=1)
    if raw:
        return grad[0] if single else grad
    stack = normalize_maps(box_blur3(grad))
    if single:
        return stack.maps[0], bool(stack.flat[0])
    return stack


# --------------------------------------------------------------------------
# label manipulation


def randomize_labels(data: Dataset, seed: int) -> Dataset:
    if data.class_count < 2:
        raise ValueError("need at least two classes")
    labels = substream(seed, "random_labels").integers(0, data.class_count, size=len(data))
    return Dataset(data.images, labels, data.class_count, None, data.name + "+randlabels", dict(data.extras))


def drop_class(data: Dataset, c: int):
    """Remove class ``c`` and relabel the rest contiguously; return (dataset, mapping)."""
    if not 0 <= c < data.class_count:
        raise ValueError(f"class {c} outside [0, {data.class_count})")
    keep = data.labels != c
    mapping = {old: old - (old > c) for old in range(data.class_count) if old != c}
    lut = np.array([mapping.get(k, -1) for k in range(data.class_count)])
    sub = data.subset(np.flatnonzero(keep))
    return Dataset(sub.images, lut[sub.labels], data.class_count - 1, None, data.name + f"-class{c}", sub.extras), mapping
