"""Optimization of the autoencoder (reconstruction MSE) and the crop
classifier (categorical cross-entropy), plus finite-difference gradient
verification of the backprop machinery."""

import copy
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError
from .imaging import ImagePatch
from .model import Autoencoder, Classifier, build_autoencoder, build_classifier, prepare_crop

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer.lower() not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: Optional[List[float]] = None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(reconstruction, target):
    """Mean squared element difference."""
    a = np.asarray(reconstruction, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def cross_entropy_loss(prediction, label):
    """Categorical cross-entropy of a probability vector against a one-hot
    label; the log input is clamped at 1e-12."""
    p = np.asarray(prediction, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"shape mismatch: {p.shape} vs {y.shape}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("prediction must sum to 1")
    return float(-(y * np.log(np.maximum(p, LOG_CLAMP))).sum())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, model):
        grads = dict(model.named_grads())
        for name, p in model.named_parameters():
            g = grads[name]
            if g is not None:
                p -= (self.lr * g).astype(p.dtype)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, model):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        grads = dict(model.named_grads())
        for name, p in model.named_parameters():
            g = grads[name]
            if g is None:
                continue
            g = g.astype(np.float64)
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            update = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p -= update.astype(p.dtype)


def _make_optimizer(cfg):
    if cfg.optimizer.lower() == "adam":
        return Adam(cfg.learning_rate)
    return SGD(cfg.learning_rate)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _to_nchw(patches):
    arrays = []
    for p in patches:
        pixels = p.pixels if isinstance(p, ImagePatch) else np.asarray(p)
        arrays.append(pixels.transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(arrays), dtype=np.float32)


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _eval_mse(model, x, batch_size):
    total, count = 0.0, 0
    for sel in _batches(x.shape[0], batch_size):
        xb = x[sel]
        y = model.forward(xb, training=False)
        total += float(((y - xb) ** 2).sum())
        count += xb.size
    return total / count


def train_autoencoder(dataset, spec, cfg=TrainConfig()):
    """Minimize reconstruction MSE over clean patches.

    Deterministic for a fixed config seed (initialization, split and batch
    shuffling all derive from it).  Returns the model restored to its best
    validation-loss parameters and the per-epoch history.  When the
    validation fraction rounds to zero patches, validation falls back to the
    training set.
    """
    if isinstance(dataset, np.ndarray):
        x = np.ascontiguousarray(dataset.transpose(0, 3, 1, 2), dtype=np.float32)
    else:
        x = _to_nchw(dataset)
    if x.shape[0] == 0:
        raise DataError("empty training dataset")
    if x.shape[1:] != (3, spec.input_size.height, spec.input_size.width):
        raise DimensionError(
            f"patches {x.shape[1:]} do not match spec input "
            f"{spec.input_size.height}x{spec.input_size.width}"
        )

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(x.shape[0])
    n_val = int(round(cfg.validation_fraction * x.shape[0]))
    val_x = x[perm[:n_val]] if n_val else x
    train_x = x[perm[n_val:]] if n_val else x
    if train_x.shape[0] == 0:
        raise DataError("validation split consumed every patch")

    model = build_autoencoder(spec, seed=cfg.seed)
    opt = _make_optimizer(cfg)
    history = TrainHistory()
    best = (np.inf, None)

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_x.shape[0])
        loss_sum = 0.0
        for sel in _batches(train_x.shape[0], cfg.batch_size, order):
            xb = train_x[sel]
            y = model.forward(xb, training=True)
            diff = y - xb
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            loss_sum += loss * xb.shape[0]
            model.zero_grad()
            model.backward((2.0 / diff.size) * diff)
            opt.step(model)
        train_loss = loss_sum / train_x.shape[0]
        if not np.isfinite(train_loss):
            raise NumericError(f"training loss became non-finite at epoch {epoch}", epoch=epoch)
        val_loss = _eval_mse(model, val_x, cfg.batch_size)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, {k: v.copy() for k, v in model.state_dict().items()})

    if best[1] is not None:
        model.load_state_dict(best[1])
    return model, history


def _prepare_crops(crops, input_size):
    prepared = []
    for c in crops:
        pixels = getattr(c, "pixels", c)
        prepared.append(prepare_crop(np.asarray(pixels), input_size).transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(prepared), dtype=np.float32)


def _softmax64(logits):
    z = logits.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(crops, labels, cfg=TrainConfig(), input_size=64, base_channels=16):
    """Minimize categorical cross-entropy over labeled crops.

    Crops are aspect-preserving resized and padded to the classifier input
    size.  Returns the model restored to its best validation-accuracy
    parameters and a history that includes per-epoch validation accuracy.
    """
    if len(crops) == 0:
        raise DataError("empty crop dataset")
    if len(crops) != len(labels):
        raise DimensionError("crops and labels must have equal length")
    class_names = tuple(sorted(set(labels)))
    if len(class_names) < 2:
        raise DataError(f"need at least 2 classes, got {class_names}")
    name_to_idx = {n: i for i, n in enumerate(class_names)}
    y_all = np.array([name_to_idx[l] for l in labels])
    x_all = _prepare_crops(crops, input_size)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(crops))
    n_val = int(round(cfg.validation_fraction * len(crops)))
    val_sel, train_sel = perm[:n_val], perm[n_val:]
    if n_val == 0:
        val_sel = train_sel = perm
    if train_sel.size == 0:
        raise DataError("validation split consumed every crop")
    x_train, y_train = x_all[train_sel], y_all[train_sel]
    x_val, y_val = x_all[val_sel], y_all[val_sel]

    model = build_classifier(
        len(class_names), input_size=input_size, seed=cfg.seed, base_channels=base_channels
    )
    model.class_names = class_names
    opt = _make_optimizer(cfg)
    history = TrainHistory(val_accuracy=[])
    best = (-np.inf, None)

    for epoch in range(cfg.epochs):
        order = rng.permutation(x_train.shape[0])
        loss_sum = 0.0
        for sel in _batches(x_train.shape[0], cfg.batch_size, order):
            xb, yb = x_train[sel], y_train[sel]
            logits = model.forward(xb, training=True)
            probs = _softmax64(logits)
            picked = np.maximum(probs[np.arange(len(yb)), yb], LOG_CLAMP)
            loss = float(-np.log(picked).mean())
            loss_sum += loss * len(yb)
            dlogits = probs
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            model.zero_grad()
            model.backward(dlogits.astype(np.float32))
            opt.step(model)
        train_loss = loss_sum / x_train.shape[0]
        if not np.isfinite(train_loss):
            raise NumericError(f"training loss became non-finite at epoch {epoch}", epoch=epoch)

        val_probs = []
        for sel in _batches(x_val.shape[0], cfg.batch_size):
            val_probs.append(model.predict_proba(x_val[sel]))
        val_probs = np.concatenate(val_probs)
        picked = np.maximum(val_probs[np.arange(len(y_val)), y_val], LOG_CLAMP)
        val_loss = float(-np.log(picked).mean())
        val_acc = float((val_probs.argmax(axis=1) == y_val).mean())
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        if val_acc > best[0]:
            best = (val_acc, {k: v.copy() for k, v in model.state_dict().items()})

    if best[1] is not None:
        model.load_state_dict(best[1])
    return model, history


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def _loss_and_grad(model, x, target_labels):
    """Loss plus gradient w.r.t. the model output, in the model's dtype."""
    if target_labels is None:  # reconstruction objective
        y = model.forward(x, training=True)
        diff = y - x
        return float(np.mean(diff**2)), (2.0 / diff.size) * diff
    logits = model.forward(x, training=True)
    probs = _softmax64(logits).astype(logits.dtype)
    picked = np.maximum(probs[np.arange(len(target_labels)), target_labels], LOG_CLAMP)
    loss = float(-np.log(picked).mean())
    dlogits = probs.copy()
    dlogits[np.arange(len(target_labels)), target_labels] -= 1.0
    dlogits /= len(target_labels)
    return loss, dlogits


def gradient_check(model, sample, epsilon=1e-6, n_coords=64, seed=0, labels=None):
    """Compare analytic parameter gradients against central finite
    differences on a random parameter subset; returns the max relative error.

    ``sample`` is an (N,C,H,W) batch.  Reconstruction loss is used unless
    integer ``labels`` are given (then softmax cross-entropy).  The model is
    deep-copied and promoted to float64.  The relative error uses an
    absolute floor of 1e-4 in the denominator so dead coordinates do not
    produce spurious blowups.  The small default epsilon keeps the
    perturbation below the activation-switching scale of ReLU/max-pool
    units; larger steps can cross those kinks and corrupt the difference
    quotient even when the analytic gradient is exact.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must be in [1e-6, 1e-3]")
    work = copy.deepcopy(model).astype(np.float64)
    x = np.asarray(sample, dtype=np.float64)

    work.zero_grad()
    _, dout = _loss_and_grad(work, x, labels)
    work.backward(dout)
    analytic = {k: (g.copy() if g is not None else None) for k, g in work.named_grads()}

    params = [(k, p) for k, p in work.named_parameters()]
    sizes = np.array([p.size for _, p in params])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    n = min(n_coords, total)
    flat_choice = rng.choice(total, size=n, replace=False)

    max_rel = 0.0
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in sorted(flat_choice):
        pi = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, p = params[pi]
        i = flat - offsets[pi]
        orig = p.flat[i]
        p.flat[i] = orig + epsilon
        lp, _ = _loss_and_grad(work, x, labels)
        p.flat[i] = orig - epsilon
        lm, _ = _loss_and_grad(work, x, labels)
        p.flat[i] = orig
        numeric = (lp - lm) / (2 * epsilon)
        ga = analytic[name].flat[i]
        rel = abs(ga - numeric) / max(abs(ga), abs(numeric), 1e-4)
        max_rel = max(max_rel, float(rel))
    return max_rel
