"""Dense feed-forward networks in plain numpy: ReLU hidden layers, identity or softmax head."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .preprocess import add_noise

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12
CLASSIFIER_HIDDEN = (256, 128, 64, 32)
REGRESSOR_HIDDEN = (64, 64, 32, 16, 8)


class TrainingDiverged(FloatingPointError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Mlp:
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]
    head: str = "identity"  # or "softmax"

    def __post_init__(self):
        if self.head not in ("identity", "softmax"):
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan-in {W.shape[0]} != previous width {self.weights[i - 1].shape[1]}")

    @classmethod
    def build(cls, widths: Sequence[int], head: str = "identity", rng: np.random.Generator | None = None) -> "Mlp":
        """``widths`` lists every layer width, input first and output last."""
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases = [], []
        n_layers = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            # He-uniform for ReLU layers, Glorot-uniform for the output layer
            limit = math.sqrt(6.0 / a) if i < n_layers - 1 else math.sqrt(6.0 / (a + b))
            weights.append(rng.uniform(-limit, limit, size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, head)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.head)

    def _forward(self, x):
        acts = [x]
        a = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = np.maximum(z, 0.0) if i < last else z
            acts.append(a)
        out = softmax(a) if self.head == "softmax" else a
        return acts, out

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.shape[-1] != self.widths[0]:
            raise ValueError(f"expected {self.widths[0]} inputs, got {x2.shape[-1]}")
        out = self._forward(x2)[1]
        return out[0] if single else out

    __call__ = forward

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "layers": [
                {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        weights = [np.array(layer["weights"], dtype=float).reshape(layer["shape"]) for layer in d["layers"]]
        biases = [np.array(layer["bias"], dtype=float) for layer in d["layers"]]
        return cls(weights, biases, d["head"])


def loss_mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    return float(np.mean((pred - target) ** 2))


def loss_cross_entropy(probs, one_hot) -> float:
    probs, one_hot = np.atleast_2d(probs), np.atleast_2d(one_hot)
    p = np.clip(probs, PROB_CLIP, 1.0)
    return float(-np.mean(np.sum(one_hot * np.log(p), axis=-1)))


def loss_kind(mlp: Mlp) -> str:
    return "cross_entropy" if mlp.head == "softmax" else "mse"


def backward(mlp: Mlp, x, y) -> tuple[float, list[np.ndarray]]:
    """Batch loss and its gradient for every parameter, ordered as ``mlp.params``.

    The loss is cross-entropy for a softmax head and mean squared error otherwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    acts, out = mlp._forward(x)
    n = x.shape[0]
    if mlp.head == "softmax":
        loss = loss_cross_entropy(out, y)
        delta = (out - y) / n  # gradient w.r.t. the logits
    else:
        loss = loss_mse(out, y)
        delta = 2.0 * (out - y) / out.size
    grads: list[np.ndarray] = []
    for i in range(len(mlp.weights) - 1, -1, -1):
        gW = acts[i].T @ delta
        gb = delta.sum(axis=0)
        grads += [gb, gW]
        if i:
            delta = (delta @ mlp.weights[i].T) * (acts[i] > 0)
    return loss, grads[::-1]


@dataclass
class AdamaxState:
    m: list[np.ndarray]
    u: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamaxState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adamax_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamaxState) -> None:
    """In-place Adamax update followed by decoupled weight decay."""
    state.t += 1
    step = state.lr / (1.0 - state.beta1 ** state.t)
    shrink = 1.0 - state.lr * state.weight_decay
    for p, g, m, u in zip(params, grads, state.m, state.u):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p -= step * m / (u + state.eps)
        if state.weight_decay:
            p *= shrink


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    validation_fraction: float = 0.2
    seed: int = 0
    noise_sigma: float = 0.0
    lr: float = 1e-3
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def default_epochs(n_out: int, head: str) -> int:
    return (100 if head == "softmax" else 200) * n_out


def classifier_widths(n_in: int, n_classes: int) -> list[int]:
    return [n_in, *CLASSIFIER_HIDDEN, n_classes]


def regressor_widths(n_in: int, n_out: int) -> list[int]:
    return [n_in, *(w * n_out for w in REGRESSOR_HIDDEN), n_out]


def split_indices(n: int, validation_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled train/validation index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * validation_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def evaluate(mlp: Mlp, x, y) -> float:
    out = mlp.forward(x)
    return loss_cross_entropy(out, y) if mlp.head == "softmax" else loss_mse(out, y)


def train(mlp: Mlp, x, y, cfg: TrainConfig, x_val=None, y_val=None) -> tuple[Mlp, History]:
    """Mini-batch Adamax training; returns a trained copy and the per-epoch history.

    Without explicit validation data, ``cfg.validation_fraction`` of the rows
    are held out. Gaussian noise (``cfg.noise_sigma``) is drawn afresh for
    every training batch and never touches validation inputs.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x_val is None:
        tr, va = split_indices(len(x), cfg.validation_fraction, cfg.seed)
        x, y, x_val, y_val = x[tr], y[tr], x[va], y[va]
    mlp = mlp.copy()
    params = mlp.params
    state = AdamaxState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = add_noise(x[idx], cfg.noise_sigma, rng) if cfg.noise_sigma else x[idx]
            loss, grads = backward(mlp, xb, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            adamax_step(params, grads, state)
            total += loss * len(idx)
        hist.loss.append(total / max(n, 1))
        if x_val is not None and len(x_val):
            hist.val_loss.append(evaluate(mlp, x_val, y_val))
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.4g val %.4g", epoch, hist.loss[-1],
                      hist.val_loss[-1] if hist.val_loss else float("nan"))
    return mlp, hist
