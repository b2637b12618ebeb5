"""Feed-forward ReLU network with hand-written backprop, dropout and SGD.

Parameters live in one flat float64 vector; ``shapes`` records each layer as
``(rows, cols) = (fan_out, fan_in)`` and the bias of length ``rows`` follows
its weight matrix. Keeping everything flat makes aggregation a plain vector
operation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dcfl.errors import DataError, DivergenceError

COVTYPE_LAYERS = (54, 45, 30, 15, 2)
MNIST_LAYERS = (784, 128, 64, 10)
DEFAULT_DROPOUT = 0.2

_CKPT_MAGIC = b"DCFLPRM1"


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...] = COVTYPE_LAYERS
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 3:
            raise ValueError("need input, at least one hidden layer, and output")
        if min(self.layer_sizes) < 1:
            raise ValueError("layer sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        s = self.layer_sizes
        return tuple((s[i + 1], s[i]) for i in range(len(s) - 1))


@dataclass(frozen=True)
class ModelParams:
    flat: np.ndarray
    shapes: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        expected = sum(r * c + r for r, c in self.shapes)
        if self.flat.shape != (expected,):
            raise ValueError(f"flat vector has {self.flat.size} entries, shapes need {expected}")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views into ``flat``, input layer first."""
        out, pos = [], 0
        for r, c in self.shapes:
            w = self.flat[pos:pos + r * c].reshape(r, c)
            pos += r * c
            b = self.flat[pos:pos + r]
            pos += r
            out.append((w, b))
        return out

    def layer_slices(self) -> list[slice]:
        """One slice of ``flat`` per layer, covering its weights and bias."""
        out, pos = [], 0
        for r, c in self.shapes:
            out.append(slice(pos, pos + r * c + r))
            pos += r * c + r
        return out

    def replace(self, flat: np.ndarray) -> ModelParams:
        return ModelParams(flat, self.shapes)

    def copy(self) -> ModelParams:
        return ModelParams(self.flat.copy(), self.shapes)


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> ModelParams:
    shapes = tuple(w.shape for w, _ in layers)
    flat = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])
    return ModelParams(flat.astype(np.float64), shapes)


def init_params(cfg: MlpConfig, seed: int) -> ModelParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for r, c in cfg.shapes:
        layers.append((rng.normal(0.0, np.sqrt(2.0 / c), size=(r, c)), np.zeros(r)))
    return flatten(layers)


def _check_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.shapes[0][1]:
        raise DataError(f"batch shape {x.shape} does not match input width {params.shapes[0][1]}")
    return x


def _forward(params: ModelParams, x: np.ndarray, dropout_rate: float,
             rng: np.random.Generator | None):
    layers = params.layers()
    acts = [x]
    masks = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        if i == len(layers) - 1:
            return z, acts, masks
        h = np.maximum(z, 0.0)
        if rng is not None and dropout_rate > 0.0:
            mask = (rng.random(h.shape) >= dropout_rate) / (1.0 - dropout_rate)
            h = h * mask
        else:
            mask = None
        masks.append(mask)
        acts.append(h)
    raise AssertionError("unreachable")


def forward(params: ModelParams, batch: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None,
            dropout_rate: float = DEFAULT_DROPOUT) -> tuple[np.ndarray, list]:
    """Logits for ``batch`` plus the inverted-dropout masks used (None in eval mode)."""
    x = _check_batch(params, batch)
    if train_mode and rng is None and dropout_rate > 0:
        raise ValueError("train mode with dropout needs an rng")
    logits, _, masks = _forward(params, x, dropout_rate, rng if train_mode else None)
    return logits, masks


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def loss_and_grad(params: ModelParams, batch: np.ndarray, labels: np.ndarray,
                  prox: tuple[float, ModelParams] | None = None,
                  dropout_rate: float = 0.0,
                  rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its exact gradient (flat vector).

    With ``prox=(mu, anchor)`` the objective gains ``mu/2 * ||w - anchor||^2``.
    Dropout is applied only when both ``dropout_rate > 0`` and ``rng`` are given.
    """
    x = _check_batch(params, batch)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n == 0 or x.shape[0] != n:
        raise DataError("empty batch or label/feature length mismatch")
    logits, acts, masks = _forward(params, x, dropout_rate, rng)
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise DataError("label outside the output range")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    layers = params.layers()
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ w
        if masks[i - 1] is not None:
            delta = delta * masks[i - 1]
        delta = delta * (acts[i] > 0)
    grad = np.concatenate([g.ravel() for g in grads])

    if prox is not None:
        mu, anchor = prox
        if anchor.shapes != params.shapes:
            raise ValueError("proximal anchor shape differs from params")
        if mu != 0.0:
            diff = params.flat - anchor.flat
            loss += 0.5 * mu * float(diff @ diff)
            grad = grad + mu * diff
    return float(loss), grad


def sgd_step(params: ModelParams, grad: np.ndarray, eta: float) -> ModelParams:
    if grad.shape != params.flat.shape:
        raise ValueError("gradient shape differs from params")
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    new = params.flat - eta * grad
    if not np.all(np.isfinite(new)):
        raise DivergenceError()
    return params.replace(new)


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per row in eval mode (lowest index wins ties)."""
    logits, _ = forward(params, features, train_mode=False)
    return np.argmax(logits, axis=1)


def predict_proba(params: ModelParams, features: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, features, train_mode=False)
    return softmax(logits)


def save_params(params: ModelParams, path: str | Path) -> None:
    """Checkpoint: magic, layer count, (rows, cols) pairs, then little-endian float64s."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(params.shapes)))
        for r, c in params.shapes:
            f.write(struct.pack("<II", r, c))
        f.write(params.flat.astype("<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a parameter checkpoint")
    (n_layers,) = struct.unpack_from("<I", raw, 8)
    shapes = tuple(struct.unpack_from("<II", raw, 12 + 8 * i) for i in range(n_layers))
    start = 12 + 8 * n_layers
    flat = np.frombuffer(raw[start:], dtype="<f8").astype(np.float64)
    return ModelParams(flat, shapes)
