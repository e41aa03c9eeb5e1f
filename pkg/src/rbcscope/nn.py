"""Small float64 neural-network numerics: dense/conv layers, losses, optimisers.

Tensors are plain ``float64`` numpy arrays. Convolutions are forward-only;
only dense layers are trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FORMAT_VERSION = 1


class DivergenceError(ArithmeticError):
    pass


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent dense shapes {self.weights.shape} / {self.bias.shape}")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, scale: float | None = None):
        """He-normal weights, zero bias."""
        std = np.sqrt(2.0 / n_in) if scale is None else scale
        return cls(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int, n_out: int):
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out_c, in_c, k, k)
    stride: int = 1

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ValueError(f"bad kernel shape {self.kernels.shape}")
        if self.kernels.shape[2] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.stride < 1:
            raise ValueError("stride must be positive")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """``W x + b`` for a single vector ``(in,)`` or a batch ``(n, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.weights.shape[1]:
        raise ValueError(f"dense input has {x.shape[-1]} features, layer expects {layer.weights.shape[1]}")
    return x @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray, need_x: bool = True):
    """Return ``(grad_weights, grad_bias, grad_x)``; batches are summed over rows."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != layer.weights.shape[0] or x.shape[:-1] != upstream.shape[:-1]:
        raise ValueError("upstream gradient shape does not match layer output")
    if x.ndim == 1:
        gw = np.outer(upstream, x)
        gb = upstream.copy()
    else:
        gw = upstream.T @ x
        gb = upstream.sum(axis=0)
    gx = upstream @ layer.weights if need_x else None
    return gw, gb, gx


def conv2d_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Valid-padding cross-correlation of ``x`` shaped ``(in_c, h, w)``."""
    x = np.asarray(x, dtype=np.float64)
    out_c, in_c, k, _ = layer.kernels.shape
    if x.ndim != 3 or x.shape[0] != in_c:
        raise ValueError(f"conv expects ({in_c}, h, w) input, got {x.shape}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError("input smaller than kernel")
    s = layer.stride
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    # windows: (in_c, h', w', k, k)
    return np.einsum("chwij,ocij->ohw", windows, layer.kernels, optimize=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x):
    return np.maximum(x, 0.0)


def bce_l2_loss(pred, target, params: Sequence[np.ndarray] = (), lam: float = 0.0):
    """Binary cross-entropy averaged over the batch plus ``lam * sum(param**2)``.

    Returns ``(loss, grad_logits, grad_params)`` where ``grad_logits`` is the
    data-term gradient with respect to the pre-sigmoid logits, ``(p - y) / n``.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), 1e-12, 1 - 1e-12)
    y = np.asarray(target, dtype=np.float64)
    n = p.size
    data = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    reg = lam * sum(float(np.sum(w * w)) for w in params)
    grad_logits = (np.asarray(pred, dtype=np.float64) - y) / n
    grad_params = [2.0 * lam * w for w in params]
    return float(data + reg), grad_logits, grad_params


# ---------------------------------------------------------------------------
# optimisers

@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("divergence")


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    _check_finite(grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p -= state.learning_rate * (m / c1) / denom
    return params


@dataclass
class MomentumState:
    learning_rate: float = 1e-3
    decay: float = 1e-6
    momentum: float = 0.9
    t: int = 0
    velocity: list = field(default_factory=list)


def momentum_step(params: list[np.ndarray], grads: list[np.ndarray], state: MomentumState) -> list[np.ndarray]:
    """Momentum SGD with time-decayed rate ``lr / (1 + decay * t)``, in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    _check_finite(grads)
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    lr_t = state.learning_rate / (1.0 + state.decay * state.t)
    for p, g, vel in zip(params, grads, state.velocity):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        vel *= state.momentum
        vel -= lr_t * g
        p += vel
    state.t += 1
    return params


# ---------------------------------------------------------------------------
# verification

def gradcheck(loss_fn: Callable, params: list[np.ndarray], h: float = 1e-5,
              coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)``. Parameters are perturbed
    in place and restored. With ``coords`` set, only that many randomly chosen
    coordinates per parameter are probed.
    """
    _, analytic = loss_fn(params)
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params)[0]
            flat[i] = orig - h
            fm = loss_fn(params)[0]
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = g.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialisation

def layers_to_json(layers: Sequence[DenseLayer], **extra) -> dict:
    doc = {"version": FORMAT_VERSION, **extra, "layers": []}
    for layer in layers:
        doc["layers"].append({
            "kind": "dense",
            "shape": list(layer.weights.shape),
            "weights": layer.weights.ravel().tolist(),
            "bias": layer.bias.tolist(),
        })
    return doc


def layers_from_json(doc: dict) -> list[DenseLayer]:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    layers = []
    for entry in doc["layers"]:
        if entry["kind"] != "dense":
            raise ValueError(f"unknown layer kind {entry['kind']!r}")
        w = np.asarray(entry["weights"], dtype=np.float64).reshape(entry["shape"])
        layers.append(DenseLayer(w, np.asarray(entry["bias"], dtype=np.float64)))
    return layers


def dumps(doc: dict) -> str:
    """JSON text; floats use Python's shortest round-trip repr, so reloads are exact."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
