"""Dense tensor primitives with explicit backward passes.

Every forward that participates in training returns ``(out, cache)`` and has a
matching ``*_backward(dout, cache)``. Arrays are float64 numpy arrays; the
``Tensor`` alias exists only for readability in signatures.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

Tensor = np.ndarray

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# parameter bookkeeping
# --------------------------------------------------------------------------


@dataclass
class GradSlot:
    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")


class ModelParams:
    """Ordered name -> GradSlot map with dotted hierarchical keys.

    ``sub("fcfa.")`` returns a plain dict of the value arrays under that prefix
    (prefix stripped); module code works on those dicts and hands gradient
    dicts back through ``accumulate``.
    """

    def __init__(self, values: Mapping[str, Tensor] | None = None):
        self.slots: dict[str, GradSlot] = {}
        self._prefix_names: dict[str, list[str]] = {}
        if values:
            for name, value in values.items():
                self.add(name, value)

    def add(self, name: str, value: Tensor) -> None:
        if name in self.slots:
            raise KeyError(f"duplicate parameter {name!r}")
        self.slots[name] = GradSlot(np.array(value, dtype=np.float64))
        self._prefix_names.clear()

    def update(self, prefix: str, values: Mapping[str, Tensor]) -> None:
        for name, value in values.items():
            self.add(prefix + name, value)

    def __getitem__(self, name: str) -> Tensor:
        return self.slots[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.slots

    def __iter__(self) -> Iterator[str]:
        return iter(self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    def names(self) -> list[str]:
        return list(self.slots)

    def values(self) -> dict[str, Tensor]:
        return {k: s.value for k, s in self.slots.items()}

    def grads(self) -> dict[str, Tensor]:
        return {k: s.grad for k, s in self.slots.items()}

    def sub(self, prefix: str) -> dict[str, Tensor]:
        names = self._prefix_names.get(prefix)
        if names is None:
            names = self._prefix_names[prefix] = [k for k in self.slots if k.startswith(prefix)]
        n = len(prefix)
        return {k[n:]: self.slots[k].value for k in names}

    def accumulate(self, prefix: str, grads: Mapping[str, Tensor]) -> None:
        for name, g in grads.items():
            slot = self.slots[prefix + name]
            if g.shape != slot.value.shape:
                raise ShapeError(f"gradient for {prefix + name} has shape {g.shape}, expected {slot.value.shape}")
            slot.grad += g

    def zero_grads(self) -> None:
        for s in self.slots.values():
            s.grad[...] = 0.0

    def num_scalars(self) -> int:
        return sum(s.value.size for s in self.slots.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: s.value.copy() for k, s in self.slots.items()})


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def silu(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def silu_grad(x: Tensor) -> Tensor:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(dy: Tensor, x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    return np.where(x > 0, x, slope * x)


# --------------------------------------------------------------------------
# softmax / normalization / linear
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: Tensor | None = None) -> Tensor:
    """Stabilized softmax. ``mask`` (bool, broadcastable) marks allowed entries."""
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dp: Tensor, p: Tensor, axis: int = -1) -> Tensor:
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x, axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS):
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs a last-axis extent of at least 2")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_backward(dy: Tensor, cache):
    xhat, rstd, gain = cache
    d = xhat.shape[-1]
    red = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=red)
    dbias = np.sum(dy, axis=red)
    dxhat = dy * gain
    dx = rstd / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * np.sum(dxhat * xhat, -1, keepdims=True))
    return dx, dgain, dbias


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def linear_backward(dy: Tensor, x: Tensor, w: Tensor):
    """Returns (dx, dw, db) for y = x @ w + b with arbitrary leading axes."""
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None):
    """softmax(q k^T / sqrt(d)) v over the last two axes; returns (out, cache)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    p = softmax(scores, axis=-1, mask=mask)
    return p @ v, (q, k, v, p, scale)


def attention_backward(dout: Tensor, cache):
    q, k, v, p, scale = cache
    dv = np.swapaxes(p, -1, -2) @ dout
    dp = dout @ np.swapaxes(v, -1, -2)
    ds = softmax_backward(dp, p) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """Softmax(Q K^T / sqrt(d)) V for batched [B, L, d] inputs."""
    if Q.ndim != 3 or K.ndim != 3 or V.ndim != 3:
        raise ShapeError("scaled_dot_attention expects [B, L, d] tensors")
    if not (Q.shape[0] == K.shape[0] == V.shape[0]):
        raise ShapeError(f"batch mismatch: {Q.shape[0]}, {K.shape[0]}, {V.shape[0]}")
    if Q.shape[2] != K.shape[2]:
        raise ShapeError(f"feature mismatch between Q ({Q.shape[2]}) and K ({K.shape[2]})")
    return attention(Q, K, V)[0]


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------


def finite_diff_gradient(
    f: Callable[[], float],
    params: ModelParams | Mapping[str, Tensor],
    eps: float = 1e-5,
    names: list[str] | None = None,
) -> dict[str, Tensor]:
    """Central-difference gradient of ``f()`` with respect to each parameter.

    ``f`` takes no arguments and must read the parameter arrays it is given;
    each scalar is perturbed in place and restored bit-exactly afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    arrays = params.values() if isinstance(params, ModelParams) else dict(params)
    out = {}
    for name in names if names is not None else list(arrays):
        arr = arrays[name]
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name!r} is not contiguous")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite objective when perturbing {name}{list(map(int, np.unravel_index(i, arr.shape)))}")
            g.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """max|a - n| normalized by the larger of max|a|, max|n| and ``floor``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
