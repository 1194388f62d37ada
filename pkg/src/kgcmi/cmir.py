"""Cross-modal Mamba interaction: selective scan, CMM blocks, tripartite fusion.

Also holds the analytic operation counts for the CMM unit and the
cross-attention baseline it is compared against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, NumericError, ShapeError

STREAMS = ("z", "tz", "k", "tk")


@dataclass
class CmmOutputs:
    z_t2z: np.ndarray
    t_z2t: np.ndarray
    k_t2k: np.ndarray
    t_k2t: np.ndarray

    def as_tuple(self):
        return self.z_t2z, self.t_z2t, self.k_t2k, self.t_k2t


@dataclass(frozen=True)
class FusionWeights:
    eta: float = 0.1
    theta: float = 0.1

    def __post_init__(self):
        if self.eta < 0 or self.theta < 0:
            raise ConfigError(f"fusion weights must be nonnegative (eta={self.eta}, theta={self.theta})")


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def init_ssm(rng: np.random.Generator, d: int, state: int = 16) -> dict[str, np.ndarray]:
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d))
    return {
        "w_delta": 0.1 * nm.init_weight(rng, d, d),
        "b_delta": _inv_softplus(dt),
        "w_b": nm.init_weight(rng, d, state),
        "w_c": nm.init_weight(rng, d, state),
        "a_log": np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (d, 1))),
        "d_skip": np.ones(d),
        "w_gate": nm.init_weight(rng, d, d),
        "b_gate": np.zeros(d),
        "w_fus": nm.init_weight(rng, d, d),
    }


def init_cmir(rng: np.random.Generator, d: int, state: int = 16, num_blocks: int = 2) -> dict[str, np.ndarray]:
    p = {}
    for b in range(num_blocks):
        for s in STREAMS:
            for k, v in init_ssm(rng, d, state).items():
                p[f"block{b}.{s}.{k}"] = v
    return p


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# selective scan
# --------------------------------------------------------------------------


def selective_scan(params, u: np.ndarray, cond: np.ndarray):
    """Diagonal selective SSM over the sequence axis, driven by ``cond``.

    h_l = exp(dt_l A) h_{l-1} + dt_l B_l u_l,  y_l = C_l h_l + D u_l, with
    dt = softplus(cond W_delta + b_delta), B = cond W_B, C = cond W_C.
    Returns (y [B, L, d], cache).
    """
    if u.shape != cond.shape or u.ndim != 3:
        raise ShapeError(f"selective_scan needs matching [B, L, d] inputs, got {u.shape} and {cond.shape}")
    pre = cond @ params["w_delta"] + params["b_delta"]
    dt = nm.softplus(pre)
    bm = cond @ params["w_b"]
    cm = cond @ params["w_c"]
    a = -np.exp(params["a_log"])
    decay = np.exp(dt[..., None] * a)
    inp = (dt * u)[..., None] * bm[:, :, None, :]
    hs = np.empty_like(decay)
    h = np.zeros(decay.shape[:1] + decay.shape[2:])
    for l in range(u.shape[1]):
        h = decay[:, l] * h + inp[:, l]
        hs[:, l] = h
    if not np.isfinite(hs).all():
        bad = int(np.argwhere(~np.isfinite(hs))[0][1])
        raise NumericError(f"non-finite scan state at step {bad}")
    y = (hs @ cm[..., None])[..., 0] + u * params["d_skip"]
    return y, (u, cond, pre, dt, bm, cm, a, decay, hs)


def selective_scan_backward(dy: np.ndarray, params, cache):
    """Returns (param grads, du, dcond)."""
    u, cond, pre, dt, bm, cm, a, decay, hs = cache
    grads = {"d_skip": np.sum(dy * u, axis=(0, 1))}
    du = dy * params["d_skip"]
    dcm = np.einsum("bld,bldn->bln", dy, hs)
    direct = dy[..., None] * cm[:, :, None, :]
    dh = np.empty_like(hs)
    carry = np.zeros_like(hs[:, 0])
    for l in range(u.shape[1] - 1, -1, -1):
        carry = direct[:, l] + carry
        dh[:, l] = carry
        carry = carry * decay[:, l]
    hs_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
    dlog_decay = dh * hs_prev * decay  # d/d(dt * A)
    ddt = np.sum(dlog_decay * a, axis=-1) + np.sum(dh * bm[:, :, None, :], axis=-1) * u
    du += np.sum(dh * bm[:, :, None, :], axis=-1) * dt
    dbm = np.einsum("bldn,bld->bln", dh, dt * u)
    grads["a_log"] = np.sum(dlog_decay * dt[..., None], axis=(0, 1)) * a
    dpre = ddt * nm.sigmoid(pre)
    dcond, grads["w_delta"], grads["b_delta"] = nm.linear_backward(dpre, cond, params["w_delta"])
    dc_b, grads["w_b"], _ = nm.linear_backward(dbm, cond, params["w_b"])
    dc_c, grads["w_c"], _ = nm.linear_backward(dcm, cond, params["w_c"])
    return grads, du, dcond + dc_b + dc_c


# --------------------------------------------------------------------------
# gated cross Mamba and CMM blocks
# --------------------------------------------------------------------------


def mamba_cross(params, x: np.ndarray, cond: np.ndarray):
    """silu(cond W_g + b_g) * selective_scan(x, cond); returns (y, cache)."""
    if x.shape != cond.shape:
        raise ShapeError(f"mamba_cross shapes differ: {x.shape} vs {cond.shape}")
    s, scan_cache = selective_scan(params, x, cond)
    gp = cond @ params["w_gate"] + params["b_gate"]
    return nm.silu(gp) * s, (cond, s, gp, scan_cache)


def mamba_cross_backward(dy: np.ndarray, params, cache):
    cond, s, gp, scan_cache = cache
    grads, dx, dcond = selective_scan_backward(dy * nm.silu(gp), params, scan_cache)
    dgp = dy * s * nm.silu_grad(gp)
    dcg, grads["w_gate"], grads["b_gate"] = nm.linear_backward(dgp, cond, params["w_gate"])
    return grads, dx, dcond + dcg


def cmm_unit(params, x: np.ndarray, other: np.ndarray):
    """Fus(Mamba(x, x * pool(other))) + x, pooling ``other`` over its sequence axis."""
    if x.shape[0] != other.shape[0] or x.shape[2] != other.shape[2]:
        raise ShapeError(f"cannot pair streams of shape {x.shape} and {other.shape}")
    pooled = other.mean(axis=1, keepdims=True)
    cond = x * pooled
    m, mc = mamba_cross(params, x, cond)
    return m @ params["w_fus"] + x, (x, other.shape[1], pooled, m, mc)


def cmm_unit_backward(dout: np.ndarray, params, cache):
    """Returns (param grads, dx, d other)."""
    x, l_other, pooled, m, mc = cache
    dm, dw_fus, _ = nm.linear_backward(dout, m, params["w_fus"])
    grads, dx, dcond = mamba_cross_backward(dm, params, mc)
    grads["w_fus"] = dw_fus
    dx = dx + dout + dcond * pooled
    dpooled = np.sum(dcond * x, axis=1, keepdims=True)
    dother = np.repeat(dpooled / l_other, l_other, axis=1)
    return grads, dx, dother


def cmm_block(params, z: np.ndarray, t: np.ndarray, k: np.ndarray, t_k: np.ndarray | None = None):
    """One CMM block. ``t`` feeds the vision pair; ``t_k`` (default ``t``) the knowledge pair.

    ``params`` holds the four unit parameter sets under ``z.``, ``tz.``,
    ``k.`` and ``tk.``. Returns (CmmOutputs, cache).
    """
    if not (z.shape[2] == t.shape[2] == k.shape[2]):
        raise ShapeError(f"stream dims differ: z {z.shape}, t {t.shape}, k {k.shape}")
    shared_t = t_k is None
    t_k = t if shared_t else t_k
    outs, caches = [], []
    for name, (x, other) in zip(STREAMS, ((z, t), (t, z), (k, t_k), (t_k, k))):
        try:
            o, c = cmm_unit(_sub(params, name + "."), x, other)
        except ShapeError as exc:
            raise ShapeError(f"stream pair {name}: {exc}") from exc
        outs.append(o)
        caches.append(c)
    return CmmOutputs(*outs), (caches, shared_t)


def cmm_block_backward(douts: CmmOutputs, params, cache):
    """Returns (param grads, dz, dt, dk, dt_k); dt_k is None when ``t`` was shared."""
    caches, shared_t = cache
    grads = {}
    d_in = []
    for name, dout, c in zip(STREAMS, douts.as_tuple(), caches):
        g, dx, dother = cmm_unit_backward(dout, _sub(params, name + "."), c)
        grads.update({f"{name}.{key}": val for key, val in g.items()})
        d_in.append((dx, dother))
    (dz1, dt1), (dt2, dz2), (dk1, dtk1), (dtk2, dk2) = d_in
    dz = dz1 + dz2
    dk = dk1 + dk2
    dt = dt1 + dt2
    dtk = dtk1 + dtk2
    if shared_t:
        return grads, dz, dt + dtk, dk, None
    return grads, dz, dt, dk, dtk


def cmm_stack(params, z, t, k, num_blocks: int | None = None):
    """Apply ``num_blocks`` CMM blocks, streams re-entering in their named roles."""
    if num_blocks is None:
        num_blocks = sum(1 for key in params if key.endswith(".z.w_fus"))
    caches = []
    t_k = None
    for b in range(num_blocks):
        out, c = cmm_block(_sub(params, f"block{b}."), z, t, k, t_k)
        caches.append(c)
        z, t, k, t_k = out.as_tuple()
    return out, caches


def cmm_stack_backward(douts: CmmOutputs, params, caches):
    """Returns (param grads, dz', dt', dk'')."""
    grads = {}
    for b in reversed(range(len(caches))):
        g, dz, dt, dk, dtk = cmm_block_backward(douts, _sub(params, f"block{b}."), caches[b])
        grads.update({f"block{b}.{key}": val for key, val in g.items()})
        if dtk is not None:
            douts = CmmOutputs(dz, dt, dk, dtk)
    return grads, dz, dt, dk


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------


def fuse_tripartite(outputs: CmmOutputs, w: FusionWeights) -> np.ndarray:
    """x_text = t_z2t + eta t_k2t + theta pool(k_t2k); x_f = [z_t2z ; x_text]."""
    if outputs.t_z2t.shape != outputs.t_k2t.shape:
        raise ShapeError(f"text streams differ: {outputs.t_z2t.shape} vs {outputs.t_k2t.shape}")
    if w.eta < 0 or w.theta < 0:
        raise ConfigError("fusion weights must be nonnegative")
    k_aligned = outputs.k_t2k.mean(axis=1, keepdims=True)
    x_text = outputs.t_z2t + w.eta * outputs.t_k2t + w.theta * k_aligned
    return np.concatenate([outputs.z_t2z, x_text], axis=1)


def fuse_tripartite_backward(dx_f: np.ndarray, outputs: CmmOutputs, w: FusionWeights) -> CmmOutputs:
    lq = outputs.z_t2z.shape[1]
    n_k = outputs.k_t2k.shape[1]
    dxt = dx_f[:, lq:]
    dk = np.repeat(w.theta * dxt.sum(axis=1, keepdims=True) / n_k, n_k, axis=1)
    return CmmOutputs(dx_f[:, :lq].copy(), dxt.copy(), dk, w.eta * dxt)


# --------------------------------------------------------------------------
# cross-attention baseline and operation counts
# --------------------------------------------------------------------------


def init_cross_attention(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    return {k: nm.init_weight(rng, d, d) for k in ("wq", "wk", "wv", "wo")}


def cross_attention_forward(params, x: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Single-head Transformer cross-attention of ``x`` into ``other`` plus residual."""
    out, _ = nm.attention(x @ params["wq"], other @ params["wk"], other @ params["wv"])
    return out @ params["wo"] + x


def flop_terms(arch: str, L: int, d: int, N: int = 16) -> dict[str, int]:
    """Multiply-accumulate counts per term for one fusion unit over length-L streams."""
    if min(L, d, N) <= 0:
        raise ValueError("L, d and N must be positive")
    if arch == "cmm":
        return {
            "condition": 2 * L * d,  # mean-pool of the partner stream, elementwise product
            "projections": L * d * (2 * d + 2 * N),  # delta, gate (d each); B, C (N each)
            "scan": 4 * L * d * N,  # dt*A, decay*h, dt*B*u, C.h
            "skip_gate": 2 * L * d,
            "fus": L * d * d,
        }
    if arch == "cross_attention":
        return {
            "projections": 4 * L * d * d,  # Q, K, V, output
            "scores": L * L * d,
            "softmax": L * L,
            "weighted_sum": L * L * d,
        }
    raise ValueError(f"unknown architecture {arch!r}")


def flop_count(arch: str, L: int, d: int, N: int = 16) -> int:
    return sum(flop_terms(arch, L, d, N).values())
