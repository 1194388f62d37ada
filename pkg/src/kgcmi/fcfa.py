"""Question-aware Q-Former and the bidirectional visual-text contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    reduce: str = "max"  # how the L_q query similarities collapse to one score

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"contrastive temperature must be positive, got {self.temperature}")
        if self.reduce not in ("max", "mean"):
            raise ConfigError(f"unknown similarity reduction {self.reduce!r}")


_LAYER_KEYS_2D = ("self.wq", "self.wk", "self.wv", "cross.wq", "cross.wk", "cross.wv", "mlp.w1", "mlp.w2")
_LN_NAMES = ("ln1", "ln2", "lnv", "ln3")


def init_qqformer(rng: np.random.Generator, d: int, num_queries: int = 32, layers: int = 1) -> dict[str, np.ndarray]:
    p = {"queries": rng.normal(0.0, 1.0, size=(num_queries, d))}
    for i in range(layers):
        pre = f"layer{i}."
        for key in _LAYER_KEYS_2D:
            p[pre + key] = nm.init_weight(rng, d, d)
        p[pre + "mlp.b1"] = np.zeros(d)
        p[pre + "mlp.b2"] = np.zeros(d)
        for ln in _LN_NAMES:
            p[pre + ln + ".g"] = np.ones(d)
            p[pre + ln + ".b"] = np.zeros(d)
    return p


def num_layers(params) -> int:
    return sum(1 for k in params if k.endswith("self.wq"))


def _layer_forward(p, pre, zq, t, v, residual):
    T = t.shape[1]
    c = {"residual": residual, "T": T}
    kv_in = np.concatenate([t, zq], axis=1)
    if residual:
        h1, c["ln1"] = nm.layer_norm(kv_in, p[pre + "ln1.g"], p[pre + "ln1.b"])
    else:
        h1 = kv_in
    c["h1"] = h1
    qs = h1[:, T:] @ p[pre + "self.wq"]
    ks = h1 @ p[pre + "self.wk"]
    vs = h1 @ p[pre + "self.wv"]
    a_s, c["att_s"] = nm.attention(qs, ks, vs)
    z_self = zq + a_s if residual else a_s

    if residual:
        h2, c["ln2"] = nm.layer_norm(z_self, p[pre + "ln2.g"], p[pre + "ln2.b"])
        hv, c["lnv"] = nm.layer_norm(v, p[pre + "lnv.g"], p[pre + "lnv.b"])
    else:
        h2, hv = z_self, v
    c["h2"], c["hv"] = h2, hv
    qc = h2 @ p[pre + "cross.wq"]
    kc = hv @ p[pre + "cross.wk"]
    vc = hv @ p[pre + "cross.wv"]
    a_c, c["att_c"] = nm.attention(qc, kc, vc)
    z_cross = z_self + a_c if residual else a_c

    if residual:
        h3, c["ln3"] = nm.layer_norm(z_cross, p[pre + "ln3.g"], p[pre + "ln3.b"])
    else:
        h3 = z_cross
    c["h3"] = h3
    u = nm.linear(h3, p[pre + "mlp.w1"], p[pre + "mlp.b1"])
    g = nm.gelu(u)
    c["u"], c["g"] = u, g
    m = nm.linear(g, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    z_f = z_cross + m if residual else m
    c["z_self"] = z_self
    return z_f, c


def _layer_backward(dz_f, p, pre, c, grads):
    residual, T = c["residual"], c["T"]
    dg, grads[pre + "mlp.w2"], grads[pre + "mlp.b2"] = nm.linear_backward(dz_f, c["g"], p[pre + "mlp.w2"])
    du = nm.gelu_backward(dg, c["u"])
    dh3, grads[pre + "mlp.w1"], grads[pre + "mlp.b1"] = nm.linear_backward(du, c["h3"], p[pre + "mlp.w1"])
    if residual:
        dz_cross, grads[pre + "ln3.g"], grads[pre + "ln3.b"] = nm.layer_norm_backward(dh3, c["ln3"])
        dz_cross = dz_cross + dz_f
    else:
        dz_cross = dh3

    dqc, dkc, dvc = nm.attention_backward(dz_cross, c["att_c"])
    dh2, grads[pre + "cross.wq"], _ = nm.linear_backward(dqc, c["h2"], p[pre + "cross.wq"])
    dhv_k, grads[pre + "cross.wk"], _ = nm.linear_backward(dkc, c["hv"], p[pre + "cross.wk"])
    dhv_v, grads[pre + "cross.wv"], _ = nm.linear_backward(dvc, c["hv"], p[pre + "cross.wv"])
    dhv = dhv_k + dhv_v
    if residual:
        dz_self, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = nm.layer_norm_backward(dh2, c["ln2"])
        dz_self = dz_self + dz_cross
        dv, grads[pre + "lnv.g"], grads[pre + "lnv.b"] = nm.layer_norm_backward(dhv, c["lnv"])
    else:
        dz_self, dv = dh2, dhv

    dqs, dks, dvs = nm.attention_backward(dz_self, c["att_s"])
    h1 = c["h1"]
    dh1_q, grads[pre + "self.wq"], _ = nm.linear_backward(dqs, h1[:, T:], p[pre + "self.wq"])
    dh1_k, grads[pre + "self.wk"], _ = nm.linear_backward(dks, h1, p[pre + "self.wk"])
    dh1_v, grads[pre + "self.wv"], _ = nm.linear_backward(dvs, h1, p[pre + "self.wv"])
    dh1 = dh1_k + dh1_v
    dh1[:, T:] += dh1_q
    if residual:
        dkv, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = nm.layer_norm_backward(dh1, c["ln1"])
    else:
        dkv = dh1
    dt = dkv[:, :T]
    dzq = dkv[:, T:]
    if residual:
        dzq = dzq + dz_self
    return dzq, dt, dv


def qqformer_forward(params, t: np.ndarray, v: np.ndarray, residual: bool = True):
    """Queries attend to [text; queries], then into the visual tokens, then a GELU MLP.

    ``t`` is the question token sequence [B, T, d] and ``v`` the visual token
    sequence [B, L_v, d]. Returns ``(z_f [B, L_q, d], cache)``.
    """
    queries = params["queries"]
    if t.ndim != 3 or v.ndim != 3:
        raise ShapeError("qqformer_forward expects [B, L, d] text and visual features")
    if t.shape[0] != v.shape[0]:
        raise ShapeError(f"text batch {t.shape[0]} != visual batch {v.shape[0]}")
    if not (t.shape[2] == v.shape[2] == queries.shape[1]):
        raise ShapeError(f"feature dims differ: text {t.shape[2]}, visual {v.shape[2]}, queries {queries.shape[1]}")
    B = t.shape[0]
    z = np.broadcast_to(queries, (B,) + queries.shape).copy()
    caches = []
    for i in range(num_layers(params)):
        z, c = _layer_forward(params, f"layer{i}.", z, t, v, residual)
        caches.append(c)
    return z, caches


def qqformer_backward(dz_f: np.ndarray, params, caches):
    """Returns (param grads, dt, dv)."""
    grads = {k: np.zeros_like(val) for k, val in params.items()}
    dt_total = dv_total = 0.0
    dz = dz_f
    for i in reversed(range(len(caches))):
        dz, dt, dv = _layer_backward(dz, params, f"layer{i}.", caches[i], grads)
        dt_total = dt_total + dt
        dv_total = dv_total + dv
    grads["queries"] = dz.sum(axis=0)
    return grads, dt_total, dv_total


# --------------------------------------------------------------------------
# contrastive alignment
# --------------------------------------------------------------------------


def _unit(x: np.ndarray, what: str):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        idx = tuple(int(i) for i in np.argwhere(norm[..., 0] == 0)[0])
        raise NumericError(f"zero-norm {what} vector at index {idx}")
    return x / norm, norm


def pair_similarity(z_f_row: np.ndarray, t_summary: np.ndarray, reduce: str = "max") -> float:
    """Cosine similarity between a text vector and the best-matching query."""
    zn, _ = _unit(np.asarray(z_f_row, dtype=np.float64), "query")
    tn, _ = _unit(np.asarray(t_summary, dtype=np.float64), "text")
    cos = zn @ tn
    return float(cos.max() if reduce == "max" else cos.mean())


def similarity_matrix(z_f: np.ndarray, t_summaries: np.ndarray, reduce: str = "max"):
    """S[i, j] = reduce_q cos(z_f[i, q], t[j]); returns (S, cache)."""
    zn, znorm = _unit(z_f, "query")
    tn, tnorm = _unit(t_summaries, "text")
    cos = np.einsum("iqd,jd->iqj", zn, tn)
    if reduce == "max":
        arg = cos.argmax(axis=1)  # [B_i, B_j]
        s = np.take_along_axis(cos, arg[:, None, :], axis=1)[:, 0, :]
    else:
        arg = None
        s = cos.mean(axis=1)
    return s, (zn, znorm, tn, tnorm, cos, arg, reduce)


def similarity_matrix_backward(ds: np.ndarray, cache):
    zn, znorm, tn, tnorm, cos, arg, reduce = cache
    if reduce == "max":
        dcos = np.zeros_like(cos)
        np.put_along_axis(dcos, arg[:, None, :], ds[:, None, :], axis=1)
    else:
        dcos = np.broadcast_to(ds[:, None, :] / cos.shape[1], cos.shape)
    dzn = np.einsum("iqj,jd->iqd", dcos, tn)
    dtn = np.einsum("iqj,iqd->jd", dcos, zn)
    dz = (dzn - np.sum(dzn * zn, -1, keepdims=True) * zn) / znorm
    dt = (dtn - np.sum(dtn * tn, -1, keepdims=True) * tn) / tnorm
    return dz, dt


def contrastive_from_similarity(s: np.ndarray, temperature: float):
    """(L_vtc, L_v2t, L_t2v, dL_vtc/ds) for a square similarity matrix."""
    if not temperature > 0:
        raise ConfigError(f"contrastive temperature must be positive, got {temperature}")
    logits = s / temperature
    lr = nm.log_softmax(logits, axis=1)
    lc = nm.log_softmax(logits, axis=0)
    l_v2t = -float(np.trace(lr))
    l_t2v = -float(np.trace(lc))
    eye = np.eye(s.shape[0])
    dlogits = 0.5 * ((np.exp(lr) - eye) + (np.exp(lc) - eye))
    return 0.5 * (l_v2t + l_t2v), l_v2t, l_t2v, dlogits / temperature


def contrastive_loss(z_f: np.ndarray, t_summaries: np.ndarray, cfg: ContrastiveConfig | None = None):
    """Bidirectional InfoNCE over the batch.

    Returns ``((L_vtc, L_v2t, L_t2v), cache)``; feed ``cache`` to
    :func:`contrastive_backward` for d L_vtc.
    """
    cfg = cfg or ContrastiveConfig()
    if z_f.shape[0] < 1 or z_f.shape[0] != t_summaries.shape[0]:
        raise ShapeError(f"batch mismatch: {z_f.shape[0]} query sets vs {t_summaries.shape[0]} texts")
    s, sim_cache = similarity_matrix(z_f, t_summaries, cfg.reduce)
    l_vtc, l_v2t, l_t2v, ds = contrastive_from_similarity(s, cfg.temperature)
    return (l_vtc, l_v2t, l_t2v), (sim_cache, ds)


def contrastive_backward(dloss: float, cache):
    """Returns (d z_f, d t_summaries) scaled by ``dloss``."""
    sim_cache, ds = cache
    return similarity_matrix_backward(dloss * ds, sim_cache)
