"""Multi-task heads: answer classifier, mask-gated auxiliary decoder, total objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoders import sinusoidal_positions
from .errors import ConfigError, InputError, ShapeError


# --------------------------------------------------------------------------
# classification head
# --------------------------------------------------------------------------


def init_classifier(rng: np.random.Generator, d: int, num_answers: int, hidden: int | None = None):
    hidden = hidden or d
    return {
        "w1": nm.init_weight(rng, d, hidden),
        "b1": np.zeros(hidden),
        "ln.g": np.ones(hidden),
        "ln.b": np.zeros(hidden),
        "w2": nm.init_weight(rng, hidden, num_answers),
        "b2": np.zeros(num_answers),
    }


def classify(params, x_f: np.ndarray):
    """Mean-pool x_f, then linear -> layer norm -> GELU -> linear. Returns (logits, cache)."""
    if x_f.ndim != 3 or x_f.shape[2] != params["w1"].shape[0]:
        raise ShapeError(f"fused features {x_f.shape} do not match classifier input {params['w1'].shape[0]}")
    if not np.isfinite(x_f).all():
        raise InputError("non-finite fused features")
    pooled = x_f.mean(axis=1)
    u = nm.linear(pooled, params["w1"], params["b1"])
    n, ln_cache = nm.layer_norm(u, params["ln.g"], params["ln.b"])
    g = nm.gelu(n)
    logits = nm.linear(g, params["w2"], params["b2"])
    return logits, (x_f.shape[1], pooled, ln_cache, n, g)


def classify_backward(dlogits: np.ndarray, params, cache):
    """Returns (param grads, d x_f)."""
    seq_len, pooled, ln_cache, n, g = cache
    grads = {}
    dg, grads["w2"], grads["b2"] = nm.linear_backward(dlogits, g, params["w2"])
    dn = nm.gelu_backward(dg, n)
    du, grads["ln.g"], grads["ln.b"] = nm.layer_norm_backward(dn, ln_cache)
    dpooled, grads["w1"], grads["b1"] = nm.linear_backward(du, pooled, params["w1"])
    dx = np.repeat(dpooled[:, None, :] / seq_len, seq_len, axis=1)
    return grads, dx


def classification_loss(logits: np.ndarray, answer_index, mode: str = "bce"):
    """Returns (L_cls, dL/dlogits).

    ``bce``: one-vs-all sigmoid binary cross-entropy against the one-hot
    target, averaged over classes and then over the batch. ``ce``: softmax
    cross-entropy averaged over the batch.
    """
    logits = np.atleast_2d(logits)
    idx = np.atleast_1d(np.asarray(answer_index))
    B, A = logits.shape
    if idx.shape != (B,):
        raise ShapeError(f"{idx.shape[0]} answer indices for a batch of {B}")
    if idx.min() < 0 or idx.max() >= A:
        raise InputError(f"answer index out of range [0, {A})")
    y = np.zeros_like(logits)
    y[np.arange(B), idx] = 1.0
    if mode == "bce":
        loss = float(np.mean(nm.softplus(logits) - logits * y))
        return loss, (nm.sigmoid(logits) - y) / (B * A)
    if mode == "ce":
        ls = nm.log_softmax(logits, axis=1)
        loss = -float(np.mean(ls[np.arange(B), idx]))
        return loss, (np.exp(ls) - y) / B
    raise ConfigError(f"unknown classification loss {mode!r}")


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(logits), axis=1)


# --------------------------------------------------------------------------
# auxiliary decoder
# --------------------------------------------------------------------------

BOS = 0


def init_aux_head(rng: np.random.Generator, d: int, fused_len: int, vocab_size: int):
    p = {"mask": np.ones(fused_len), "emb": rng.normal(0.0, 1.0, size=(vocab_size, d))}
    for ln in ("ln1", "ln2", "ln3"):
        p[ln + ".g"] = np.ones(d)
        p[ln + ".b"] = np.zeros(d)
    for key in ("self.wq", "self.wk", "self.wv", "cross.wq", "cross.wk", "cross.wv"):
        p[key] = nm.init_weight(rng, d, d)
    p["out.w"] = nm.init_weight(rng, d, vocab_size)
    p["out.b"] = np.zeros(vocab_size)
    return p


@dataclass
class _DecodeCache:
    x: np.ndarray
    xm: np.ndarray
    ids_in: np.ndarray
    tgt: np.ndarray
    probs: np.ndarray = None
    parts: dict = field(default_factory=dict)


def _decode(params, x: np.ndarray, ids_in: np.ndarray):
    """Teacher-forced decoder pass for one sample; returns (logits, partial cache)."""
    gate = nm.sigmoid(params["mask"])
    xm = x * gate[:, None]
    n = len(ids_in)
    c = {}
    h0 = params["emb"][ids_in] + sinusoidal_positions(n, x.shape[1])
    a1, c["ln1"] = nm.layer_norm(h0, params["ln1.g"], params["ln1.b"])
    causal = np.tril(np.ones((n, n), dtype=bool))
    sa, c["att_s"] = nm.attention(a1 @ params["self.wq"], a1 @ params["self.wk"], a1 @ params["self.wv"], mask=causal)
    h1 = h0 + sa
    a2, c["ln2"] = nm.layer_norm(h1, params["ln2.g"], params["ln2.b"])
    ca, c["att_c"] = nm.attention(a2 @ params["cross.wq"], xm @ params["cross.wk"], xm @ params["cross.wv"])
    h2 = h1 + ca
    a3, c["ln3"] = nm.layer_norm(h2, params["ln3.g"], params["ln3.b"])
    logits = a3 @ params["out.w"] + params["out.b"]
    c.update(a1=a1, a2=a2, a3=a3, gate=gate)
    return logits, xm, c


def _decode_backward(dlogits, params, dc: _DecodeCache, grads):
    c = dc.parts
    da3, dw, db = nm.linear_backward(dlogits, c["a3"], params["out.w"])
    grads["out.w"] += dw
    grads["out.b"] += db
    dh2, dg, dbb = nm.layer_norm_backward(da3, c["ln3"])
    grads["ln3.g"] += dg
    grads["ln3.b"] += dbb

    dq, dk, dv = nm.attention_backward(dh2, c["att_c"])
    da2, dw, _ = nm.linear_backward(dq, c["a2"], params["cross.wq"])
    grads["cross.wq"] += dw
    dxm_k, dw, _ = nm.linear_backward(dk, dc.xm, params["cross.wk"])
    grads["cross.wk"] += dw
    dxm_v, dw, _ = nm.linear_backward(dv, dc.xm, params["cross.wv"])
    grads["cross.wv"] += dw
    dxm = dxm_k + dxm_v
    dh1, dg, dbb = nm.layer_norm_backward(da2, c["ln2"])
    grads["ln2.g"] += dg
    grads["ln2.b"] += dbb
    dh1 = dh1 + dh2

    dq, dk, dv = nm.attention_backward(dh1, c["att_s"])
    a1 = c["a1"]
    da1 = np.zeros_like(a1)
    for key, dpart in (("self.wq", dq), ("self.wk", dk), ("self.wv", dv)):
        dpart_in, dw, _ = nm.linear_backward(dpart, a1, params[key])
        grads[key] += dw
        da1 += dpart_in
    dh0, dg, dbb = nm.layer_norm_backward(da1, c["ln1"])
    grads["ln1.g"] += dg
    grads["ln1.b"] += dbb
    dh0 = dh0 + dh1
    np.add.at(grads["emb"], dc.ids_in, dh0)

    gate = c["gate"]
    grads["mask"] += np.sum(dxm * dc.x, axis=1) * gate * (1.0 - gate)
    return dxm * gate[:, None]


def aux_loss(params, x_f: np.ndarray, is_open, answer_tokens):
    """Mask-gated teacher-forced cross-entropy over the open-ended samples only.

    ``is_open`` flags each batch row; ``answer_tokens[i]`` is the target token
    sequence for row i (ignored for closed rows). Returns (L_aux, cache); the
    loss is 0 when the batch holds no open-ended sample.
    """
    is_open = np.asarray(is_open, dtype=bool)
    if is_open.shape != (x_f.shape[0],):
        raise ShapeError(f"{is_open.shape} question-type flags for a batch of {x_f.shape[0]}")
    if params["mask"].shape[0] != x_f.shape[1]:
        raise ShapeError(f"mask length {params['mask'].shape[0]} != fused length {x_f.shape[1]}")
    rows = np.flatnonzero(is_open)
    caches = []
    total = 0.0
    for i in rows:
        tgt = np.asarray(answer_tokens[i], dtype=np.int64)
        if tgt.size == 0:
            raise InputError(f"open-ended sample {i} has no answer tokens")
        if tgt.min() < 0 or tgt.max() >= params["emb"].shape[0]:
            raise InputError(f"answer token out of range for sample {i}")
        ids_in = np.concatenate([[BOS], tgt[:-1]])
        logits, xm, parts = _decode(params, x_f[i], ids_in)
        ls = nm.log_softmax(logits, axis=1)
        total += -float(np.mean(ls[np.arange(len(tgt)), tgt]))
        caches.append((i, _DecodeCache(x_f[i], xm, ids_in, tgt, np.exp(ls), parts)))
    loss = total / len(rows) if len(rows) else 0.0
    return loss, (x_f.shape, caches)


def aux_loss_backward(dloss: float, params, cache):
    """Returns (param grads, d x_f)."""
    shape, caches = cache
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dx = np.zeros(shape)
    n_open = len(caches)
    for i, dc in caches:
        n = len(dc.tgt)
        dlogits = dc.probs.copy()
        dlogits[np.arange(n), dc.tgt] -= 1.0
        dlogits *= dloss / (n * n_open)
        dx[i] = _decode_backward(dlogits, params, dc, grads)
    return grads, dx


def greedy_decode(params, x: np.ndarray, max_len: int, eos: int | None = None) -> list[int]:
    """Diagnostic free-form generation for one fused sequence [L_f, d]."""
    ids = [BOS]
    out = []
    for _ in range(max_len):
        logits, _, _ = _decode(params, x, np.asarray(ids))
        tok = int(np.argmax(logits[-1]))
        if eos is not None and tok == eos:
            break
        out.append(tok)
        ids.append(tok)
    return out


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def total_loss(l_cls: float, l_vtc: float, l_aux: float, alpha: float = 0.2, beta: float = 0.3) -> float:
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be nonnegative (alpha={alpha}, beta={beta})")
    return l_cls + alpha * l_vtc + beta * l_aux
