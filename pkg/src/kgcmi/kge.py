"""Knowledge graph: schema, adjacency rules, a single-head GAT and knowledge retrieval."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nm
from .errors import GraphError, ShapeError

NODE_KINDS = ("global", "organ", "finding")


@dataclass(frozen=True)
class Node:
    id: int
    label: str
    kind: str
    organ: int | None = None


class KnowledgeGraph:
    """Three-tier graph: one global node, organ nodes, and findings that name an organ."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes: list[Node] = sorted(nodes, key=lambda n: n.id)
        self.validate()

    def __len__(self) -> int:
        return len(self.nodes)

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise GraphError(f"node {dup}: duplicate id")
        for pos, n in enumerate(self.nodes):
            if n.id != pos:
                raise GraphError(f"node {n.id}: ids must be dense 0..{len(ids) - 1}")
            if n.kind not in NODE_KINDS:
                raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")
            if not isinstance(n.label, str) or not n.label.strip():
                raise GraphError(f"node {n.id}: empty label")
        n_global = sum(n.kind == "global" for n in self.nodes)
        if n_global != 1:
            raise GraphError(f"expected exactly one global node, found {n_global}")
        by_id = {n.id: n for n in self.nodes}
        for n in self.nodes:
            if n.kind == "finding":
                if n.organ is None or n.organ not in by_id or by_id[n.organ].kind != "organ":
                    raise GraphError(f"node {n.id}: finding references missing organ {n.organ}")
            elif n.organ is not None:
                raise GraphError(f"node {n.id}: only findings may reference an organ")

    @property
    def global_id(self) -> int:
        return next(n.id for n in self.nodes if n.kind == "global")

    def organs(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "organ"]

    def findings_of(self, organ_id: int) -> list[Node]:
        return [n for n in self.nodes if n.kind == "finding" and n.organ == organ_id]

    # -- serialization -----------------------------------------------------

    @classmethod
    def from_dict(cls, data) -> "KnowledgeGraph":
        if not isinstance(data, dict) or not isinstance(data.get("nodes"), list):
            raise GraphError('graph JSON must be an object with a "nodes" list')
        nodes = []
        for i, raw in enumerate(data["nodes"]):
            if not isinstance(raw, dict):
                raise GraphError(f"entry {i}: node must be an object")
            nid = raw.get("id")
            if not isinstance(nid, int) or isinstance(nid, bool):
                raise GraphError(f"entry {i}: node id must be an integer, got {nid!r}")
            for key in ("label", "kind"):
                if not isinstance(raw.get(key), str):
                    raise GraphError(f"node {nid}: field {key!r} must be a string")
            organ = raw.get("organ")
            if organ is not None and (not isinstance(organ, int) or isinstance(organ, bool)):
                raise GraphError(f"node {nid}: organ must be an integer or null")
            nodes.append(Node(nid, raw["label"], raw["kind"], organ))
        return cls(nodes)

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {"nodes": [{"id": n.id, "label": n.label, "kind": n.kind, "organ": n.organ} for n in self.nodes]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def bundled_graph() -> KnowledgeGraph:
    from importlib.resources import files

    return KnowledgeGraph.from_dict(json.loads(files("kgcmi.data").joinpath("example_kg.json").read_text()))


def build_adjacency(graph: KnowledgeGraph) -> np.ndarray:
    """Binary symmetric adjacency with self-loops.

    Edges: global-organ, organ-finding (own organ), finding-finding (same
    organ), finding-global.
    """
    n = len(graph)
    adj = np.eye(n, dtype=np.int8)
    g = graph.global_id
    by_id = {node.id: node for node in graph.nodes}
    for node in graph.nodes:
        if node.kind == "organ":
            adj[g, node.id] = adj[node.id, g] = 1
        elif node.kind == "finding":
            if node.organ not in by_id:
                raise GraphError(f"node {node.id}: finding references missing organ {node.organ}")
            adj[node.organ, node.id] = adj[node.id, node.organ] = 1
            adj[g, node.id] = adj[node.id, g] = 1
    for organ in graph.organs():
        members = [f.id for f in graph.findings_of(organ.id)]
        for i in members:
            for j in members:
                adj[i, j] = 1
    return np.maximum(adj, adj.T)


# --------------------------------------------------------------------------
# graph attention
# --------------------------------------------------------------------------


def init_gat(rng: np.random.Generator, d: int, layers: int = 1) -> dict[str, np.ndarray]:
    p = {}
    for i in range(layers):
        p[f"layer{i}.w"] = nm.init_weight(rng, d, d)
        p[f"layer{i}.a"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=2 * d)
    return p


def _gat_layer(w, a, f, adj, slope):
    d = w.shape[1]
    h = f @ w
    e = (h @ a[:d])[:, None] + (h @ a[d:])[None, :]
    mask = adj.astype(bool)
    if not mask.any(axis=1).all():
        raise GraphError("node without any neighbor (missing self-loop)")
    alpha = nm.softmax(nm.leaky_relu(e, slope), axis=1, mask=mask)
    return alpha @ h, (f, h, e, alpha, mask)


def gat_forward(params, f_od: np.ndarray, adj: np.ndarray, slope: float = 0.2):
    """GAT over ``f_od`` [N_v, d]; returns (f_g, cache)."""
    if f_od.ndim != 2 or f_od.shape[0] != adj.shape[0]:
        raise ShapeError(f"node features {f_od.shape} do not match adjacency {adj.shape}")
    if not 0 < slope < 1:
        raise ValueError(f"LeakyReLU slope must lie in (0, 1), got {slope}")
    caches = []
    x = f_od
    i = 0
    while f"layer{i}.w" in params:
        x, c = _gat_layer(params[f"layer{i}.w"], params[f"layer{i}.a"], x, adj, slope)
        caches.append(c)
        i += 1
    return x, (caches, slope)


def gat_attention(params, f_od: np.ndarray, adj: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """Attention matrix of the first layer (rows over each node's neighbors)."""
    return _gat_layer(params["layer0.w"], params["layer0.a"], f_od, adj, slope)[1][3]


def gat_backward(df_g: np.ndarray, params, cache):
    """Returns (param grads, d f_od)."""
    caches, slope = cache
    grads = {}
    dx = df_g
    for i in reversed(range(len(caches))):
        f, h, e, alpha, mask = caches[i]
        w, a = params[f"layer{i}.w"], params[f"layer{i}.a"]
        d = w.shape[1]
        dalpha = dx @ h.T
        dh = alpha.T @ dx
        dl = nm.softmax_backward(dalpha, alpha, axis=1)
        de = np.where(mask, dl * np.where(e > 0, 1.0, slope), 0.0)
        ds_src = de.sum(axis=1)
        ds_dst = de.sum(axis=0)
        dh += np.outer(ds_src, a[:d]) + np.outer(ds_dst, a[d:])
        grads[f"layer{i}.a"] = np.concatenate([h.T @ ds_src, h.T @ ds_dst])
        grads[f"layer{i}.w"] = f.T @ dh
        dx = dh @ w.T
    return grads, dx


# --------------------------------------------------------------------------
# knowledge retrieval
# --------------------------------------------------------------------------


def init_retrieval(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    return {k: nm.init_weight(rng, d, d) for k in ("wq", "wk", "wv")}


def knowledge_retrieve(params, f_g: np.ndarray, t: np.ndarray):
    """Graph nodes query the question tokens: k' [B, N_v, d]; returns (k', cache)."""
    wq, wk, wv = params["wq"], params["wk"], params["wv"]
    if t.ndim != 3:
        raise ShapeError("text features must be [B, T, d]")
    if f_g.shape[1] != wq.shape[0] or t.shape[2] != wk.shape[0]:
        raise ShapeError(f"dimension mismatch: f_g {f_g.shape}, t {t.shape}, W_Q {wq.shape}")
    B = t.shape[0]
    q = f_g @ wq
    k = t @ wk
    v = t @ wv
    out, att = nm.attention(np.broadcast_to(q, (B,) + q.shape), k, v)
    return out, (f_g, t, att)


def knowledge_retrieve_backward(dk: np.ndarray, params, cache):
    """Returns (param grads, d f_g, d t)."""
    f_g, t, att = cache
    dq, dkey, dval = nm.attention_backward(dk, att)
    dq = dq.sum(axis=0)
    grads = {
        "wq": f_g.T @ dq,
        "wk": t.reshape(-1, t.shape[-1]).T @ dkey.reshape(-1, dkey.shape[-1]),
        "wv": t.reshape(-1, t.shape[-1]).T @ dval.reshape(-1, dval.shape[-1]),
    }
    df_g = dq @ params["wq"].T
    dt = dkey @ params["wk"].T + dval @ params["wv"].T
    return grads, df_g, dt
