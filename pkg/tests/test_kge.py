import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kgcmi import kge
from kgcmi import numerics as nm
from kgcmi.errors import GraphError, ShapeError
from kgcmi.harness.tasks import synthetic_graph
from kgcmi.kge import KnowledgeGraph, Node


# -- adjacency ---------------------------------------------------------------


def test_global_only_graph():
    adj = kge.build_adjacency(KnowledgeGraph([Node(0, "body", "global")]))
    np.testing.assert_array_equal(adj, [[1]])


def test_one_organ_two_findings_hand_enumeration():
    g = KnowledgeGraph([Node(0, "g", "global"), Node(1, "o1", "organ"),
                        Node(2, "f1", "finding", 1), Node(3, "f2", "finding", 1)])
    expected = np.eye(4, dtype=int)
    for i, j in [(0, 1), (1, 2), (1, 3), (2, 3), (2, 0), (3, 0)]:
        expected[i, j] = expected[j, i] = 1
    np.testing.assert_array_equal(kge.build_adjacency(g), expected)


def test_findings_of_different_organs_not_linked():
    g = KnowledgeGraph([Node(0, "g", "global"), Node(1, "o1", "organ"), Node(2, "o2", "organ"),
                        Node(3, "f1", "finding", 1), Node(4, "f2", "finding", 2)])
    adj = kge.build_adjacency(g)
    assert adj[3, 4] == 0 and adj[4, 3] == 0
    assert adj[1, 2] == 0  # organs meet only through the global node
    assert adj[3, 2] == 0


@settings(max_examples=30)
@given(st.integers(0, 4), st.integers(0, 4))
def test_adjacency_invariants(n_organs, per_organ):
    g = synthetic_graph(n_organs, per_organ) if n_organs else KnowledgeGraph([Node(0, "g", "global")])
    adj = kge.build_adjacency(g)
    np.testing.assert_array_equal(adj, adj.T)
    assert np.all(np.diag(adj) == 1)
    assert set(np.unique(adj)) <= {0, 1}
    if len(g) > 1:
        assert np.all((adj - np.eye(len(g), dtype=adj.dtype)).sum(axis=1) >= 1)
    np.testing.assert_array_equal(np.maximum(adj, adj.T), adj)


def test_graph_validation_errors():
    with pytest.raises(GraphError, match="node 2"):
        KnowledgeGraph([Node(0, "g", "global"), Node(1, "o", "organ"), Node(2, "f", "finding", 7)])
    with pytest.raises(GraphError):
        KnowledgeGraph([Node(0, "g", "global"), Node(1, "h", "global")])
    with pytest.raises(GraphError, match="node 1"):
        KnowledgeGraph([Node(0, "g", "global"), Node(1, "", "organ")])
    with pytest.raises(GraphError):
        KnowledgeGraph([Node(0, "g", "global"), Node(2, "o", "organ")])


def test_json_round_trip_and_errors(tmp_path):
    g = synthetic_graph(2, 2)
    path = tmp_path / "kg.json"
    g.save(path)
    again = KnowledgeGraph.load(path)
    assert again.to_dict() == g.to_dict()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [{"id": 0, "label": "g", "kind": "global", "organ": None},
                                         {"id": 1, "label": "x", "kind": "finding", "organ": 5}]}))
    with pytest.raises(GraphError, match="node 1"):
        KnowledgeGraph.load(bad)
    bad.write_text("{not json")
    with pytest.raises(GraphError):
        KnowledgeGraph.load(bad)


def test_bundled_graph_is_valid():
    g = kge.bundled_graph()
    assert sum(n.kind == "global" for n in g.nodes) == 1
    assert g.organs()


# -- graph attention ---------------------------------------------------------


def test_single_node_gat_is_linear_map(rng):
    p = kge.init_gat(rng, 3)
    f = rng.normal(size=(1, 3))
    out, _ = kge.gat_forward(p, f, np.ones((1, 1), dtype=int))
    np.testing.assert_allclose(out, f @ p["layer0.w"], atol=1e-15)


def test_two_identical_nodes_identical_outputs(rng):
    p = kge.init_gat(rng, 3)
    f = np.tile(rng.normal(size=(1, 3)), (2, 1))
    out, _ = kge.gat_forward(p, f, np.ones((2, 2), dtype=int))
    np.testing.assert_array_equal(out[0], out[1])


def test_gat_matches_edge_loop(rng):
    adj = np.array([[1, 1, 0, 1], [1, 1, 1, 0], [0, 1, 1, 1], [1, 0, 1, 1]])
    p = kge.init_gat(rng, 3)
    f = rng.normal(size=(4, 3))
    out, _ = kge.gat_forward(p, f, adj)
    ref, alphas = oracles.gat_edge_loop(p["layer0.w"], p["layer0.a"], f, adj)
    np.testing.assert_allclose(out, ref, atol=1e-13, rtol=0)
    np.testing.assert_allclose(kge.gat_attention(p, f, adj), alphas, atol=1e-13, rtol=0)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 3))
def test_gat_rows_sum_to_one(seed, organs, per):
    r = np.random.default_rng(seed)
    g = synthetic_graph(organs, per)
    adj = kge.build_adjacency(g)
    alpha = kge.gat_attention(kge.init_gat(r, 4), r.normal(size=(len(g), 4)), adj)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-10, rtol=0)
    assert np.all(alpha[adj == 0] == 0.0)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_gat_permutation_equivariant(seed):
    r = np.random.default_rng(seed)
    adj = kge.build_adjacency(synthetic_graph(2, 2))
    n = adj.shape[0]
    p = kge.init_gat(r, 3, layers=2)
    f = r.normal(size=(n, 3))
    perm = r.permutation(n)
    out, _ = kge.gat_forward(p, f, adj)
    out_p, _ = kge.gat_forward(p, f[perm], adj[np.ix_(perm, perm)])
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_gat_missing_self_loop_is_graph_error(rng):
    with pytest.raises(GraphError):
        kge.gat_forward(kge.init_gat(rng, 2), rng.normal(size=(2, 2)), np.array([[1, 0], [0, 0]]))
    with pytest.raises(ShapeError):
        kge.gat_forward(kge.init_gat(rng, 2), rng.normal(size=(3, 2)), np.eye(2))


def test_gat_gradients_fd(rng):
    adj = kge.build_adjacency(synthetic_graph(2, 2))
    p = kge.init_gat(rng, 3)
    f = rng.normal(size=(len(adj), 3))
    r = rng.normal(size=(len(adj), 3))
    out, cache = kge.gat_forward(p, f, adj)
    grads, df = kge.gat_backward(r, p, cache)
    num = nm.finite_diff_gradient(lambda: float(np.sum(kge.gat_forward(p, f, adj)[0] * r)), {**p, "f": f})
    for k in p:
        assert nm.relative_error(grads[k], num[k]) < 1e-4
    assert nm.relative_error(df, num["f"]) < 1e-4


# -- knowledge retrieval -----------------------------------------------------


def test_retrieve_single_token(rng):
    p = kge.init_retrieval(rng, 4)
    t = rng.normal(size=(2, 1, 4))
    k1, _ = kge.knowledge_retrieve(p, rng.normal(size=(3, 4)), t)
    np.testing.assert_allclose(k1, np.broadcast_to(t @ p["wv"], (2, 3, 4)), atol=1e-15)


def test_retrieve_zero_query_weights_average(rng):
    p = kge.init_retrieval(rng, 4)
    p["wq"] = np.zeros((4, 4))
    t = rng.normal(size=(2, 5, 4))
    k1, _ = kge.knowledge_retrieve(p, rng.normal(size=(3, 4)), t)
    np.testing.assert_allclose(k1, np.broadcast_to((t @ p["wv"]).mean(axis=1, keepdims=True), (2, 3, 4)), atol=1e-15)


def test_retrieve_matches_shared_kernel(rng):
    p = kge.init_retrieval(rng, 4)
    f_g = rng.normal(size=(3, 4))
    t = rng.normal(size=(1, 4, 4))
    k1, _ = kge.knowledge_retrieve(p, f_g, t)
    ref = nm.scaled_dot_attention((f_g @ p["wq"])[None], t @ p["wk"], t @ p["wv"])
    np.testing.assert_allclose(k1, ref, atol=1e-15)
    loop = oracles.attention_rows(oracles.matmul_rows(f_g, p["wq"]), oracles.matmul_rows(t[0], p["wk"]),
                                  oracles.matmul_rows(t[0], p["wv"]))
    np.testing.assert_allclose(k1[0], loop, atol=1e-13)


def test_retrieve_gradients_fd(rng):
    p = kge.init_retrieval(rng, 3)
    f_g, t = rng.normal(size=(4, 3)), rng.normal(size=(2, 5, 3))
    r = rng.normal(size=(2, 4, 3))
    _, cache = kge.knowledge_retrieve(p, f_g, t)
    grads, df_g, dt = kge.knowledge_retrieve_backward(r, p, cache)
    num = nm.finite_diff_gradient(lambda: float(np.sum(kge.knowledge_retrieve(p, f_g, t)[0] * r)),
                                  {**p, "f_g": f_g, "t": t})
    for k in p:
        assert nm.relative_error(grads[k], num[k]) < 1e-4
    assert nm.relative_error(df_g, num["f_g"]) < 1e-4
    assert nm.relative_error(dt, num["t"]) < 1e-4


def test_retrieve_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        kge.knowledge_retrieve(kge.init_retrieval(rng, 4), rng.normal(size=(3, 5)), rng.normal(size=(1, 2, 4)))
