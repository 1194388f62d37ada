import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kgcmi import famt
from kgcmi import numerics as nm
from kgcmi.errors import ConfigError, InputError, ShapeError


def _classifier(rng, d=4, answers=5):
    p = famt.init_classifier(rng, d, answers)
    for k in ("b1", "ln.g", "ln.b", "b2"):
        p[k] = p[k] + 0.3 * rng.normal(size=p[k].shape)
    return p


# -- classification head -----------------------------------------------------


def test_zero_final_layer_gives_zero_logits(rng):
    p = _classifier(rng)
    p["w2"] = np.zeros_like(p["w2"])
    p["b2"] = np.zeros_like(p["b2"])
    logits, _ = famt.classify(p, rng.normal(size=(3, 6, 4)))
    np.testing.assert_array_equal(logits, np.zeros((3, 5)))


def test_logit_shape(rng):
    logits, _ = famt.classify(_classifier(rng, answers=7), rng.normal(size=(2, 6, 4)))
    assert logits.shape == (2, 7)


def test_classify_straight_line(rng):
    p = _classifier(rng)
    x = rng.normal(size=(2, 6, 4))
    logits, _ = famt.classify(p, x)
    for b in range(2):
        pooled = np.array([sum(x[b, l, c] for l in range(6)) / 6 for c in range(4)])
        u = oracles.matvec(pooled, p["w1"]) + p["b1"]
        n = oracles.layer_norm_row(u, p["ln.g"], p["ln.b"])
        g = np.array([oracles.gelu(v) for v in n])
        np.testing.assert_allclose(logits[b], oracles.matvec(g, p["w2"]) + p["b2"], atol=1e-13)


def test_classify_rejects_bad_input(rng):
    with pytest.raises(ShapeError):
        famt.classify(_classifier(rng), rng.normal(size=(2, 6, 3)))
    x = rng.normal(size=(1, 2, 4))
    x[0, 0, 0] = np.nan
    with pytest.raises(InputError):
        famt.classify(_classifier(rng), x)


# -- classification loss -----------------------------------------------------


@pytest.mark.parametrize("target", [0, 2, 4])
def test_bce_zero_logits_is_ln2(target):
    loss, _ = famt.classification_loss(np.zeros((1, 5)), [target])
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)


def test_bce_saturates():
    loss, _ = famt.classification_loss(np.array([[20.0]]), [0])
    assert loss < 1e-6


def test_bce_hand_terms():
    loss, _ = famt.classification_loss(np.array([[1.0, -1.0]]), [0])
    # positive class: softplus(-1); negative class with logit -1: softplus(-1)
    sp = math.log1p(math.exp(-1.0))
    assert loss == pytest.approx((sp + sp) / 2, abs=1e-15)


def test_ce_alternative():
    logits = np.array([[1.0, 2.0, 0.5]])
    loss, _ = famt.classification_loss(logits, [1], mode="ce")
    expected = -math.log(math.exp(2.0) / (math.exp(1.0) + math.exp(2.0) + math.exp(0.5)))
    assert loss == pytest.approx(expected, abs=1e-14)


def test_classification_loss_errors():
    with pytest.raises(InputError):
        famt.classification_loss(np.zeros((1, 3)), [3])
    with pytest.raises(InputError):
        famt.classification_loss(np.zeros((1, 3)), [-1])
    with pytest.raises(ConfigError):
        famt.classification_loss(np.zeros((1, 3)), [0], mode="hinge")


@pytest.mark.parametrize("mode", ["bce", "ce"])
def test_classifier_gradients_fd(rng, mode):
    p = _classifier(rng)
    x = rng.normal(size=(3, 5, 4))
    y = np.array([0, 4, 2])

    def loss():
        return famt.classification_loss(famt.classify(p, x)[0], y, mode)[0]

    logits, cache = famt.classify(p, x)
    _, dlogits = famt.classification_loss(logits, y, mode)
    grads, dx = famt.classify_backward(dlogits, p, cache)
    num = nm.finite_diff_gradient(loss, {**p, "x": x})
    for k in p:
        assert nm.relative_error(grads[k], num[k]) < 1e-4, k
    assert nm.relative_error(dx, num["x"]) < 1e-4


# -- auxiliary head ----------------------------------------------------------


def _aux(rng, d=4, lf=5, vocab=7):
    return famt.init_aux_head(rng, d, lf, vocab)


def test_closed_only_batch_gives_zero_loss_and_gradient(rng):
    p = _aux(rng)
    x = rng.normal(size=(3, 5, 4))
    loss, cache = famt.aux_loss(p, x, [False, False, False], [(1,), (2,), (3,)])
    assert loss == 0.0
    grads, dx = famt.aux_loss_backward(0.3, p, cache)
    assert all(not g.any() for g in grads.values())
    assert not dx.any()


def test_uniform_decoder_gives_log_vocab(rng):
    p = _aux(rng, vocab=7)
    p["out.w"] = np.zeros_like(p["out.w"])
    loss, _ = famt.aux_loss(p, rng.normal(size=(1, 5, 4)), [True], [(3,)])
    assert loss == pytest.approx(math.log(7), abs=1e-14)


def test_mask_init_is_ones_and_length(rng):
    p = _aux(rng, lf=9)
    np.testing.assert_array_equal(p["mask"], np.ones(9))
    with pytest.raises(ShapeError):
        famt.aux_loss(p, rng.normal(size=(1, 5, 4)), [True], [(1,)])


def test_closed_mask_position_has_no_influence(rng):
    p = _aux(rng)
    p["mask"][2] = -40.0  # sigmoid(-40) ~ 4e-18
    x = rng.normal(size=(2, 5, 4))
    answers = [(2, 3, 1), (4, 5)]

    def loss():
        return famt.aux_loss(p, x, [True, True], answers)[0]

    num = nm.finite_diff_gradient(loss, {"x": x})["x"]
    assert np.abs(num[:, 2]).max() < 1e-8
    assert np.abs(num[:, 1]).max() > 1e-4
    _, cache = famt.aux_loss(p, x, [True, True], answers)
    _, dx = famt.aux_loss_backward(1.0, p, cache)
    assert np.abs(dx[:, 2]).max() < 1e-12


def test_aux_rejects_empty_answer(rng):
    with pytest.raises(InputError):
        famt.aux_loss(_aux(rng), rng.normal(size=(1, 5, 4)), [True], [()])
    with pytest.raises(InputError):
        famt.aux_loss(_aux(rng), rng.normal(size=(1, 5, 4)), [True], [(99,)])


def test_aux_gradients_fd(rng):
    p = _aux(rng)
    p["mask"] = p["mask"] + rng.normal(size=5)
    for k in ("ln1.g", "ln2.b", "ln3.g", "out.b"):
        p[k] = p[k] + 0.3 * rng.normal(size=p[k].shape)
    x = rng.normal(size=(3, 5, 4))
    flags = [True, False, True]
    answers = [(1, 2, 3), (1,), (6,)]
    _, cache = famt.aux_loss(p, x, flags, answers)
    grads, dx = famt.aux_loss_backward(1.0, p, cache)
    num = nm.finite_diff_gradient(lambda: famt.aux_loss(p, x, flags, answers)[0], {**p, "x": x})
    for k in p:
        assert nm.relative_error(grads[k], num[k]) < 1e-4, k
    assert nm.relative_error(dx, num["x"]) < 1e-4


def test_greedy_decode_is_deterministic(rng):
    p = _aux(rng)
    x = rng.normal(size=(5, 4))
    out = famt.greedy_decode(p, x, 4)
    assert out == famt.greedy_decode(p, x, 4)
    assert len(out) == 4 and all(0 <= t < 7 for t in out)


# -- objective and prediction ------------------------------------------------


def test_total_loss_examples():
    assert famt.total_loss(1.0, 1.0, 1.0) == pytest.approx(1.5, abs=1e-15)
    assert famt.total_loss(0.7, 3.0, 5.0, 0.0, 0.0) == 0.7
    with pytest.raises(ConfigError):
        famt.total_loss(1.0, 1.0, 1.0, -0.1, 0.3)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_linear(a, b, c, alpha, beta):
    assert famt.total_loss(2 * a, 2 * b, 2 * c, alpha, beta) == pytest.approx(
        2 * famt.total_loss(a, b, c, alpha, beta), rel=1e-12, abs=1e-300)
    assert famt.total_loss(a, b, c, alpha, beta) == pytest.approx(a + alpha * b + beta * c, rel=1e-12, abs=1e-300)


def test_predict_unique_max():
    assert famt.predict_from_logits(np.array([0.1, 0.2, -1.0, 3.0, 0.0]))[0] == 3


def test_predict_tie_goes_low():
    assert famt.predict_from_logits(np.array([[1.0, 5.0, 5.0, 5.0]]))[0] == 1


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_predict_scale_invariant(seed, c):
    logits = np.random.default_rng(seed).normal(size=(4, 6))
    np.testing.assert_array_equal(famt.predict_from_logits(c * logits), famt.predict_from_logits(logits))
