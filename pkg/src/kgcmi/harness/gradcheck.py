"""Finite-difference verification of every hand-written backward pass.

Two levels:

* :func:`module_suite` checks each module's backward in isolation on random
  tiny instances (parameters and inputs both), against a random linear
  readout of the module output.
* :func:`gradcheck` checks the assembled model's total loss against central
  differences for every parameter and reports the worst error per group.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import cmir, famt, fcfa, kge
from .. import numerics as nm
from ..encoders import WordTokenizer
from ..model import KgCmiModel
from .config import RunConfig
from .tasks import TEMPLATE_WORDS, Batch, synthetic_graph

TOLERANCE = 1e-4
FD_EPS = 1e-5


@dataclass
class GradCase:
    """A scalar objective over named arrays plus its analytic gradient."""

    name: str
    arrays: dict[str, np.ndarray]
    loss: Callable[[], float]
    grads: Callable[[], dict[str, np.ndarray]]


@dataclass
class GradReport:
    errors: dict[str, float]  # group -> max relative error
    worst: dict[str, str] = field(default_factory=dict)  # group -> tensor holding that error
    tolerance: float = TOLERANCE

    @property
    def failed(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failed

    def format(self) -> str:
        width = max([len(g) for g in self.errors] + [5])
        lines = [f"{'group':<{width}}  max_rel_err  status"]
        for g, e in self.errors.items():
            status = "ok" if e <= self.tolerance else f"FAIL ({self.worst.get(g, '')})"
            lines.append(f"{g:<{width}}  {e:.3e}    {status}")
        lines.append(f"tolerance {self.tolerance:g}: {'all groups pass' if self.ok else 'FAILED ' + ', '.join(self.failed)}")
        return "\n".join(lines)


def check_case(case: GradCase, eps: float = FD_EPS) -> dict[str, float]:
    """Relative error per array of ``case``."""
    analytic = case.grads()
    numeric = nm.finite_diff_gradient(case.loss, case.arrays, eps)
    return {k: nm.relative_error(analytic[k], numeric[k]) for k in case.arrays}


# --------------------------------------------------------------------------
# module-level cases
# --------------------------------------------------------------------------


def _readout(rng, shape):
    return rng.normal(size=shape)


def _case_layer_norm(rng):
    a = {"x": rng.normal(size=(2, 3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
    r = _readout(rng, (2, 3, 5))

    def loss():
        return float(np.sum(nm.layer_norm(a["x"], a["g"], a["b"])[0] * r))

    def grads():
        _, c = nm.layer_norm(a["x"], a["g"], a["b"])
        dx, dg, db = nm.layer_norm_backward(r, c)
        return {"x": dx, "g": dg, "b": db}

    return GradCase("numerics.layer_norm", a, loss, grads)


def _case_attention(rng):
    a = {"q": rng.normal(size=(2, 3, 4)), "k": rng.normal(size=(2, 5, 4)), "v": rng.normal(size=(2, 5, 4))}
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    r = _readout(rng, (2, 3, 4))

    def loss():
        return float(np.sum(nm.attention(a["q"], a["k"], a["v"], mask)[0] * r))

    def grads():
        _, c = nm.attention(a["q"], a["k"], a["v"], mask)
        return dict(zip("qkv", nm.attention_backward(r, c)))

    return GradCase("numerics.attention", a, loss, grads)


def _case_gelu(rng):
    a = {"x": rng.normal(size=(3, 4)) * 2}
    r = _readout(rng, (3, 4))
    return GradCase("numerics.gelu", a, lambda: float(np.sum(nm.gelu(a["x"]) * r)),
                    lambda: {"x": nm.gelu_backward(r, a["x"])})


def _case_qqformer(rng, residual):
    d, lq = 4, 3
    a = dict(fcfa.init_qqformer(rng, d, lq, layers=2))
    a["t"] = rng.normal(size=(2, 3, d))
    a["v"] = rng.normal(size=(2, 4, d))
    r = _readout(rng, (2, lq, d))
    keys = [k for k in a if k not in ("t", "v")]

    def run():
        return fcfa.qqformer_forward({k: a[k] for k in keys}, a["t"], a["v"], residual)

    def grads():
        _, c = run()
        g, dt, dv = fcfa.qqformer_backward(r, {k: a[k] for k in keys}, c)
        return {**g, "t": dt, "v": dv}

    label = "fcfa.qqformer" + ("" if residual else "(literal)")
    return GradCase(label, a, lambda: float(np.sum(run()[0] * r)), grads)


def _case_contrastive(rng, reduce):
    a = {"z": rng.normal(size=(3, 3, 4)), "t": rng.normal(size=(3, 4))}
    cfg = fcfa.ContrastiveConfig(0.5, reduce)

    def grads():
        _, c = fcfa.contrastive_loss(a["z"], a["t"], cfg)
        dz, dt = fcfa.contrastive_backward(1.0, c)
        return {"z": dz, "t": dt}

    return GradCase(f"fcfa.contrastive({reduce})", a,
                    lambda: fcfa.contrastive_loss(a["z"], a["t"], cfg)[0][0], grads)


def _small_graph():
    return synthetic_graph(2, 2)


def _case_gat(rng):
    d = 4
    adj = kge.build_adjacency(_small_graph())
    a = dict(kge.init_gat(rng, d, layers=2))
    a["f_od"] = rng.normal(size=(adj.shape[0], d))
    r = _readout(rng, (adj.shape[0], d))
    keys = [k for k in a if k != "f_od"]

    def run():
        return kge.gat_forward({k: a[k] for k in keys}, a["f_od"], adj)

    def grads():
        _, c = run()
        g, df = kge.gat_backward(r, {k: a[k] for k in keys}, c)
        return {**g, "f_od": df}

    return GradCase("kge.gat", a, lambda: float(np.sum(run()[0] * r)), grads)


def _case_retrieve(rng):
    d = 4
    a = dict(kge.init_retrieval(rng, d))
    a["f_g"] = rng.normal(size=(5, d))
    a["t"] = rng.normal(size=(2, 3, d))
    r = _readout(rng, (2, 5, d))
    keys = ["wq", "wk", "wv"]

    def run():
        return kge.knowledge_retrieve({k: a[k] for k in keys}, a["f_g"], a["t"])

    def grads():
        _, c = run()
        g, dfg, dt = kge.knowledge_retrieve_backward(r, {k: a[k] for k in keys}, c)
        return {**g, "f_g": dfg, "t": dt}

    return GradCase("kge.retrieve", a, lambda: float(np.sum(run()[0] * r)), grads)


def _ssm(rng, d=4, n=3):
    p = cmir.init_ssm(rng, d, n)
    # move away from the tiny-step initialization so every term is exercised
    p["b_delta"] = rng.normal(size=d)
    p["d_skip"] = rng.normal(size=d)
    p["b_gate"] = rng.normal(size=d) * 0.5
    return p


def _case_scan(rng):
    a = dict(_ssm(rng))
    a["u"] = rng.normal(size=(1, 5, 4))
    a["cond"] = rng.normal(size=(1, 5, 4))
    r = _readout(rng, (1, 5, 4))
    keys = [k for k in a if k not in ("u", "cond")]

    def run():
        return cmir.selective_scan({k: a[k] for k in keys}, a["u"], a["cond"])

    def grads():
        _, c = run()
        g, du, dc = cmir.selective_scan_backward(r, {k: a[k] for k in keys}, c)
        out = {k: g.get(k, np.zeros_like(a[k])) for k in keys}
        return {**out, "u": du, "cond": dc}

    return GradCase("cmir.selective_scan", a, lambda: float(np.sum(run()[0] * r)), grads)


def _case_mamba(rng):
    a = dict(_ssm(rng))
    a["x"] = rng.normal(size=(2, 4, 4))
    a["cond"] = rng.normal(size=(2, 4, 4))
    r = _readout(rng, (2, 4, 4))
    keys = [k for k in a if k not in ("x", "cond")]

    def run():
        return cmir.mamba_cross({k: a[k] for k in keys}, a["x"], a["cond"])

    def grads():
        _, c = run()
        g, dx, dc = cmir.mamba_cross_backward(r, {k: a[k] for k in keys}, c)
        out = {k: g.get(k, np.zeros_like(a[k])) for k in keys}
        return {**out, "x": dx, "cond": dc}

    return GradCase("cmir.mamba_cross", a, lambda: float(np.sum(run()[0] * r)), grads)


def _case_cmm_unit(rng):
    a = dict(_ssm(rng))
    a["x"] = rng.normal(size=(2, 3, 4))
    a["other"] = rng.normal(size=(2, 5, 4))
    r = _readout(rng, (2, 3, 4))
    keys = [k for k in a if k not in ("x", "other")]

    def run():
        return cmir.cmm_unit({k: a[k] for k in keys}, a["x"], a["other"])

    def grads():
        _, c = run()
        g, dx, do = cmir.cmm_unit_backward(r, {k: a[k] for k in keys}, c)
        return {**g, "x": dx, "other": do}

    return GradCase("cmir.cmm_unit", a, lambda: float(np.sum(run()[0] * r)), grads)


def _case_cmm_stack(rng):
    d = 4
    a = {}
    for b in range(2):
        for s in cmir.STREAMS:
            for k, v in _ssm(rng, d, 2).items():
                a[f"block{b}.{s}.{k}"] = v
    a["z"] = rng.normal(size=(1, 2, d))
    a["t"] = rng.normal(size=(1, 3, d))
    a["k"] = rng.normal(size=(1, 2, d))
    shapes = [(1, 2, d), (1, 3, d), (1, 2, d), (1, 3, d)]
    rs = cmir.CmmOutputs(*[_readout(rng, s) for s in shapes])
    keys = [k for k in a if k.startswith("block")]

    def run():
        return cmir.cmm_stack({k: a[k] for k in keys}, a["z"], a["t"], a["k"], 2)

    def loss():
        outs, _ = run()
        return float(sum(np.sum(o * r) for o, r in zip(outs.as_tuple(), rs.as_tuple())))

    def grads():
        _, c = run()
        g, dz, dt, dk = cmir.cmm_stack_backward(rs, {k: a[k] for k in keys}, c)
        return {**g, "z": dz, "t": dt, "k": dk}

    return GradCase("cmir.cmm_stack", a, loss, grads)


def _case_fusion(rng):
    shapes = {"z_t2z": (2, 3, 4), "t_z2t": (2, 2, 4), "k_t2k": (2, 5, 4), "t_k2t": (2, 2, 4)}
    a = {k: rng.normal(size=s) for k, s in shapes.items()}
    w = cmir.FusionWeights(0.3, 0.7)
    r = _readout(rng, (2, 5, 4))

    def outs():
        return cmir.CmmOutputs(a["z_t2z"], a["t_z2t"], a["k_t2k"], a["t_k2t"])

    def grads():
        g = cmir.fuse_tripartite_backward(r, outs(), w)
        return dict(zip(shapes, g.as_tuple()))

    return GradCase("cmir.fuse_tripartite", a, lambda: float(np.sum(cmir.fuse_tripartite(outs(), w) * r)), grads)


def _case_classifier(rng, mode):
    a = dict(famt.init_classifier(rng, 4, 3, hidden=5))
    a["ln.g"] = a["ln.g"] + 0.1 * rng.normal(size=5)
    a["x_f"] = rng.normal(size=(3, 4, 4))
    target = np.array([0, 2, 1])
    keys = [k for k in a if k != "x_f"]

    def run():
        logits, c = famt.classify({k: a[k] for k in keys}, a["x_f"])
        loss, dlogits = famt.classification_loss(logits, target, mode)
        return loss, dlogits, c

    def grads():
        _, dlogits, c = run()
        g, dx = famt.classify_backward(dlogits, {k: a[k] for k in keys}, c)
        return {**g, "x_f": dx}

    return GradCase(f"famt.classifier({mode})", a, lambda: run()[0], grads)


def _case_aux(rng):
    d, lf, vocab = 4, 5, 7
    a = dict(famt.init_aux_head(rng, d, lf, vocab))
    a["mask"] = rng.normal(size=lf)
    a["x_f"] = rng.normal(size=(3, lf, d))
    is_open = np.array([True, False, True])
    answers = [(2, 5, 1), (1,), (3,)]
    keys = [k for k in a if k != "x_f"]

    def grads():
        _, c = famt.aux_loss({k: a[k] for k in keys}, a["x_f"], is_open, answers)
        g, dx = famt.aux_loss_backward(1.0, {k: a[k] for k in keys}, c)
        return {**g, "x_f": dx}

    return GradCase("famt.aux_loss", a,
                    lambda: famt.aux_loss({k: a[k] for k in keys}, a["x_f"], is_open, answers)[0], grads)


def module_cases(seed: int) -> list[GradCase]:
    """One random instance of every module-level backward, seeded by ``seed``."""
    rng = np.random.default_rng([seed, 0x6C4E])
    return [
        _case_layer_norm(rng), _case_attention(rng), _case_gelu(rng),
        _case_qqformer(rng, True), _case_qqformer(rng, False),
        _case_contrastive(rng, "max"), _case_contrastive(rng, "mean"),
        _case_gat(rng), _case_retrieve(rng),
        _case_scan(rng), _case_mamba(rng), _case_cmm_unit(rng), _case_cmm_stack(rng), _case_fusion(rng),
        _case_classifier(rng, "bce"), _case_classifier(rng, "ce"), _case_aux(rng),
    ]


def module_suite(seeds=range(20), tolerance: float = TOLERANCE) -> GradReport:
    """Worst relative error per module over all ``seeds``."""
    errors: dict[str, float] = {}
    worst: dict[str, str] = {}
    for seed in seeds:
        for case in module_cases(seed):
            for name, err in check_case(case).items():
                if err > errors.get(case.name, -1.0):
                    errors[case.name] = err
                    worst[case.name] = f"{name}, seed {seed}"
    return GradReport(errors, worst, tolerance)


# --------------------------------------------------------------------------
# whole-model check
# --------------------------------------------------------------------------


def tiny_config(config: RunConfig | None = None) -> RunConfig:
    """Shrink ``config`` to gradcheck size (d<=8, every sequence including the fused one <=6)."""
    config = config or RunConfig()
    return config.replace(
        d=min(config.d, 4), num_queries=min(config.num_queries, 3), ssm_state=min(config.ssm_state, 2),
        question_len=min(config.question_len, 3), image_len=min(config.image_len, 3),
        image_vocab=min(config.image_vocab, 16), text_vocab=min(config.text_vocab, 64),
        answer_vocab=min(config.answer_vocab, 8), num_answers=min(config.num_answers, 4),
        classifier_hidden=None, encoder_scale=1.0, kg_path=None,
    )


def _group(name: str) -> str:
    return ".".join(name.split(".")[:2])


def tiny_model(config: RunConfig, randomize_ssm: bool = True) -> tuple[KgCmiModel, Batch]:
    graph = synthetic_graph(2, 2)
    words = list(TEMPLATE_WORDS) + [w for n in graph.nodes for w in n.label.split()]
    tokenizer = WordTokenizer(config.text_vocab, words)
    model = KgCmiModel(config, graph, tokenizer)
    rng = np.random.default_rng([config.seed, 0x6C4F])
    # same bias randomization as the module cases: at the default step-size
    # init the a_log gradients sit near the central-difference noise floor
    for name in model.params.names() if randomize_ssm else ():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b_delta", "d_skip", "b_gate"):
            arr = model.params.slots[name].value
            arr[...] = rng.normal(size=arr.shape) * (0.5 if leaf == "b_gate" else 1.0)
    B = 3
    batch = Batch(
        image_ids=rng.integers(0, config.image_vocab, size=(B, config.image_len)),
        question_ids=rng.integers(0, config.text_vocab, size=(B, config.question_len)),
        answer_index=rng.integers(0, config.num_answers, size=B),
        is_open=np.array([True, False, True]),
        answer_tokens=[(2, 3), (1,), (4,)],
    )
    return model, batch


def gradcheck(config: RunConfig | None = None, tolerance: float = TOLERANCE, eps: float = FD_EPS,
              randomize_ssm: bool = True) -> GradReport:
    """Analytic vs central-difference gradients of the full objective, per parameter group.

    With ``randomize_ssm`` the scan biases are redrawn so that step sizes are
    O(1); otherwise the model is checked exactly as initialized.
    """
    config = tiny_config(config)
    model, batch = tiny_model(config, randomize_ssm)
    model.params.zero_grads()
    model.loss_and_grad(batch)
    analytic = {k: v.copy() for k, v in model.params.grads().items()}
    numeric = nm.finite_diff_gradient(lambda: model.loss_value(batch), model.params, eps)
    errors: dict[str, float] = {}
    worst: dict[str, str] = {}
    for name in model.params.names():
        g = _group(name)
        err = nm.relative_error(analytic[name], numeric[name])
        if err > errors.get(g, -1.0):
            errors[g] = err
            worst[g] = name
    return GradReport(errors, worst, tolerance)
