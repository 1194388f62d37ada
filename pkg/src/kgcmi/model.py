"""End-to-end model: encoders -> alignment -> knowledge -> cross-modal Mamba -> heads."""
from __future__ import annotations

import numpy as np

from . import cmir, famt, fcfa, kge
from . import numerics as nm
from .encoders import Encoders, TokenSequence, WordTokenizer
from .harness.config import RunConfig
from .harness.tasks import Batch


def init_params(config: RunConfig, seed: int | None = None) -> nm.ModelParams:
    rng = np.random.default_rng([config.seed if seed is None else seed, 0x9A7A])
    d = config.d
    p = nm.ModelParams()
    p.update("fcfa.", fcfa.init_qqformer(rng, d, config.num_queries, config.qqformer_layers))
    p.update("kge.gat.", kge.init_gat(rng, d, config.gat_layers))
    p.update("kge.retrieve.", kge.init_retrieval(rng, d))
    for stream in ("z", "t", "k"):
        p.add(f"norm.{stream}.g", np.ones(d))
        p.add(f"norm.{stream}.b", np.zeros(d))
    p.update("cmir.", cmir.init_cmir(rng, d, config.ssm_state, config.num_cmm_blocks))
    p.update("famt.cls.", famt.init_classifier(rng, d, config.num_answers, config.classifier_hidden))
    p.update("famt.aux.", famt.init_aux_head(rng, d, config.fused_len, config.answer_vocab))
    return p


class KgCmiModel:
    def __init__(self, config: RunConfig, graph: kge.KnowledgeGraph, tokenizer: WordTokenizer,
                 params: nm.ModelParams | None = None):
        self.config = config
        self.graph = graph
        self.tokenizer = tokenizer
        self.encoders = Encoders(config.d, config.image_vocab, config.text_vocab,
                                 config.image_len, config.question_len, seed=config.seed,
                                 scale=config.encoder_scale)
        self.adjacency = kge.build_adjacency(graph)
        self.node_features = self.encoders.embed_kg_nodes(graph, tokenizer)
        self.params = params if params is not None else init_params(config)
        self.contrastive = fcfa.ContrastiveConfig(config.tau, config.similarity_reduce)
        self.fusion = cmir.FusionWeights(config.eta, config.theta)

    # ------------------------------------------------------------------

    def _encode(self, image_ids, question_ids):
        v = self.encoders.encode_image(image_ids)
        t = self.encoders.encode_text(question_ids)
        return v, t

    def fused_features(self, image_ids, question_ids):
        """x_f plus everything needed for losses and backward."""
        cfg, P = self.config, self.params
        v, t = self._encode(image_ids, question_ids)
        c = {"t_summary": t.summary}
        z_f, c["qq"] = fcfa.qqformer_forward(P.sub("fcfa."), t.sequence, v.sequence, cfg.residuals)
        c["z_f"] = z_f
        B = z_f.shape[0]
        if cfg.use_knowledge:
            f_g, c["gat"] = kge.gat_forward(P.sub("kge.gat."), self.node_features, self.adjacency, cfg.gat_slope)
            k1, c["ret"] = kge.knowledge_retrieve(P.sub("kge.retrieve."), f_g, t.sequence)
            k2, c["ln_k"] = nm.layer_norm(k1, P["norm.k.g"], P["norm.k.b"])
        else:
            k2 = np.zeros((B, len(self.graph), cfg.d))
        z1, c["ln_z"] = nm.layer_norm(z_f, P["norm.z.g"], P["norm.z.b"])
        t1, c["ln_t"] = nm.layer_norm(t.sequence, P["norm.t.g"], P["norm.t.b"])
        outs, c["cmm"] = cmir.cmm_stack(P.sub("cmir."), z1, t1, k2, cfg.num_cmm_blocks)
        c["outs"] = outs
        x_f = cmir.fuse_tripartite(outs, self.fusion)
        return x_f, c

    def logits(self, image_ids, question_ids) -> np.ndarray:
        x_f, _ = self.fused_features(image_ids, question_ids)
        return famt.classify(self.params.sub("famt.cls."), x_f)[0]

    def predict(self, image_ids, question_ids) -> np.ndarray:
        """Answer indices from the classification head (the auxiliary head is unused)."""
        if isinstance(image_ids, TokenSequence):
            image_ids = [image_ids.ids]
        if isinstance(question_ids, TokenSequence):
            question_ids = [question_ids.ids]
        return famt.predict_from_logits(self.logits(image_ids, question_ids))

    # ------------------------------------------------------------------

    def forward(self, batch: Batch):
        """Returns (losses, cache) with losses L, L_cls, L_vtc, L_aux."""
        cfg, P = self.config, self.params
        x_f, c = self.fused_features(batch.image_ids, batch.question_ids)
        logits, c["cls"] = famt.classify(P.sub("famt.cls."), x_f)
        l_cls, c["dlogits"] = famt.classification_loss(logits, batch.answer_index, cfg.cls_loss)
        (l_vtc, _, _), c["vtc"] = fcfa.contrastive_loss(c["z_f"], c["t_summary"], self.contrastive)
        l_aux, c["aux"] = famt.aux_loss(P.sub("famt.aux."), x_f, batch.is_open, batch.answer_tokens)
        c["logits"] = logits
        losses = {
            "L": famt.total_loss(l_cls, l_vtc, l_aux, cfg.alpha, cfg.beta),
            "L_cls": l_cls,
            "L_vtc": l_vtc,
            "L_aux": l_aux,
        }
        return losses, c

    def backward(self, c) -> None:
        """Accumulate d L / d params into ``self.params`` grads."""
        cfg, P = self.config, self.params
        g, dx_f = famt.classify_backward(c["dlogits"], P.sub("famt.cls."), c["cls"])
        P.accumulate("famt.cls.", g)
        g, dx_aux = famt.aux_loss_backward(cfg.beta, P.sub("famt.aux."), c["aux"])
        P.accumulate("famt.aux.", g)
        dx_f = dx_f + dx_aux

        douts = cmir.fuse_tripartite_backward(dx_f, c["outs"], self.fusion)
        g, dz1, dt1, dk2 = cmir.cmm_stack_backward(douts, P.sub("cmir."), c["cmm"])
        P.accumulate("cmir.", g)
        dz_f, dg, db = nm.layer_norm_backward(dz1, c["ln_z"])
        P.accumulate("norm.z.", {"g": dg, "b": db})
        _, dg, db = nm.layer_norm_backward(dt1, c["ln_t"])
        P.accumulate("norm.t.", {"g": dg, "b": db})

        if cfg.use_knowledge:
            dk1, dg, db = nm.layer_norm_backward(dk2, c["ln_k"])
            P.accumulate("norm.k.", {"g": dg, "b": db})
            g, df_g, _ = kge.knowledge_retrieve_backward(dk1, P.sub("kge.retrieve."), c["ret"])
            P.accumulate("kge.retrieve.", g)
            g, _ = kge.gat_backward(df_g, P.sub("kge.gat."), c["gat"])
            P.accumulate("kge.gat.", g)

        dz_vtc, _ = fcfa.contrastive_backward(cfg.alpha, c["vtc"])
        g, _, _ = fcfa.qqformer_backward(dz_f + dz_vtc, P.sub("fcfa."), c["qq"])
        P.accumulate("fcfa.", g)

    def loss_and_grad(self, batch: Batch) -> dict[str, float]:
        losses, cache = self.forward(batch)
        self.backward(cache)
        return losses

    def loss_value(self, batch: Batch) -> float:
        return self.forward(batch)[0]["L"]
