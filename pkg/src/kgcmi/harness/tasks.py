"""Synthetic Med-VQA tasks whose labels follow a stated rule.

Families
--------
visual
    Closed questions. All image tokens share one parity; the answer is that
    parity (0 = even, 1 = odd). Question tokens are uninformative.
text
    Closed questions. The answer is 0 when the question names an organ
    ("... liver ?") from the first half of the organ list, else 1. Image
    tokens are uninformative.
kg
    The image shows organ o (every image token is congruent to o modulo the
    number of organs) and the question asks "is there <finding> in this
    scan". The answer is 0 (yes) when the knowledge graph attaches the
    finding to organ o, else 1 (no). Test questions only name findings never
    seen in training, so the finding-organ link can only come from the graph.
open
    The first two image tokens encode a class c in 0..3 (token id = c mod 4);
    the remaining image tokens are noise. Half the questions are closed
    ("is it bright ?", answer 0 if c is even else 1); half are open ("what is
    shown in image", answer 2 + c) and carry a two-token free-form
    description of c for the auxiliary decoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoders import WordTokenizer
from ..errors import ConfigError
from ..kge import KnowledgeGraph, Node, bundled_graph
from .config import RunConfig

PAD_WORD = "?"
TEMPLATE_WORDS = (
    "?", "does", "affect", "the", "is", "it", "bright", "what", "shown", "in", "image",
    "organ", "there", "any", "abnormality", "which", "a", "this", "scan", "normal",
)
OPEN_CLASSES = 4
OPEN_SIGNAL_TOKENS = 2  # leading image tokens that carry the open-task class


@dataclass
class VqaSample:
    image_ids: np.ndarray
    question_ids: np.ndarray
    answer_index: int
    answer_tokens: tuple[int, ...]
    is_open: bool


@dataclass
class Batch:
    image_ids: np.ndarray  # [B, L_v]
    question_ids: np.ndarray  # [B, T]
    answer_index: np.ndarray  # [B]
    is_open: np.ndarray  # [B] bool
    answer_tokens: list[tuple[int, ...]]

    def __len__(self) -> int:
        return self.image_ids.shape[0]

    @classmethod
    def from_samples(cls, samples: list[VqaSample]) -> "Batch":
        return cls(
            image_ids=np.stack([s.image_ids for s in samples]),
            question_ids=np.stack([s.question_ids for s in samples]),
            answer_index=np.array([s.answer_index for s in samples], dtype=np.int64),
            is_open=np.array([s.is_open for s in samples], dtype=bool),
            answer_tokens=[s.answer_tokens for s in samples],
        )


@dataclass
class SyntheticTask:
    family: str
    seed: int
    graph: KnowledgeGraph
    tokenizer: WordTokenizer
    train: list[VqaSample]
    test: list[VqaSample]


def synthetic_graph(num_organs: int, findings_per_organ: int) -> KnowledgeGraph:
    nodes = [Node(0, "body", "global")]
    for o in range(num_organs):
        oid = len(nodes)
        nodes.append(Node(oid, f"organ{o}", "organ"))
        for f in range(findings_per_organ):
            nodes.append(Node(len(nodes), f"finding{o}x{f}", "finding", oid))
    return KnowledgeGraph(nodes)


def _graph_words(graph: KnowledgeGraph) -> list[str]:
    words = []
    for node in graph.nodes:
        words.extend(node.label.lower().split())
    return words


def _question(tokenizer: WordTokenizer, words: list[str], length: int) -> np.ndarray:
    words = (list(words) + [PAD_WORD] * length)[:length]
    return np.array(tokenizer.encode(words), dtype=np.int64)


def _parity_image(rng, vocab: int, length: int, parity: int, modulus: int = 2) -> np.ndarray:
    choices = np.arange(parity, vocab, modulus)
    return rng.choice(choices, size=length)


def _answer_word_tokens(index: int) -> tuple[int, ...]:
    # answer alphabet: 0 is BOS; closed answers use 1 (yes / even) and 2 (no / odd)
    return (1 + index,)


def gen_synthetic_task(config: RunConfig, seed: int | None = None) -> SyntheticTask:
    """Reproducible train/test split for ``config.task``."""
    seed = config.seed if seed is None else seed
    if config.num_answers < 2:
        raise ConfigError("a task needs at least two answers")
    rng = np.random.default_rng([seed, 0x7A5C])
    family = config.task
    if family == "kg":
        graph = synthetic_graph(config.kg_organs, config.kg_findings_per_organ)
    elif config.kg_path:
        graph = KnowledgeGraph.load(config.kg_path)
    else:
        graph = bundled_graph()
    tokenizer = WordTokenizer(config.text_vocab, list(TEMPLATE_WORDS) + _graph_words(graph))
    maker = {"visual": _visual, "text": _text, "kg": _kg, "open": _open}[family]
    train, test = maker(config, rng, graph, tokenizer)
    return SyntheticTask(family, seed, graph, tokenizer, train, test)


def _visual(cfg, rng, graph, tok):
    templates = [["is", "the", "scan", "normal"], ["is", "there", "any", "abnormality"], ["what", "is", "shown"]]

    def make(n):
        out = []
        for _ in range(n):
            label = int(rng.integers(2))
            q = templates[int(rng.integers(len(templates)))]
            out.append(VqaSample(_parity_image(rng, cfg.image_vocab, cfg.image_len, label),
                                 _question(tok, q, cfg.question_len), label, _answer_word_tokens(label), False))
        return out

    return make(cfg.n_train), make(cfg.n_test)


def _text(cfg, rng, graph, tok):
    organs = [n.label for n in graph.organs()]
    if len(organs) < 2:
        raise ConfigError("text task needs a graph with at least two organs")
    half = len(organs) // 2

    def make(n):
        out = []
        for _ in range(n):
            o = int(rng.integers(len(organs)))
            label = 0 if o < half else 1
            q = ["which", "organ", "is", "this"] + organs[o].split()
            out.append(VqaSample(rng.integers(0, cfg.image_vocab, size=cfg.image_len),
                                 _question(tok, q, cfg.question_len), label, _answer_word_tokens(label), False))
        return out

    return make(cfg.n_train), make(cfg.n_test)


def kg_split(graph: KnowledgeGraph, holdout_per_organ: int):
    """Train/test findings; the held-out ones are spread evenly through each organ's list."""
    train_f, test_f = [], []
    for organ in graph.organs():
        members = graph.findings_of(organ.id)
        n, h = len(members), min(holdout_per_organ, len(members) - 1)
        hold = {int((j + 0.5) * n / h) for j in range(h)} if h > 0 else set()
        train_f += [m for i, m in enumerate(members) if i not in hold]
        test_f += [m for i, m in enumerate(members) if i in hold]
    return train_f, test_f or train_f


def _kg(cfg, rng, graph, tok):
    if cfg.question_len < 6:
        raise ConfigError("kg task questions need question_len >= 6")
    organs = graph.organs()
    if len(organs) < 2:
        raise ConfigError("kg task needs at least two organs")
    if cfg.image_vocab < len(organs):
        raise ConfigError("kg task needs image_vocab >= number of organs")
    train_f, test_f = kg_split(graph, cfg.kg_holdout_per_organ)
    index = {o.id: i for i, o in enumerate(organs)}

    def make(n, findings):
        out = []
        for _ in range(n):
            shown = int(rng.integers(len(organs)))
            label = int(rng.integers(2))
            pool = [f for f in findings if (index[f.organ] == shown) == (label == 0)]
            f = pool[int(rng.integers(len(pool)))]
            image = _parity_image(rng, cfg.image_vocab, cfg.image_len, shown, len(organs))
            q = ["is", "there", f.label, "in", "this", "scan"]
            out.append(VqaSample(image, _question(tok, q, cfg.question_len), label, _answer_word_tokens(label), False))
        return out

    return make(cfg.n_train, train_f), make(cfg.n_test, test_f)


def _open(cfg, rng, graph, tok):
    if cfg.num_answers < 2 + OPEN_CLASSES:
        raise ConfigError(f"open task needs num_answers >= {2 + OPEN_CLASSES}")
    if cfg.answer_vocab < 3 + 2 * OPEN_CLASSES:
        raise ConfigError(f"open task needs answer_vocab >= {3 + 2 * OPEN_CLASSES}")

    def make(n):
        out = []
        for _ in range(n):
            c = int(rng.integers(OPEN_CLASSES))
            image = rng.integers(0, cfg.image_vocab, size=cfg.image_len)
            k = min(OPEN_SIGNAL_TOKENS, cfg.image_len)
            image[:k] = _parity_image(rng, cfg.image_vocab, k, c, OPEN_CLASSES)
            if rng.random() < 0.5:
                label = c % 2
                q = ["is", "it", "bright", "?"]
                out.append(VqaSample(image, _question(tok, q, cfg.question_len), label, _answer_word_tokens(label), False))
            else:
                q = ["what", "is", "shown", "in", "image"]
                desc = (3 + 2 * c, 4 + 2 * c)
                out.append(VqaSample(image, _question(tok, q, cfg.question_len), 2 + c, desc, True))
        return out

    return make(cfg.n_train), make(cfg.n_test)
