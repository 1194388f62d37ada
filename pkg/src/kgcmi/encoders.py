"""Frozen, seeded stand-ins for the image and text backbones.

Each encoder is an embedding-table lookup plus a sinusoidal position signal,
followed by a parameter-free context term (the sequence mean added to every
position) so that the first position can act as a [CLS]-style summary of the
whole sequence. Nothing here is trainable.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

KINDS = ("image", "question", "answer", "kg_node")
_TABLE_SALT = {"image": 0x1A6E, "text": 0x7E47}


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.kind not in KINDS:
            raise InputError(f"unknown token kind {self.kind!r}")
        if not self.ids:
            raise InputError(f"empty {self.kind} token sequence")
        if min(self.ids) < 0:
            raise InputError(f"negative token id in {self.kind} sequence")


@dataclass
class EncodedFeatures:
    sequence: np.ndarray  # [B, L, d]
    summary: np.ndarray  # [B, d]


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def default_scale(d: int) -> float:
    """Per-entry standard deviation of the embedding tables (0.02 * sqrt(d))."""
    return 0.02 * math.sqrt(d)


class StubEncoder:
    """Embedding table + positions for one token family ("image" or "text")."""

    def __init__(self, vocab_size: int, d: int, max_len: int, seed: int, family: str, scale: float | None = None):
        if scale is None:
            scale = default_scale(d)
        if family not in _TABLE_SALT:
            raise InputError(f"unknown encoder family {family!r}")
        self.vocab_size = vocab_size
        self.d = d
        self.max_len = max_len
        self.family = family
        rng = np.random.default_rng([seed, _TABLE_SALT[family]])
        self.table = rng.normal(0.0, scale, size=(vocab_size, d))
        self.positions = scale * sinusoidal_positions(max_len, d)
        self.table.flags.writeable = False
        self.positions.flags.writeable = False

    def encode(self, ids) -> EncodedFeatures:
        if isinstance(ids, TokenSequence):
            ids = [ids.ids]
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError(f"expected a nonempty [B, L] id array, got shape {ids.shape}")
        if ids.shape[1] > self.max_len:
            raise InputError(f"{self.family} sequence length {ids.shape[1]} exceeds maximum {self.max_len}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise InputError(f"{self.family} token id out of range [0, {self.vocab_size})")
        x = self.table[ids] + self.positions[: ids.shape[1]]
        seq = x + x.mean(axis=1, keepdims=True)
        return EncodedFeatures(sequence=seq, summary=seq[:, 0].copy())


class Encoders:
    """The frozen image and text encoders, built from one seed."""

    def __init__(self, d: int, image_vocab: int, text_vocab: int, max_image_len: int, max_text_len: int,
                 seed: int = 0, scale: float | None = None):
        self.image = StubEncoder(image_vocab, d, max_image_len, seed, "image", scale)
        self.text = StubEncoder(text_vocab, d, max_text_len, seed, "text", scale)

    def encode_image(self, tokens) -> EncodedFeatures:
        if isinstance(tokens, TokenSequence) and tokens.kind != "image":
            raise InputError(f"encode_image got a {tokens.kind} sequence")
        return self.image.encode(tokens)

    def encode_text(self, tokens) -> EncodedFeatures:
        if isinstance(tokens, TokenSequence) and tokens.kind == "image":
            raise InputError("encode_text got an image sequence")
        return self.text.encode(tokens)

    def embed_kg_nodes(self, graph, tokenizer: "WordTokenizer") -> np.ndarray:
        """Summary vector of each node label, in node order -> [N_v, d]."""
        rows = []
        for node in graph.nodes:
            if not node.label.strip():
                raise InputError(f"node {node.id} has an empty label")
            seq = TokenSequence(tokenizer.encode(node.label), "kg_node")
            rows.append(self.encode_text(seq).summary[0])
        return np.stack(rows)


class WordTokenizer:
    """Whitespace tokenizer with a fixed word list.

    Known words get ids ``1..len(words)`` in the given order; id 0 is padding.
    Unknown words are hashed (crc32) into the remaining id range.
    """

    PAD = 0

    def __init__(self, vocab_size: int, words: Iterable[str] = ()):
        self.vocab_size = vocab_size
        self.word_to_id: dict[str, int] = {}
        for w in words:
            w = w.lower()
            if w not in self.word_to_id:
                self.word_to_id[w] = len(self.word_to_id) + 1
        if len(self.word_to_id) + 1 >= vocab_size:
            raise InputError(f"vocabulary of {vocab_size} cannot hold {len(self.word_to_id)} words plus hash buckets")

    def token_id(self, word: str) -> int:
        word = word.lower()
        if word in self.word_to_id:
            return self.word_to_id[word]
        base = len(self.word_to_id) + 1
        return base + zlib.crc32(word.encode()) % (self.vocab_size - base)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        return [self.token_id(w) for w in words]
