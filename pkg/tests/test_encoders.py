import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcmi.encoders import Encoders, StubEncoder, TokenSequence, WordTokenizer, default_scale
from kgcmi.errors import InputError
from kgcmi.kge import KnowledgeGraph, Node


def _encoders(seed=0, d=64):
    return Encoders(d, image_vocab=64, text_vocab=256, max_image_len=8, max_text_len=8, seed=seed)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.mark.parametrize("kind", ["image", "question"])
def test_same_tokens_same_seed_bit_identical(kind):
    enc_a, enc_b = _encoders(), _encoders()
    seq = TokenSequence((3, 9, 1, 4), kind)
    fn = "encode_image" if kind == "image" else "encode_text"
    a, b = getattr(enc_a, fn)(seq), getattr(enc_b, fn)(seq)
    assert a.sequence.tobytes() == b.sequence.tobytes()
    assert a.summary.tobytes() == b.summary.tobytes()


@pytest.mark.parametrize("kind", ["image", "question"])
def test_permuting_tokens_changes_output(kind):
    enc = _encoders()
    fn = getattr(enc, "encode_image" if kind == "image" else "encode_text")
    a = fn(TokenSequence((3, 9, 1, 4), kind))
    b = fn(TokenSequence((9, 3, 4, 1), kind))
    assert not np.allclose(a.sequence, b.sequence)
    assert not np.allclose(a.summary, b.summary)


@pytest.mark.parametrize("kind", ["image", "question"])
def test_distinct_single_tokens_not_parallel(kind):
    enc = _encoders(seed=0)
    fn = getattr(enc, "encode_image" if kind == "image" else "encode_text")
    a = fn(TokenSequence((5,), kind)).summary[0]
    b = fn(TokenSequence((6,), kind)).summary[0]
    # rebuild the single-token summary from the seeded table directly
    table = (enc.image if kind == "image" else enc.text).table
    pos = (enc.image if kind == "image" else enc.text).positions[0]
    np.testing.assert_allclose(a, 2.0 * (table[5] + pos), atol=1e-15)
    assert _cos(a, b) < 1.0


def test_image_and_text_tables_independent():
    enc = _encoders()
    assert not np.allclose(enc.image.table[:10], enc.text.table[:10])


def test_summary_is_first_position_and_shapes():
    enc = _encoders(d=16)
    out = enc.encode_text(np.array([[1, 2, 3], [4, 5, 6]]))
    assert out.sequence.shape == (2, 3, 16)
    assert out.summary.shape == (2, 16)
    np.testing.assert_array_equal(out.summary, out.sequence[:, 0])


def test_encoders_are_frozen():
    enc = _encoders()
    assert not enc.image.table.flags.writeable
    assert not enc.text.table.flags.writeable
    with pytest.raises(ValueError):
        enc.text.table[0, 0] = 1.0


def test_out_of_range_token_rejected():
    enc = _encoders()
    with pytest.raises(InputError):
        enc.encode_image(TokenSequence((64,), "image"))
    with pytest.raises(InputError):
        TokenSequence((), "question")
    with pytest.raises(InputError):
        TokenSequence((-1,), "question")
    with pytest.raises(InputError):
        enc.encode_image(TokenSequence((1,), "question"))
    with pytest.raises(InputError):
        enc.encode_text(np.ones((1, 9), dtype=int))


@settings(max_examples=50)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=8), st.integers(0, 1000))
def test_summary_norm_bounded(ids, seed):
    enc = _encoders(seed=seed)
    norm = float(np.linalg.norm(enc.encode_text(TokenSequence(ids, "question")).summary))
    assert 0.0 < norm <= 10.0


def test_default_scale():
    assert default_scale(64) == pytest.approx(0.16)
    assert StubEncoder(8, 64, 4, 0, "text").table.std() == pytest.approx(0.16, rel=0.1)


# -- knowledge-graph node features ---------------------------------------------


def _graph(labels):
    nodes = [Node(0, "body", "global"), Node(1, "abdomen", "organ")]
    nodes += [Node(2 + i, lab, "finding", 1) for i, lab in enumerate(labels)]
    return KnowledgeGraph(nodes)


def test_identical_labels_identical_rows():
    graph = _graph(["liver", "liver", "cyst"])
    tok = WordTokenizer(256, ["liver", "cyst", "body", "abdomen"])
    rows = _encoders().embed_kg_nodes(graph, tok)
    assert rows.shape == (5, 64)
    np.testing.assert_array_equal(rows[2], rows[3])
    assert not np.allclose(rows[2], rows[4])


def test_node_row_equals_text_summary():
    graph = _graph(["liver"])
    tok = WordTokenizer(256, ["body", "abdomen", "liver"])
    enc = _encoders()
    rows = enc.embed_kg_nodes(graph, tok)
    expected = enc.encode_text(TokenSequence(tok.encode("liver"), "question")).summary[0]
    np.testing.assert_array_equal(rows[2], expected)


def test_empty_label_rejected():
    class _Stub:
        nodes = [Node(0, "  ", "global")]

    with pytest.raises(InputError):
        _encoders().embed_kg_nodes(_Stub(), WordTokenizer(16))


def test_tokenizer_known_and_hashed_words():
    tok = WordTokenizer(32, ["a", "b"])
    assert tok.encode("a b A") == [1, 2, 1]
    unknown = tok.token_id("zebra")
    assert 3 <= unknown < 32
    assert tok.token_id("zebra") == unknown
