"""Checkpoint container: round trips, corruption handling, byte determinism."""

import struct

import numpy as np
import pytest

from npcfg.checkpoint import load_grammar, load_parameters, save_grammar, save_parameters
from npcfg.corpus import Vocabulary, toy_grammar
from npcfg.errors import CheckpointError
from npcfg.grammar import SymbolTable
from npcfg.params import compute_grammar, init_parameters


def small_params(mode, norm_after=False):
    sym = SymbolTable(num_nonterminals=2, num_preterminals=3)
    return init_parameters(
        mode, sym, vocab_size=7, embed_dim=6, depth=2, seed=9,
        norm_after_activation=norm_after,
    )


def small_vocab():
    return Vocabulary(words=["<unk>", "a", "b", "c", "d", "e", "f"])


# ---------------------------------------------------------------------------
# Round trips


def test_grammar_round_trip(tmp_path):
    g, vocab = toy_grammar()
    path = tmp_path / "g.ckpt"
    save_grammar(path, g, vocab=vocab)
    g2, vocab2 = load_grammar(path)
    np.testing.assert_array_equal(g2.root_logprobs, g.root_logprobs)
    np.testing.assert_array_equal(g2.binary_logprobs, g.binary_logprobs)
    np.testing.assert_array_equal(g2.unary_logprobs, g.unary_logprobs)
    assert g2.symbols == g.symbols
    assert vocab2.words == vocab.words and vocab2.unk == vocab.unk


def test_grammar_round_trip_without_vocab(tmp_path):
    g, _ = toy_grammar()
    path = tmp_path / "g.ckpt"
    save_grammar(path, g)
    _, vocab = load_grammar(path)
    assert vocab is None


@pytest.mark.parametrize(
    "mode,norm_after",
    [("baseline", False), ("relaxed", False), ("relaxed", True)],
)
def test_parameters_round_trip(tmp_path, mode, norm_after):
    p = small_params(mode, norm_after)
    path = tmp_path / "p.ckpt"
    save_parameters(path, p, vocab=small_vocab())
    out = load_parameters(path)
    p2 = out["params"]
    assert p2.mode == mode
    assert p2.embed_dim == p.embed_dim and p2.depth == p.depth
    assert p2.norm_after_activation == norm_after
    assert p2.symbols == p.symbols and p2.vocab_size == p.vocab_size
    assert out["vocab"].words == small_vocab().words
    assert out["training_state"] is None
    assert out["adam_tensors"] == {}
    orig = dict(p.param_items())
    loaded = dict(p2.param_items())
    assert set(loaded) == set(orig)
    for k in orig:
        np.testing.assert_array_equal(loaded[k], orig[k], err_msg=k)
    # the loaded parameters induce the very same grammar
    ga, gb = compute_grammar(p), compute_grammar(p2)
    np.testing.assert_array_equal(ga.binary_logprobs, gb.binary_logprobs)
    np.testing.assert_array_equal(ga.unary_logprobs, gb.unary_logprobs)


def test_loaded_parameters_are_writable(tmp_path):
    p = small_params("relaxed")
    path = tmp_path / "p.ckpt"
    save_parameters(path, p)
    p2 = load_parameters(path)["params"]
    p2.nt_embed += 1.0  # frombuffer views would blow up here


def test_training_state_and_adam_round_trip(tmp_path):
    p = small_params("baseline")
    state = {
        "next_epoch": 4,
        "best_val": 3.25,
        "since_improved": 1,
        "rng_state": '{"state": 123}',
    }
    adam = {
        "m.nt_embed": np.full_like(p.nt_embed, 0.5),
        "v.nt_embed": np.full_like(p.nt_embed, 0.25),
        "step": np.array(17.0),
    }
    path = tmp_path / "p.ckpt"
    save_parameters(path, p, training_state=state, adam_tensors=adam)
    out = load_parameters(path)
    assert out["training_state"] == state
    assert set(out["adam_tensors"]) == set(adam)
    for k, v in adam.items():
        np.testing.assert_array_equal(out["adam_tensors"][k], v)
    assert out["adam_tensors"]["step"].shape == ()


# ---------------------------------------------------------------------------
# Corruption


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    save_grammar(path, toy_grammar()[0])
    data = bytearray(path.read_bytes())
    data[:4] = b"ELF\x00"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_grammar(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "x.ckpt"
    save_grammar(path, toy_grammar()[0])
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_grammar(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "x.ckpt"
    save_grammar(path, toy_grammar()[0])
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_grammar(path)


def test_truncated_tensor_payload(tmp_path):
    path = tmp_path / "x.ckpt"
    save_grammar(path, toy_grammar()[0])
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_grammar(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "x.ckpt"
    save_grammar(path, toy_grammar()[0])
    path.write_bytes(path.read_bytes() + b"\x00" * 4)
    with pytest.raises(CheckpointError, match="trailing"):
        load_grammar(path)


def test_tiny_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NP")
    with pytest.raises(CheckpointError):
        load_grammar(path)


def test_error_messages_carry_path(tmp_path):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(CheckpointError, match="broken.ckpt"):
        load_grammar(path)


# ---------------------------------------------------------------------------
# Kind checks


def test_kind_mismatch(tmp_path):
    gpath = tmp_path / "g.ckpt"
    save_grammar(gpath, toy_grammar()[0])
    with pytest.raises(CheckpointError, match="kind"):
        load_parameters(gpath)
    ppath = tmp_path / "p.ckpt"
    save_parameters(ppath, small_params("relaxed"))
    with pytest.raises(CheckpointError, match="kind"):
        load_grammar(ppath)


# ---------------------------------------------------------------------------
# Determinism


def test_save_is_byte_deterministic(tmp_path):
    p = small_params("relaxed", norm_after=True)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    vocab = small_vocab()
    state = {"next_epoch": 1, "best_val": 2.0}
    save_parameters(a, p, vocab=vocab, training_state=state)
    save_parameters(b, p, vocab=vocab, training_state=state)
    assert a.read_bytes() == b.read_bytes()

    g, gv = toy_grammar()
    ga, gb = tmp_path / "ga.ckpt", tmp_path / "gb.ckpt"
    save_grammar(ga, g, vocab=gv)
    save_grammar(gb, g, vocab=gv)
    assert ga.read_bytes() == gb.read_bytes()
