"""Versioned binary checkpoints for grammars and parameter sets.

Layout (documented here and in the README):

    bytes 0..3    magic b"NPCF"
    bytes 4..7    container version, uint32 little-endian (currently 1)
    bytes 8..15   header length H, uint64 little-endian
    bytes 16..    H bytes of canonical JSON (utf-8, sorted keys)
    then          tensor payload: the header's "tensors" list in order,
                  each a C-order float64 little-endian block

The header carries symbol names, the vocabulary, and (for parameter
checkpoints) mode/depth plus optional training state so runs can resume.
Identical inputs serialize to identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .grammar import Grammar, SymbolTable
from .params import (
    BLOCK_RESIDUAL_RELU,
    BLOCK_RMS_GELU,
    LayerBlock,
    ParameterSet,
)

MAGIC = b"NPCF"
VERSION = 1


def _pack(header: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["tensors"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in tensors
    ]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    for _, arr in tensors:
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def _unpack(data: bytes, path) -> tuple[dict, dict]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(
            f"{path}: container version {version} unsupported (expected {VERSION})"
        )
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    offset = 16 + hlen
    tensors = {}
    for spec in header.get("tensors", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor payload for {spec['name']}")
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(shape)
        tensors[spec["name"]] = arr.astype(float)  # writable copy, native order
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors


def _symbols_from_header(header: dict) -> SymbolTable:
    return SymbolTable(
        num_nonterminals=int(header["num_nonterminals"]),
        num_preterminals=int(header["num_preterminals"]),
        nonterminal_names=tuple(header["nonterminal_names"]),
        preterminal_names=tuple(header["preterminal_names"]),
    )


def _vocab_from_header(header: dict):
    from .corpus import Vocabulary

    if header.get("vocab") is None:
        return None
    return Vocabulary(words=list(header["vocab"]), unk=header.get("unk", "<unk>"))


def save_grammar(path, grammar: Grammar, vocab=None) -> None:
    header = {
        "kind": "grammar",
        "num_nonterminals": grammar.symbols.num_nonterminals,
        "num_preterminals": grammar.symbols.num_preterminals,
        "nonterminal_names": list(grammar.symbols.nonterminal_names),
        "preterminal_names": list(grammar.symbols.preterminal_names),
        "vocab": None if vocab is None else list(vocab.words),
        "unk": None if vocab is None else vocab.unk,
    }
    tensors = [
        ("root_logprobs", grammar.root_logprobs),
        ("binary_logprobs", grammar.binary_logprobs),
        ("unary_logprobs", grammar.unary_logprobs),
    ]
    Path(path).write_bytes(_pack(header, tensors))


def load_grammar(path):
    header, tensors = _unpack(Path(path).read_bytes(), path)
    if header.get("kind") != "grammar":
        raise CheckpointError(f"{path}: kind {header.get('kind')!r}, expected grammar")
    g = Grammar(
        symbols=_symbols_from_header(header),
        root_logprobs=tensors["root_logprobs"],
        binary_logprobs=tensors["binary_logprobs"],
        unary_logprobs=tensors["unary_logprobs"],
    )
    g.check_shapes()
    return g, _vocab_from_header(header)


def save_parameters(
    path,
    params: ParameterSet,
    vocab=None,
    training_state: dict | None = None,
    adam_tensors: dict | None = None,
) -> None:
    """Write a parameter checkpoint; optimizer tensors ride along for resume."""
    header = {
        "kind": "parameters",
        "mode": params.mode,
        "embed_dim": params.embed_dim,
        "depth": params.depth,
        "norm_after_activation": params.norm_after_activation,
        "vocab_size": params.vocab_size,
        "num_nonterminals": params.symbols.num_nonterminals,
        "num_preterminals": params.symbols.num_preterminals,
        "nonterminal_names": list(params.symbols.nonterminal_names),
        "preterminal_names": list(params.symbols.preterminal_names),
        "vocab": None if vocab is None else list(vocab.words),
        "unk": None if vocab is None else vocab.unk,
        "training_state": training_state,
    }
    tensors = list(params.param_items())
    if adam_tensors is not None:
        for key in sorted(adam_tensors):
            tensors.append((f"adam.{key}", adam_tensors[key]))
    Path(path).write_bytes(_pack(header, tensors))


def load_parameters(path) -> dict:
    """Read a parameter checkpoint.

    Returns a dict with keys ``params``, ``vocab``, ``training_state``, and
    ``adam_tensors`` (the latter two may be None / empty).
    """
    header, tensors = _unpack(Path(path).read_bytes(), path)
    if header.get("kind") != "parameters":
        raise CheckpointError(f"{path}: kind {header.get('kind')!r}, expected parameters")
    symbols = _symbols_from_header(header)
    mode = header["mode"]
    depth = int(header["depth"])
    d = int(header["embed_dim"])

    def take(name):
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        return tensors[name]

    def stack(prefix, kind):
        blocks = []
        for i in range(depth):
            wname = f"{prefix}.{i}.weight"
            if wname not in tensors:
                break
            gname = f"{prefix}.{i}.gain"
            blocks.append(
                LayerBlock(kind, take(wname), tensors.get(gname))
            )
        return blocks

    params = ParameterSet(
        mode=mode,
        symbols=symbols,
        vocab_size=int(header["vocab_size"]),
        embed_dim=d,
        depth=depth,
        root_embed=take("root_embed"),
        nt_embed=take("nt_embed"),
        pt_embed=take("pt_embed"),
        root_out=take("root_out"),
        children_out=take("children_out"),
        terminal_out=take("terminal_out"),
        root_mlp=stack("root_mlp", BLOCK_RESIDUAL_RELU),
        terminal_mlp=stack("terminal_mlp", BLOCK_RESIDUAL_RELU),
        binary_mlp=stack("binary_mlp", BLOCK_RMS_GELU),
        unary_mlp=stack("unary_mlp", BLOCK_RMS_GELU),
        norm_after_activation=bool(header.get("norm_after_activation", False)),
    )
    adam = {
        name[len("adam.") :]: arr
        for name, arr in tensors.items()
        if name.startswith("adam.")
    }
    return {
        "params": params,
        "vocab": _vocab_from_header(header),
        "training_state": header.get("training_state"),
        "adam_tensors": adam,
    }
