"""Command-line interface: train, eval, decode, diagnose, synth.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
error. Training settings come from an optional JSON config file; any field
can be overridden by an ``NPCFG_<FIELD>`` environment variable, and both by
repeated ``--override field=value`` flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import multiprocessing
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_grammar, load_parameters, save_grammar
from .corpus import (
    GrammarSampler,
    attach_focus_trees,
    corpus_f1,
    load_manifest,
    load_treebank,
    make_corpus,
    sentence_f1,
    toy_grammar,
    trees_to_file,
)
from .diagnostics import diagnose
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GrammarShapeError,
    NpcfgError,
    NumericError,
    VocabularyMismatchError,
)
from .inference import SpanMask, mbr_decode, viterbi_decode
from .params import compute_grammar
from .trees import tree_to_spans
from .training import TrainConfig, corpus_nll, train

ENV_PREFIX = "NPCFG_"


# ---------------------------------------------------------------------------
# Config assembly


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_train_config(config_path=None, overrides=None, env=None) -> TrainConfig:
    """Merge config file < environment < --override flags into a TrainConfig."""
    valid = {f.name for f in fields(TrainConfig)}
    merged: dict = {}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {config_path} must hold a JSON object")
        merged.update(data)
    env = os.environ if env is None else env
    for name in valid:
        key = ENV_PREFIX + name.upper()
        if key in env:
            merged[name] = _parse_value(env[key])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--override expects field=value, got {item!r}")
        name, _, value = item.partition("=")
        merged[name.strip()] = _parse_value(value)
    unknown = set(merged) - valid
    if unknown:
        raise ConfigError(
            f"unknown config fields: {sorted(unknown)}; valid: {sorted(valid)}"
        )
    cfg = TrainConfig(**merged)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers


def _load_split(manifest: dict, split: str, vocab=None, max_len=None, cutoff=10000):
    path = manifest["splits"].get(split)
    if path is None:
        raise DataError(f"manifest has no {split!r} split")
    trees = load_treebank(path)
    return make_corpus(trees, vocab=vocab, max_len=max_len, cutoff=cutoff)


def _load_model(path):
    """Grammar + vocab from either a parameter or a grammar checkpoint."""
    try:
        snap = load_parameters(path)
        return compute_grammar(snap["params"]), snap["vocab"], snap["params"]
    except CheckpointError:
        grammar, vocab = load_grammar(path)
        return grammar, vocab, None


def _focus_masks_for(corpus, mixture: bool):
    if mixture and corpus.focus_trees is not None:
        return [
            [SpanMask.from_trees(len(toks), [t]) for t in trees]
            for toks, trees in zip(corpus.tokens, corpus.focus_trees)
        ]
    return corpus.focus_masks()


_WORKER_STATE: dict = {}


def _worker_init(grammar, decoder):
    _WORKER_STATE["grammar"] = grammar
    _WORKER_STATE["decoder"] = decoder


def _decode_one(grammar, decoder: str, sentence):
    if decoder == "viterbi":
        tree, _ = viterbi_decode(grammar, sentence)
        return tree
    return mbr_decode(grammar, sentence)


def _worker_decode(sentence):
    return _decode_one(_WORKER_STATE["grammar"], _WORKER_STATE["decoder"], sentence)


def _decode_corpus(grammar, sentences, decoder: str, workers: int):
    """Decode every sentence, optionally across processes, order preserved."""
    if workers > 1 and len(sentences) > 1:
        with multiprocessing.Pool(
            workers, initializer=_worker_init, initargs=(grammar, decoder)
        ) as pool:
            return pool.map(_worker_decode, sentences)
    return [_decode_one(grammar, decoder, s) for s in sentences]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    cfg = build_train_config(args.config, args.override)
    manifest = load_manifest(args.data)
    train_corpus, vocab = _load_split(
        manifest, "train", max_len=args.max_len, cutoff=args.vocab_cutoff
    )
    dev_corpus, _ = _load_split(manifest, "dev", vocab=vocab)

    masks = None
    if cfg.focusing == "files":
        paths = manifest["focus_trees"].get("train")
        if not paths:
            raise DataError("focusing=files needs focus_trees.train in the manifest")
        attach_focus_trees(train_corpus, paths)
        masks = _focus_masks_for(train_corpus, cfg.focus_mixture)
    elif cfg.focusing == "gold":
        masks = _focus_masks_for(train_corpus, cfg.focus_mixture)

    seeds = args.seeds if args.seeds else [cfg.seed]
    base_dir = Path(args.run_dir) if args.run_dir else None
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        run_dir = base_dir
        if base_dir is not None and len(seeds) > 1:
            run_dir = base_dir / f"seed{seed}"
        best, runlog = train(
            run_cfg,
            train_corpus.sentences,
            dev_corpus.sentences,
            vocab.size,
            masks=masks,
            run_dir=run_dir,
            vocab=vocab,
            resume=args.resume,
        )
        val_nll, _ = corpus_nll(best, dev_corpus.sentences)
        where = f" run_dir={run_dir}" if run_dir is not None else ""
        print(
            f"seed {seed}: epochs={runlog.epochs_run} "
            f"best_val_nll={val_nll:.4f}{where}"
        )
    return 0


def cmd_eval(args) -> int:
    results = []
    ref_vocab = None
    models = []
    for path in args.ckpt:
        grammar, vocab, _ = _load_model(path)
        if vocab is None:
            raise DataError(f"checkpoint {path} carries no vocabulary")
        if ref_vocab is None:
            ref_vocab = vocab
        elif vocab.words != ref_vocab.words:
            raise VocabularyMismatchError(
                f"checkpoint {path} disagrees with {args.ckpt[0]} about the vocabulary"
            )
        models.append((path, grammar))

    manifest = load_manifest(args.data)
    corpus, _ = _load_split(manifest, args.split, vocab=ref_vocab, max_len=args.max_len)
    gold_sets = corpus.gold_span_sets()

    rows = []
    for path, grammar in models:
        trees = _decode_corpus(grammar, corpus.sentences, args.decoder, args.workers)
        pred_sets = [tree_to_spans(t) for t in trees]
        f1 = corpus_f1(gold_sets, pred_sets, micro=args.micro)
        entry = {"checkpoint": str(path), "f1": f1}
        if args.nll:
            nll, skipped = corpus_nll(grammar, corpus.sentences)
            entry["nll"] = nll
            entry["skipped"] = skipped
        results.append(entry)
        if args.per_sentence:
            for i, (g, p) in enumerate(zip(gold_sets, pred_sets)):
                rows.append(
                    {
                        "checkpoint": str(path),
                        "index": i,
                        "n_tokens": len(corpus.tokens[i]),
                        "f1": sentence_f1(g, p),
                    }
                )

    if args.per_sentence:
        with open(args.per_sentence, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["checkpoint", "index", "n_tokens", "f1"])
            writer.writeheader()
            writer.writerows(rows)

    f1s = [r["f1"] for r in results]
    report = {
        "split": args.split,
        "decoder": args.decoder,
        "micro": bool(args.micro),
        "per_checkpoint": results,
        "mean_f1": float(np.mean(f1s)),
        "max_f1": float(np.max(f1s)),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_decode(args) -> int:
    grammar, vocab, params = _load_model(args.ckpt)
    if vocab is None:
        raise DataError(f"checkpoint {args.ckpt} carries no vocabulary")
    symbols = grammar.symbols
    sentences = []
    with open(args.input, encoding="utf-8") as f:
        for raw in f:
            tokens = raw.split()
            if tokens:
                sentences.append(vocab.encode(tokens))
    trees = _decode_corpus(grammar, sentences, args.decoder, args.workers)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for tree in trees:
            out.write(tree.to_bracketed(symbols, vocab) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_diagnose(args) -> int:
    snap = load_parameters(args.ckpt)
    report = diagnose(
        snap["params"],
        bins=args.bins,
        overlap_mass=args.overlap_mass,
        max_pairs=args.max_pairs,
        seed=args.seed,
    )
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    if args.csv_dir:
        _write_diag_csvs(report, Path(args.csv_dir))
    return 0


def _write_diag_csvs(report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    with open(out_dir / "jsd_histogram.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["family", "bin_lo", "bin_hi", "count"])
        for fam in ("binary", "unary"):
            hist = d[fam]["jsd_histogram"]
            edges = hist["edges"]
            for i, c in enumerate(hist["counts"]):
                w.writerow([fam, edges[i], edges[i + 1], c])
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["family", "metric", "value"])
        for fam in ("binary", "unary"):
            for key in (
                "gpj",
                "local_ppl",
                "global_ppl",
                "mean_entropy",
                "overlap_ratio_mean",
                "collapsed_pair_fraction",
            ):
                w.writerow([fam, key, d[fam][key]])
        for name, stats in d["scale_stats"].items():
            for key, value in stats.items():
                w.writerow([name, f"scale_{key}", value])


def cmd_synth(args) -> int:
    grammar, vocab = toy_grammar()
    sampler = GrammarSampler(grammar, seed=args.seed)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    total = 0
    for split, count in (("train", args.train), ("dev", args.dev), ("test", args.test)):
        if count <= 0:
            continue
        trees = sampler.sample_corpus(count, max_len=args.max_len)
        trees_to_file(trees, out_dir / f"{split}.trees", grammar.symbols, vocab)
        manifest[split] = f"{split}.trees"
        lengths = [t.leaf_count() for t in trees]
        print(
            f"{split}: {count} sentences, mean length "
            f"{float(np.mean(lengths)):.2f}, max {max(lengths)}"
        )
        total += count
    if not manifest:
        raise ConfigError("nothing to generate: all split sizes are zero")
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    save_grammar(out_dir / "generator.ckpt", grammar, vocab=vocab)
    print(f"wrote {total} sentences and manifest.json to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="npcfg",
        description="Neural PCFG induction: training, parsing, diagnostics.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a corpus manifest")
    t.add_argument("--config", help="JSON file of training settings")
    t.add_argument("--data", required=True, help="corpus manifest (JSON)")
    t.add_argument("--run-dir", help="directory for checkpoints and logs")
    t.add_argument("--seeds", type=int, nargs="+", help="run once per seed")
    t.add_argument("--resume", action="store_true", help="resume from last.ckpt")
    t.add_argument(
        "--override",
        action="append",
        metavar="FIELD=VALUE",
        help="override a config field (repeatable)",
    )
    t.add_argument("--max-len", type=int, help="drop training sentences longer than this")
    t.add_argument("--vocab-cutoff", type=int, default=10000)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score checkpoints with unlabeled span F1")
    e.add_argument("--ckpt", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "dev", "test"), default="test")
    e.add_argument("--decoder", choices=("mbr", "viterbi"), default="mbr")
    e.add_argument("--micro", action="store_true", help="corpus-level micro F1")
    e.add_argument("--nll", action="store_true", help="also report mean NLL")
    e.add_argument("--per-sentence", help="write per-sentence F1 rows to this CSV")
    e.add_argument("--max-len", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="parse raw token lines into trees")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True, help="one sentence of tokens per line")
    d.add_argument("--output", help="bracketed trees file (default stdout)")
    d.add_argument("--decoder", choices=("mbr", "viterbi"), default="mbr")
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_decode)

    g = sub.add_parser("diagnose", help="rule-distribution diagnostics for a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--output", help="write the JSON report here (default stdout)")
    g.add_argument("--csv-dir", help="also write CSV summaries into this directory")
    g.add_argument("--bins", type=int, default=14)
    g.add_argument("--overlap-mass", type=float, default=0.9)
    g.add_argument("--max-pairs", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("synth", help="generate a synthetic treebank from a toy grammar")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--dev", type=int, default=400)
    s.add_argument("--test", type=int, default=400)
    s.add_argument("--max-len", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except (GrammarShapeError, NpcfgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
