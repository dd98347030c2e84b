"""End-to-end CLI runs through main(argv), including exit-code mapping."""

import csv
import json

import numpy as np
import pytest

from npcfg.checkpoint import load_grammar, load_parameters, save_parameters
from npcfg.cli import build_train_config, main
from npcfg.corpus import Vocabulary, load_treebank, parse_bracketed
from npcfg.errors import ConfigError
from npcfg.grammar import SymbolTable
from npcfg.params import init_parameters

SMALL_OVERRIDES = [
    "--override", "num_nonterminals=3",
    "--override", "num_preterminals=6",
    "--override", "embed_dim=16",
    "--override", "batch_size=8",
    "--override", "max_epochs=2",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    rc = main(
        [
            "synth", "--output-dir", str(out),
            "--train", "40", "--dev", "12", "--test", "12",
            "--max-len", "8", "--seed", "0",
        ]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main(
        ["train", "--data", str(data_dir / "manifest.json"), "--run-dir", str(out)]
        + SMALL_OVERRIDES
    )
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# Config assembly


def test_build_train_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text('{"max_epochs": 5, "embed_dim": 32, "seed": 4}')
    cfg = build_train_config(
        cfg_file,
        overrides=["max_epochs=9"],
        env={"NPCFG_MAX_EPOCHS": "7", "NPCFG_EMBED_DIM": "64"},
    )
    assert cfg.max_epochs == 9  # flag beats env beats file
    assert cfg.embed_dim == 64  # env beats file
    assert cfg.seed == 4  # file survives when nothing overrides it


def test_build_train_config_parses_json_values():
    cfg = build_train_config(
        None,
        overrides=["grad_clip=2.5", "shuffle=false", "mode=baseline"],
        env={},
    )
    assert cfg.grad_clip == 2.5
    assert cfg.shuffle is False
    assert cfg.mode == "baseline"


def test_build_train_config_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown config fields"):
        build_train_config(None, overrides=["learning_rate=0.1"], env={})
    with pytest.raises(ConfigError, match="field=value"):
        build_train_config(None, overrides=["max_epochs"], env={})


def test_build_train_config_validates_result():
    with pytest.raises(ConfigError):
        build_train_config(None, overrides=["mode=quantum"], env={})


# ---------------------------------------------------------------------------
# synth


def test_synth_outputs(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert set(manifest) == {"train", "dev", "test"}
    trees = load_treebank(data_dir / "train.trees")
    assert len(trees) == 40
    assert all(2 <= len(t.tokens()) <= 8 for t in trees)
    g, vocab = load_grammar(data_dir / "generator.ckpt")
    assert vocab is not None
    assert g.symbols.num_nonterminals == 6


def test_synth_is_seed_deterministic(tmp_path, data_dir):
    other = tmp_path / "again"
    rc = main(
        [
            "synth", "--output-dir", str(other),
            "--train", "40", "--dev", "12", "--test", "12",
            "--max-len", "8", "--seed", "0",
        ]
    )
    assert rc == 0
    assert (other / "train.trees").read_text() == (data_dir / "train.trees").read_text()


def test_synth_rejects_empty_request(tmp_path):
    rc = main(
        [
            "synth", "--output-dir", str(tmp_path / "x"),
            "--train", "0", "--dev", "0", "--test", "0",
        ]
    )
    assert rc == 1


# ---------------------------------------------------------------------------
# train


def test_train_run_dir_contents(run_dir, capsys):
    for name in ("config.json", "runlog.jsonl", "best.ckpt", "last.ckpt"):
        assert (run_dir / name).exists(), name
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["max_epochs"] == 2 and cfg["embed_dim"] == 16
    snap = load_parameters(run_dir / "best.ckpt")
    assert snap["vocab"] is not None
    assert snap["params"].symbols.num_nonterminals == 3


def test_train_env_override_and_flag_precedence(tmp_path, data_dir, monkeypatch, capsys):
    monkeypatch.setenv("NPCFG_MAX_EPOCHS", "1")
    monkeypatch.setenv("NPCFG_EMBED_DIM", "16")
    out = tmp_path / "envrun"
    rc = main(
        [
            "train", "--data", str(data_dir / "manifest.json"),
            "--run-dir", str(out),
            "--override", "num_nonterminals=3",
            "--override", "num_preterminals=6",
            "--override", "batch_size=16",
            "--override", "max_epochs=2",
        ]
    )
    assert rc == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["max_epochs"] == 2  # flag wins over env
    assert cfg["embed_dim"] == 16  # env applies where no flag given
    line = capsys.readouterr().out
    assert "seed 0:" in line and "epochs=2" in line


def test_train_multiple_seeds(tmp_path, data_dir, capsys):
    out = tmp_path / "seeds"
    rc = main(
        [
            "train", "--data", str(data_dir / "manifest.json"),
            "--run-dir", str(out), "--seeds", "2", "3",
            "--override", "num_nonterminals=2",
            "--override", "num_preterminals=4",
            "--override", "embed_dim=8",
            "--override", "batch_size=16",
            "--override", "max_epochs=1",
        ]
    )
    assert rc == 0
    assert (out / "seed2" / "best.ckpt").exists()
    assert (out / "seed3" / "best.ckpt").exists()
    stdout = capsys.readouterr().out
    assert "seed 2:" in stdout and "seed 3:" in stdout
    cfg2 = json.loads((out / "seed2" / "config.json").read_text())
    assert cfg2["seed"] == 2


def test_train_gold_focusing(tmp_path, data_dir, capsys):
    out = tmp_path / "gold"
    rc = main(
        [
            "train", "--data", str(data_dir / "manifest.json"),
            "--run-dir", str(out),
        ]
        + SMALL_OVERRIDES
        + ["--override", "focusing=gold", "--override", "max_epochs=1"]
    )
    assert rc == 0
    log_lines = (out / "runlog.jsonl").read_text().splitlines()
    assert json.loads(log_lines[-1])["skipped_train"] == 0


def test_train_missing_manifest_exits_2(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope.json")])
    assert rc == 2
    assert "data error" in capsys.readouterr().err


def test_train_unknown_field_exits_1(data_dir, capsys):
    rc = main(
        [
            "train", "--data", str(data_dir / "manifest.json"),
            "--override", "bogus_field=1",
        ]
    )
    assert rc == 1
    assert "config error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def test_eval_report(run_dir, data_dir, capsys):
    rc = main(
        [
            "eval", "--ckpt", str(run_dir / "best.ckpt"),
            "--data", str(data_dir / "manifest.json"),
            "--split", "test", "--nll",
        ]
    )
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["split"] == "test" and report["decoder"] == "mbr"
    assert report["micro"] is False
    (entry,) = report["per_checkpoint"]
    assert 0.0 <= entry["f1"] <= 1.0
    assert np.isfinite(entry["nll"]) and entry["skipped"] == 0
    assert report["mean_f1"] == report["max_f1"] == entry["f1"]


def test_eval_accepts_grammar_checkpoints(data_dir, capsys):
    rc = main(
        [
            "eval", "--ckpt", str(data_dir / "generator.ckpt"),
            "--data", str(data_dir / "manifest.json"),
            "--split", "dev", "--decoder", "viterbi", "--micro",
        ]
    )
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["micro"] is True
    # the generator grammar parses its own samples far better than chance
    assert report["max_f1"] > 0.4


def test_eval_per_sentence_csv(run_dir, data_dir, tmp_path, capsys):
    out_csv = tmp_path / "per.csv"
    rc = main(
        [
            "eval", "--ckpt", str(run_dir / "best.ckpt"),
            "--data", str(data_dir / "manifest.json"),
            "--split", "dev", "--per-sentence", str(out_csv),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    with open(out_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 12
    assert set(rows[0]) == {"checkpoint", "index", "n_tokens", "f1"}
    assert all(0.0 <= float(r["f1"]) <= 1.0 for r in rows)


def test_eval_multi_checkpoint_mean_and_max(run_dir, data_dir, capsys):
    rc = main(
        [
            "eval",
            "--ckpt", str(run_dir / "best.ckpt"), str(run_dir / "last.ckpt"),
            "--data", str(data_dir / "manifest.json"),
            "--split", "dev",
        ]
    )
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    f1s = [e["f1"] for e in report["per_checkpoint"]]
    assert len(f1s) == 2
    assert report["mean_f1"] == pytest.approx(float(np.mean(f1s)))
    assert report["max_f1"] == pytest.approx(max(f1s))


def test_eval_vocab_mismatch_exits_2(run_dir, data_dir, tmp_path, capsys):
    sym = SymbolTable(num_nonterminals=2, num_preterminals=2)
    p = init_parameters("relaxed", sym, vocab_size=2, embed_dim=4, seed=0)
    other = tmp_path / "other.ckpt"
    save_parameters(other, p, vocab=Vocabulary(words=["<unk>", "x"]))
    rc = main(
        [
            "eval", "--ckpt", str(run_dir / "best.ckpt"), str(other),
            "--data", str(data_dir / "manifest.json"),
        ]
    )
    assert rc == 2
    assert "vocabulary" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# decode


def test_decode_round_trip(run_dir, tmp_path, capsys):
    inp = tmp_path / "sents.txt"
    inp.write_text("the dog sleeps\nalex sees a zebra today\n")
    out = tmp_path / "trees.txt"
    rc = main(
        [
            "decode", "--ckpt", str(run_dir / "best.ckpt"),
            "--input", str(inp), "--output", str(out),
        ]
    )
    assert rc == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    t0 = parse_bracketed(lines[0])
    assert t0.tokens() == ["the", "dog", "sleeps"]
    t1 = parse_bracketed(lines[1])
    assert len(t1.tokens()) == 5
    assert "<unk>" in t1.tokens()  # zebra is out of vocabulary


def test_decode_to_stdout(run_dir, tmp_path, capsys):
    inp = tmp_path / "sents.txt"
    inp.write_text("the cat sleeps\n")
    rc = main(["decode", "--ckpt", str(run_dir / "best.ckpt"), "--input", str(inp)])
    assert rc == 0
    line = capsys.readouterr().out.strip()
    assert parse_bracketed(line).tokens() == ["the", "cat", "sleeps"]


def test_decode_workers_match_serial(run_dir, data_dir, tmp_path, capsys):
    tokens = [t.tokens() for t in load_treebank(data_dir / "dev.trees")][:6]
    inp = tmp_path / "sents.txt"
    inp.write_text("".join(" ".join(toks) + "\n" for toks in tokens))
    one, two = tmp_path / "w1.txt", tmp_path / "w2.txt"
    for workers, out in (("1", one), ("2", two)):
        rc = main(
            [
                "decode", "--ckpt", str(run_dir / "best.ckpt"),
                "--input", str(inp), "--output", str(out),
                "--workers", workers,
            ]
        )
        assert rc == 0
    assert one.read_text() == two.read_text()


def test_decode_unparseable_exits_3(data_dir, tmp_path, capsys):
    # the generator grammar has no rule deriving two determiners
    inp = tmp_path / "sents.txt"
    inp.write_text("the the\n")
    rc = main(
        ["decode", "--ckpt", str(data_dir / "generator.ckpt"), "--input", str(inp)]
    )
    assert rc == 3
    assert "numeric error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diagnose


def test_diagnose_outputs(run_dir, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    csv_dir = tmp_path / "csvs"
    rc = main(
        [
            "diagnose", "--ckpt", str(run_dir / "best.ckpt"),
            "--output", str(report_path), "--csv-dir", str(csv_dir),
        ]
    )
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert report["mode"] == "relaxed"
    assert set(report["zero_ratio"]) == {"root", "binary", "unary"}
    with open(csv_dir / "jsd_histogram.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert set(rows[0]) == {"family", "bin_lo", "bin_hi", "count"}
    assert sum(1 for r in rows if r["family"] == "binary") == 14
    binary_pairs = 3 * 2 // 2
    assert sum(int(r["count"]) for r in rows if r["family"] == "binary") == binary_pairs
    with open(csv_dir / "summary.csv", newline="") as f:
        srows = list(csv.DictReader(f))
    metrics = {(r["family"], r["metric"]) for r in srows}
    assert ("binary", "gpj") in metrics and ("unary", "local_ppl") in metrics
    assert ("children_out", "scale_mean") in metrics


def test_diagnose_rejects_grammar_checkpoint(data_dir, capsys):
    rc = main(["diagnose", "--ckpt", str(data_dir / "generator.ckpt")])
    assert rc == 2
    assert "parameters" in capsys.readouterr().err
