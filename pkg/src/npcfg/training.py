"""Training loop: batched NLL gradients, Adam, early stopping, run logging.

The gradient of the batch NLL w.r.t. the rule log-probabilities is the
negative mean of per-sentence expected rule counts; it is pushed through the
parameterization by :func:`npcfg.params.backward`. Sentences whose (masked)
likelihood is zero are logged and skipped. With a fixed seed and config the
whole run is bit-deterministic, including checkpoint bytes; run logs are
deterministic except for wall-time fields.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_parameters, save_parameters
from .errors import ConfigError, NumericError
from .grammar import is_log_zero
from .inference import RuleCounts, SpanMask, build_chart, expected_rule_counts
from .params import (
    ParameterSet,
    backward,
    forward_with_cache,
    init_parameters,
)

# Epoch budgets used in the experiments this package reproduces: the long
# schedule and the short appendix-style schedule.
EPOCH_PRESET_LONG = 30
EPOCH_PRESET_SHORT = 10


@dataclass
class TrainConfig:
    mode: str = "relaxed"
    num_nonterminals: int = 30
    num_preterminals: int | None = None  # defaults to 2x nonterminals
    embed_dim: int = 256
    depth: int = 2
    norm_after_activation: bool = False
    lr: float = 2e-3
    beta1: float = 0.75
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = EPOCH_PRESET_LONG
    patience: int = 3
    grad_clip: float | None = None  # off unless explicitly set
    focusing: str = "none"  # none | gold | files
    focus_mixture: bool = False  # per-tree mixture instead of span-union masks
    seed: int = 0
    eval_every: int = 0  # extra validation every N batches; 0 = per epoch only
    shuffle: bool = True

    def validate(self) -> None:
        if self.mode not in ("baseline", "relaxed"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.num_nonterminals < 1:
            raise ConfigError("num_nonterminals must be >= 1")
        if self.num_preterminals is not None and self.num_preterminals < 1:
            raise ConfigError("num_preterminals must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.focusing not in ("none", "gold", "files"):
            raise ConfigError(f"unknown focusing {self.focusing!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_params(params: ParameterSet) -> "AdamState":
        return AdamState(
            m={name: np.zeros_like(arr) for name, arr in params.param_items()},
            v={name: np.zeros_like(arr) for name, arr in params.param_items()},
        )

    def to_tensors(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["step"] = np.array([float(self.step)])
        return out

    @staticmethod
    def from_tensors(tensors: dict, params: ParameterSet) -> "AdamState":
        state = AdamState.for_params(params)
        for name in state.m:
            if f"m.{name}" in tensors:
                state.m[name] = tensors[f"m.{name}"]
            if f"v.{name}" in tensors:
                state.v[name] = tensors[f"v.{name}"]
        if "step" in tensors:
            state.step = int(tensors["step"][0])
        return state


def adam_step(params: ParameterSet, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place, deterministic order."""
    if cfg.grad_clip is not None:
        sq = sum(float((g * g).sum()) for _, g in sorted(grads.items()))
        norm = np.sqrt(sq)
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, arr in params.param_items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        arr -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def batch_loss(
    params: ParameterSet, sentences, masks=None
) -> tuple[float, dict | None, int, int]:
    """Mean NLL over the batch and its parameter gradients.

    ``masks`` aligns with ``sentences``: None entries mean unconstrained; a
    :class:`SpanMask` constrains the likelihood; a list of masks scores the
    sentence as a uniform mixture over per-tree constrained likelihoods.
    Returns (nll, grads, n_used, n_skipped); grads is None when every
    sentence was skipped.
    """
    grammar, cache = forward_with_cache(params)
    total = RuleCounts.zeros(grammar)
    ll_sum = 0.0
    used = 0
    skipped = 0
    if masks is None:
        masks = [None] * len(sentences)
    for sent, mask in zip(sentences, masks):
        if isinstance(mask, (list, tuple)):
            per = [expected_rule_counts(grammar, sent, m) for m in mask]
            lls = np.array([ll for _, ll in per])
            top = lls.max()
            if is_log_zero(float(top)):
                skipped += 1
                continue
            weights = np.exp(lls - top)
            weights /= weights.sum()
            ll = float(top + np.log(np.exp(lls - top).sum()) - np.log(len(per)))
            counts = RuleCounts.zeros(grammar)
            for w, (cnt, cl) in zip(weights, per):
                if w > 0.0 and not is_log_zero(cl):
                    counts.add_scaled(cnt, float(w))
        else:
            counts, ll = expected_rule_counts(grammar, sent, mask)
            if is_log_zero(ll):
                skipped += 1
                continue
        total.add_scaled(counts, 1.0)
        ll_sum += ll
        used += 1
    if used == 0:
        return float("nan"), None, 0, skipped
    scale = -1.0 / used
    grads = backward(
        params,
        scale * total.root,
        scale * total.binary,
        scale * total.unary,
        cache,
    )
    return -ll_sum / used, grads, used, skipped


def corpus_nll(params_or_grammar, sentences) -> tuple[float, int]:
    """Mean per-sentence NLL over a corpus; skips unparseable sentences."""
    if isinstance(params_or_grammar, ParameterSet):
        grammar, _ = forward_with_cache(params_or_grammar)
    else:
        grammar = params_or_grammar
    total = 0.0
    used = 0
    skipped = 0
    for sent in sentences:
        ll = build_chart(grammar, sent).loglik
        if is_log_zero(ll):
            skipped += 1
            continue
        total += ll
        used += 1
    if used == 0:
        return float("nan"), skipped
    return -total / used, skipped


@dataclass
class RunLog:
    """Per-epoch events. Wall-time fields are excluded from determinism
    comparisons; everything else is reproducible bit-for-bit."""

    events: list = field(default_factory=list)
    path: Path | None = None

    def append(self, event: dict) -> None:
        self.events.append(event)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(event, sort_keys=True) + "\n")

    def core_lines(self) -> list[str]:
        """Canonical JSON lines with wall-time fields stripped."""
        out = []
        for e in self.events:
            core = {k: v for k, v in e.items() if not k.startswith("wall_time")}
            out.append(json.dumps(core, sort_keys=True))
        return out

    @property
    def epochs_run(self) -> int:
        return sum(1 for e in self.events if e.get("event") == "epoch")


def _epoch_diag(params: ParameterSet) -> dict:
    from .diagnostics import zero_ratio
    from .params import collect_activations

    norms = np.sqrt((params.children_out**2).sum(axis=1))
    acts = collect_activations(params)
    return {
        "children_scale": [float(norms.min()), float(norms.mean()), float(norms.max())],
        "zero_ratio": {k: zero_ratio(v) for k, v in acts.items()},
    }


def train(
    cfg: TrainConfig,
    train_sentences,
    val_sentences,
    vocab_size: int,
    masks=None,
    run_dir=None,
    vocab=None,
    resume: bool = False,
) -> tuple[ParameterSet, RunLog]:
    """Train from scratch (or resume) and return the best parameters.

    ``masks`` aligns with ``train_sentences`` (see :func:`batch_loss`).
    Early stopping tracks validation NLL; training stops once the count of
    consecutive non-improving epochs exceeds ``cfg.patience``. With
    ``run_dir`` set, writes ``config.json``, ``runlog.jsonl``, ``best.ckpt``
    and ``last.ckpt`` (the latter carries optimizer state for resuming).
    """
    cfg.validate()
    if masks is not None and len(masks) != len(train_sentences):
        raise ConfigError("masks must align one-to-one with training sentences")

    runlog = RunLog()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        runlog.path = run_dir / "runlog.jsonl"

    start_epoch = 0
    best_val = float("inf")
    since_improved = 0
    best_params = None

    if resume:
        if run_dir is None or not (run_dir / "last.ckpt").exists():
            raise ConfigError("resume requested but no last.ckpt in run_dir")
        snap = load_parameters(run_dir / "last.ckpt")
        params = snap["params"]
        adam = AdamState.from_tensors(snap["adam_tensors"], params)
        ts = snap["training_state"] or {}
        start_epoch = int(ts.get("next_epoch", 0))
        best_val = float(ts.get("best_val", float("inf")))
        since_improved = int(ts.get("since_improved", 0))
        shuffle_rng = np.random.default_rng()
        shuffle_rng.bit_generator.state = json.loads(ts["rng_state"])
        if (run_dir / "best.ckpt").exists():
            best_params = load_parameters(run_dir / "best.ckpt")["params"]
        if runlog.path is not None and runlog.path.exists():
            with open(runlog.path, encoding="utf-8") as f:
                runlog.events = [json.loads(line) for line in f if line.strip()]
    else:
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        params = init_parameters(
            cfg.mode,
            _symbols_for(cfg),
            vocab_size,
            embed_dim=cfg.embed_dim,
            depth=cfg.depth,
            seed=seeds[0],
            norm_after_activation=cfg.norm_after_activation,
        )
        adam = AdamState.for_params(params)
        shuffle_rng = np.random.default_rng(seeds[1])
        if run_dir is not None:
            (run_dir / "config.json").write_text(
                json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n",
                encoding="utf-8",
            )

    n = len(train_sentences)
    if n == 0:
        raise ConfigError("empty training corpus")

    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.max_epochs):
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        epoch_ll_terms = 0.0
        epoch_used = 0
        epoch_skipped = 0
        bad_steps = 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            sents = [train_sentences[i] for i in idx]
            bmasks = None if masks is None else [masks[i] for i in idx]
            nll, grads, used, skipped = batch_loss(params, sents, bmasks)
            epoch_skipped += skipped
            if grads is None or not np.isfinite(nll):
                bad_steps += 1
                continue
            epoch_ll_terms += nll * used
            epoch_used += used
            adam_step(params, grads, adam, cfg)
            if cfg.eval_every and ((b0 // cfg.batch_size) + 1) % cfg.eval_every == 0:
                vnll, _ = corpus_nll(params, val_sentences)
                runlog.append(
                    {
                        "event": "mid_eval",
                        "epoch": epoch,
                        "batch": b0 // cfg.batch_size + 1,
                        "val_nll": vnll,
                        "wall_time_s": time.perf_counter() - t0,
                    }
                )

        train_nll = epoch_ll_terms / epoch_used if epoch_used else float("nan")
        val_nll, val_skipped = corpus_nll(params, val_sentences)
        if not np.isfinite(val_nll):
            raise NumericError(f"validation NLL not finite at epoch {epoch}")
        improved = val_nll < best_val
        if improved:
            best_val = val_nll
            since_improved = 0
            best_params = params.copy()
        else:
            since_improved += 1

        runlog.append(
            {
                "event": "epoch",
                "epoch": epoch,
                "train_nll": train_nll,
                "val_nll": val_nll,
                "best_val_nll": best_val,
                "skipped_train": epoch_skipped,
                "skipped_val": val_skipped,
                "bad_steps": bad_steps,
                "diag": _epoch_diag(params),
                "wall_time_s": time.perf_counter() - t0,
            }
        )

        if run_dir is not None:
            state = {
                "next_epoch": epoch + 1,
                "best_val": best_val,
                "since_improved": since_improved,
                "rng_state": json.dumps(shuffle_rng.bit_generator.state),
            }
            save_parameters(
                run_dir / "last.ckpt",
                params,
                vocab=vocab,
                training_state=state,
                adam_tensors=adam.to_tensors(),
            )
            if improved:
                save_parameters(run_dir / "best.ckpt", params, vocab=vocab)

        if since_improved > cfg.patience:
            break

    if best_params is None:
        best_params = params.copy()
    return best_params, runlog


def _symbols_for(cfg: TrainConfig):
    from .grammar import SymbolTable

    return SymbolTable(
        num_nonterminals=cfg.num_nonterminals,
        num_preterminals=cfg.num_preterminals,
    )
