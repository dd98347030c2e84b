"""Chart algorithms over a grammar: inside/outside, counts, posteriors, decoding.

Everything operates in log space over the combined child index space
(nonterminals then preterminals). Log-zero is the sentinel from
:mod:`npcfg.grammar`, never ``-inf``, so no NaN can arise from adding
impossible cells. Span charts are ``(n+1, n+1, C)`` arrays indexed by
half-open spans ``(i, j)``.

The outside pass is computed explicitly (it doubles as the gradient of the
sentence log-likelihood w.r.t. the rule log-probabilities via expected rule
counts), not by generic automatic differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .grammar import Grammar, IMPOSSIBLE, LOG_ZERO, is_log_zero
from .trees import ParseTree, tree_to_spans

# Cap on elements of transient Viterbi score blocks; start positions are
# chunked so one block never exceeds this.
_VITERBI_BLOCK_ELEMENTS = 16_000_000


@dataclass(frozen=True)
class SpanMask:
    """Allowed spans for constrained inside computations.

    Width-1 spans and the whole-sentence span are always allowed. A
    derivation is admitted iff every span it uses is allowed.
    """

    n: int
    allowed: np.ndarray  # bool, (n+1, n+1)

    @staticmethod
    def all_allowed(n: int) -> "SpanMask":
        a = np.zeros((n + 1, n + 1), dtype=bool)
        for w in range(1, n + 1):
            i = np.arange(n - w + 1)
            a[i, i + w] = True
        return SpanMask(n, a)

    @staticmethod
    def from_spans(n: int, spans) -> "SpanMask":
        a = np.zeros((n + 1, n + 1), dtype=bool)
        i = np.arange(n)
        a[i, i + 1] = True
        a[0, n] = True
        for (s, e) in spans:
            if not (0 <= s < e <= n):
                raise DataError(f"span ({s}, {e}) out of range for length {n}")
            a[s, e] = True
        return SpanMask(n, a)

    @staticmethod
    def from_trees(n: int, trees) -> "SpanMask":
        """Union of the spans of the given trees (span-union focusing)."""
        spans = set()
        for t in trees:
            spans |= tree_to_spans(t, include_whole=True)
        return SpanMask.from_spans(n, spans)

    def allows(self, i: int, j: int) -> bool:
        return bool(self.allowed[i, j])

    def starts_for_width(self, width: int) -> np.ndarray:
        i = np.arange(self.n - width + 1)
        return i[self.allowed[i, i + width]]


@dataclass
class RuleCounts:
    """Per-rule expected usage counts (or gradients of the same shape)."""

    root: np.ndarray  # (|N|,)
    binary: np.ndarray  # (|N|, C, C)
    unary: np.ndarray  # (|P|, V)

    @staticmethod
    def zeros(grammar: Grammar) -> "RuleCounts":
        return RuleCounts(
            root=np.zeros_like(grammar.root_logprobs),
            binary=np.zeros_like(grammar.binary_logprobs),
            unary=np.zeros_like(grammar.unary_logprobs),
        )

    def add_scaled(self, other: "RuleCounts", scale: float) -> None:
        self.root += scale * other.root
        self.binary += scale * other.binary
        self.unary += scale * other.unary

    def total(self) -> float:
        return float(self.root.sum() + self.binary.sum() + self.unary.sum())


@dataclass
class Chart:
    """Inside (and optionally outside) tables for one sentence."""

    sentence: np.ndarray
    inside: np.ndarray  # (n+1, n+1, C)
    loglik: float
    outside: np.ndarray | None = None


def _check_sentence(g: Grammar, sentence) -> np.ndarray:
    sent = np.asarray(sentence, dtype=int)
    if sent.ndim != 1 or sent.size == 0:
        raise DataError("sentence must be a non-empty 1-D sequence of word ids")
    if sent.size < 2:
        raise DataError(
            "sentences of length 1 cannot be derived: the root expands via a binary rule"
        )
    if sent.min() < 0 or sent.max() >= g.vocab_size:
        raise DataError(
            f"word id out of range 0..{g.vocab_size - 1}: {int(sent.min())}..{int(sent.max())}"
        )
    return sent


def _safe_log_plus(vals: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """log(vals) + shift where vals > 0, else LOG_ZERO (no -inf ever)."""
    out = np.full(vals.shape, LOG_ZERO)
    pos = vals > 0.0
    if np.any(pos):
        out[pos] = np.log(vals[pos]) + np.broadcast_to(shift, vals.shape)[pos]
    return out


def _pair_scores(ins: np.ndarray, starts: np.ndarray, width: int) -> np.ndarray:
    """Stack of left+right child scores: (T, width-1, C, C)."""
    t = starts.shape[0]
    c = ins.shape[2]
    x = np.empty((t, width - 1, c, c))
    for si in range(1, width):
        left = ins[starts, starts + si]
        right = ins[starts + si, starts + width]
        x[:, si - 1] = left[:, :, None] + right[:, None, :]
    return x


def build_chart(
    g: Grammar,
    sentence,
    mask: SpanMask | None = None,
    need_outside: bool = False,
) -> Chart:
    """Run the inside pass (and the outside pass on demand)."""
    sent = _check_sentence(g, sentence)
    n = sent.shape[0]
    nn = g.symbols.num_nonterminals
    c = g.symbols.num_children
    if mask is not None and mask.n != n:
        raise DataError(f"mask built for length {mask.n}, sentence has length {n}")

    exp_binary = np.exp(g.binary_logprobs.reshape(nn, c * c))

    ins = np.full((n + 1, n + 1, c), LOG_ZERO)
    pos = np.arange(n)
    ins[pos, pos + 1, nn:] = g.unary_logprobs[:, sent].T

    for width in range(2, n + 1):
        starts = (
            np.arange(n - width + 1) if mask is None else mask.starts_for_width(width)
        )
        if starts.size == 0:
            continue
        x = _pair_scores(ins, starts, width)
        m = x.max(axis=(1, 2, 3))
        pairs = np.exp(x - m[:, None, None, None]).sum(axis=1).reshape(starts.size, c * c)
        vals = pairs @ exp_binary.T
        ins[starts, starts + width, :nn] = _safe_log_plus(vals, m[:, None])

    top = g.root_logprobs + ins[0, n, :nn]
    m = top.max()
    loglik = float(np.log(np.exp(top - m).sum()) + m) if m > LOG_ZERO else LOG_ZERO
    if is_log_zero(loglik):
        loglik = LOG_ZERO

    chart = Chart(sentence=sent, inside=ins, loglik=loglik)
    if need_outside:
        chart.outside = _outside_pass(g, chart, mask, exp_binary)
    return chart


def _outside_pass(
    g: Grammar, chart: Chart, mask: SpanMask | None, exp_binary: np.ndarray
) -> np.ndarray:
    n = chart.sentence.shape[0]
    nn = g.symbols.num_nonterminals
    c = g.symbols.num_children
    ins = chart.inside
    exp_b3 = exp_binary.reshape(nn, c, c)

    out = np.full((n + 1, n + 1, c), LOG_ZERO)
    out[0, n, :nn] = g.root_logprobs

    for width in range(n, 1, -1):
        starts = (
            np.arange(n - width + 1) if mask is None else mask.starts_for_width(width)
        )
        if starts.size == 0:
            continue
        o = out[starts, starts + width, :nn]
        mo = np.maximum(o.max(axis=1), LOG_ZERO)
        oe = np.exp(o - mo[:, None])
        # ob[t, b, c] = sum_a exp(out[t, a]) * binary_prob[a, b, c]
        ob = np.einsum("ta,abc->tbc", oe, exp_b3)
        for si in range(1, width):
            lin = ins[starts, starts + si]
            rin = ins[starts + si, starts + width]
            ml = np.maximum(lin.max(axis=1), LOG_ZERO)
            mr = np.maximum(rin.max(axis=1), LOG_ZERO)
            le = np.exp(lin - ml[:, None])
            re = np.exp(rin - mr[:, None])

            lc = _safe_log_plus(np.einsum("tbc,tc->tb", ob, re), (mo + mr)[:, None])
            cur = out[starts, starts + si]
            out[starts, starts + si] = np.logaddexp(cur, lc)

            rc = _safe_log_plus(np.einsum("tbc,tb->tc", ob, le), (mo + ml)[:, None])
            cur = out[starts + si, starts + width]
            out[starts + si, starts + width] = np.logaddexp(cur, rc)
    return out


def inside_logprob(g: Grammar, sentence, mask: SpanMask | None = None) -> float:
    """Log-probability of the sentence; LOG_ZERO when no derivation exists."""
    return build_chart(g, sentence, mask=mask).loglik


def constrained_inside_logprob(g: Grammar, sentence, mask: SpanMask) -> float:
    """Log-probability restricted to derivations whose spans the mask allows."""
    if mask is None:
        raise DataError("constrained inside requires a mask; use inside_logprob")
    return build_chart(g, sentence, mask=mask).loglik


def expected_rule_counts(
    g: Grammar, sentence, mask: SpanMask | None = None
) -> tuple[RuleCounts, float]:
    """Expected usage count of every rule under the (masked) posterior.

    These equal the gradient of the sentence log-likelihood w.r.t. the rule
    log-probabilities treated as free variables. Returns all-zero counts when
    the sentence has no admissible derivation.
    """
    chart = build_chart(g, sentence, mask=mask, need_outside=True)
    counts = RuleCounts.zeros(g)
    z = chart.loglik
    if is_log_zero(z):
        return counts, z

    sent = chart.sentence
    n = sent.shape[0]
    nn = g.symbols.num_nonterminals
    c = g.symbols.num_children
    ins, out = chart.inside, chart.outside

    counts.root[:] = np.exp(g.root_logprobs + ins[0, n, :nn] - z)

    # unary: position i emits word sent[i] from preterminal t
    pos = np.arange(n)
    e = np.exp(out[pos, pos + 1, nn:] + g.unary_logprobs[:, sent].T - z)  # (n, |P|)
    for i in range(n):
        counts.unary[:, sent[i]] += e[i]

    acc = np.zeros((nn, c, c))
    for width in range(2, n + 1):
        starts = (
            np.arange(n - width + 1) if mask is None else mask.starts_for_width(width)
        )
        if starts.size == 0:
            continue
        oe = np.exp(out[starts, starts + width, :nn] - z)
        for si in range(1, width):
            le = np.exp(ins[starts, starts + si])
            re = np.exp(ins[starts + si, starts + width])
            tmp = np.einsum("ta,tb->tab", oe, le)
            acc += np.einsum("tab,tc->abc", tmp, re)
    counts.binary[:] = acc * np.exp(g.binary_logprobs)

    if not (
        np.all(np.isfinite(counts.binary))
        and np.all(np.isfinite(counts.unary))
        and np.all(np.isfinite(counts.root))
    ):
        raise NumericError("expected rule counts overflowed; sentence NLL too extreme")
    return counts, z


def span_posteriors(g: Grammar, sentence, chart: Chart | None = None) -> np.ndarray:
    """Posterior probability that each span (i, j) is a constituent.

    Width-1 spans and the whole span come out at 1 for any parseable
    sentence. Entries are 0 where no constituent can sit.
    """
    if chart is None:
        chart = build_chart(g, sentence, need_outside=True)
    elif chart.outside is None:
        raise NumericError("span_posteriors needs a chart with an outside table")
    n = chart.sentence.shape[0]
    post = np.zeros((n + 1, n + 1))
    if is_log_zero(chart.loglik):
        return post
    both = chart.inside + chart.outside - chart.loglik
    # exp of sentinel sums underflows to exactly 0, so a plain exp-sum is safe
    contrib = np.exp(np.maximum(both, 2.0 * LOG_ZERO))
    for width in range(1, n + 1):
        i = np.arange(n - width + 1)
        post[i, i + width] = contrib[i, i + width].sum(axis=1)
    return post


def mbr_decode(g: Grammar, sentence) -> ParseTree:
    """Maximum-expected-span tree: maximize the sum of span posteriors.

    Ties are broken toward the smaller left-child width. Node labels are the
    posterior-argmax symbols, which downstream unlabeled scoring ignores.
    """
    chart = build_chart(g, sentence, need_outside=True)
    if is_log_zero(chart.loglik):
        raise NumericError("sentence has no parse under this grammar")
    sent = chart.sentence
    n = sent.shape[0]
    nn = g.symbols.num_nonterminals
    post = span_posteriors(g, sent, chart)
    both = chart.inside + chart.outside

    best = np.zeros((n + 1, n + 1))
    split = np.full((n + 1, n + 1), -1, dtype=int)
    for width in range(2, n + 1):
        for i in range(0, n - width + 1):
            j = i + width
            bk, bv = -1, -np.inf
            for k in range(i + 1, j):
                v = best[i, k] + best[k, j]
                if v > bv:
                    bv, bk = v, k
            best[i, j] = post[i, j] + bv
            split[i, j] = bk

    def label_of(i: int, j: int) -> int:
        if j - i == 1:
            return int(np.argmax(both[i, j, nn:]))
        return int(np.argmax(both[i, j, :nn]))

    def build(i: int, j: int) -> ParseTree:
        if j - i == 1:
            return ParseTree.leaf(int(sent[i]), label_of(i, j))
        k = split[i, j]
        return ParseTree.node(label_of(i, j), build(i, k), build(k, j))

    return build(0, n)


def viterbi_decode(g: Grammar, sentence) -> tuple[ParseTree, float]:
    """Highest-probability derivation and its log-probability.

    Ties are broken by the lowest child symbol indices (left then right),
    then by the smaller left-child width, then by the lowest root symbol.
    """
    sent = _check_sentence(g, sentence)
    n = sent.shape[0]
    nn = g.symbols.num_nonterminals
    c = g.symbols.num_children

    vit = np.full((n + 1, n + 1, c), LOG_ZERO)
    pos = np.arange(n)
    vit[pos, pos + 1, nn:] = g.unary_logprobs[:, sent].T
    back = np.zeros((n + 1, n + 1, nn, 3), dtype=int)

    for width in range(2, n + 1):
        all_starts = np.arange(n - width + 1)
        block = max(1, _VITERBI_BLOCK_ELEMENTS // (nn * c * c))
        for b0 in range(0, all_starts.size, block):
            starts = all_starts[b0 : b0 + block]
            t = starts.size
            best_val = np.full((t, nn), -np.inf)
            best_bc = np.zeros((t, nn), dtype=int)
            best_s = np.zeros((t, nn), dtype=int)
            for si in range(1, width):
                left = vit[starts, starts + si]
                right = vit[starts + si, starts + width]
                x = left[:, :, None] + right[:, None, :]
                cand = g.binary_logprobs[None, :, :, :] + x[:, None, :, :]
                flat = cand.reshape(t, nn, c * c)
                bc = flat.argmax(axis=2)  # first max: lowest (left, right) pair
                val = np.take_along_axis(flat, bc[:, :, None], axis=2)[:, :, 0]
                if si == 1:
                    best_val, best_bc = val, bc
                    best_s = np.full((t, nn), 1, dtype=int)
                else:
                    # symbol order outranks split order; split breaks the rest
                    upd = (val > best_val) | ((val == best_val) & (bc < best_bc))
                    best_val = np.where(upd, val, best_val)
                    best_bc = np.where(upd, bc, best_bc)
                    best_s = np.where(upd, si, best_s)
            vit[starts, starts + width, :nn] = best_val
            back[starts, starts + width, :, 0] = best_s
            back[starts, starts + width, :, 1] = best_bc // c
            back[starts, starts + width, :, 2] = best_bc % c

    top = g.root_logprobs + vit[0, n, :nn]
    a = int(np.argmax(top))
    score = float(top[a])
    if is_log_zero(score):
        raise NumericError("sentence has no parse under this grammar")

    def build(i: int, j: int, sym: int) -> ParseTree:
        if j - i == 1:
            return ParseTree.leaf(int(sent[i]), sym - nn)
        s, b, cc = back[i, j, sym]
        return ParseTree.node(sym, build(i, i + s, int(b)), build(i + s, j, int(cc)))

    return build(0, n, a), score
