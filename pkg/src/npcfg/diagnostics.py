"""Distribution diagnostics for grammar rule families.

These metrics quantify how distinct (or collapsed) the per-parent rule
distributions of a grammar are, and how the parameterization behaves
internally (dead activations, representation scales). All entropies and
divergences use natural log, so the Jensen-Shannon divergence of two
distributions lies in [0, ln 2].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .params import ParameterSet, collect_activations, compute_grammar, parent_representation

LN2 = math.log(2.0)
ZERO_EPS = 1e-12  # entries at or below this magnitude count as zero
COLLAPSE_JSD = 0.05  # reporting threshold for "effectively identical" pairs


def _check_dist(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ConfigError("expected a 1-D probability vector")
    return p


def kl_divergence(p, q) -> float:
    """KL(p || q) with 0 * log(0/q) = 0; +inf when p puts mass where q has none."""
    p, q = _check_dist(p), _check_dist(q)
    mask = p > 0.0
    if np.any(q[mask] == 0.0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence, always finite, in [0, ln 2]."""
    p, q = _check_dist(p), _check_dist(q)
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def pairwise_jsd(rows: np.ndarray, max_pairs: int | None = None, seed: int = 0) -> np.ndarray:
    """JSD for every unordered pair of rows (optionally a random subsample)."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[k] for k in sorted(idx)]
    return np.array([jsd(rows[i], rows[j]) for i, j in pairs])


def gpj(rows: np.ndarray, max_pairs: int | None = None, seed: int = 0) -> float:
    """Geometric mean of pairwise JSDs over all n(n-1)/2 row pairs.

    Zero if any pair coincides exactly (its JSD is 0). Needs >= 2 rows.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.shape[0] < 2:
        raise ConfigError("gpj needs at least two distributions")
    vals = pairwise_jsd(rows, max_pairs=max_pairs, seed=seed)
    if np.any(vals <= 0.0):
        return 0.0
    return float(np.exp(np.mean(np.log(vals))))


def entropy(p) -> float:
    p = _check_dist(p)
    mask = p > 0.0
    return float(-np.sum(p[mask] * np.log(p[mask])))


def local_perplexity(rows: np.ndarray) -> float:
    """Mean over rows of exp(entropy(row))."""
    rows = np.asarray(rows, dtype=float)
    return float(np.mean([math.exp(entropy(r)) for r in rows]))


def global_perplexity(rows: np.ndarray) -> float:
    """exp(entropy(mean row)): effective support of the averaged distribution."""
    rows = np.asarray(rows, dtype=float)
    return float(math.exp(entropy(rows.mean(axis=0))))


def top_mass_set(p: np.ndarray, mass: float = 0.9) -> list[int]:
    """Minimal set of outcomes, by descending probability, reaching >= mass.

    Ties in probability are resolved toward the lower index.
    """
    p = _check_dist(p)
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    k = int(np.searchsorted(cum, mass - 1e-15)) + 1
    k = min(k, p.size)
    return [int(i) for i in order[:k]]


def overlap_ratio(p, q, mass: float = 0.9) -> float:
    """Jaccard overlap of the top-``mass`` outcome sets of two distributions."""
    a = set(top_mass_set(p, mass))
    b = set(top_mass_set(q, mass))
    return len(a & b) / len(a | b)


def zero_ratio(arrays, threshold: float = ZERO_EPS) -> float:
    """Fraction of entries with magnitude <= threshold across the arrays."""
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    total = sum(a.size for a in arrays)
    if total == 0:
        raise ConfigError("zero_ratio of nothing")
    zeros = sum(int(np.count_nonzero(np.abs(a) <= threshold)) for a in arrays)
    return zeros / total


def children_cosine_mean(u: np.ndarray) -> tuple[float, int]:
    """Mean pairwise cosine similarity of rows; returns (mean, excluded rows).

    Zero-norm rows cannot carry a direction and are excluded from the mean.
    """
    u = np.asarray(u, dtype=float)
    norms = np.sqrt((u * u).sum(axis=1))
    keep = norms > 0.0
    excluded = int((~keep).sum())
    v = u[keep] / norms[keep][:, None]
    n = v.shape[0]
    if n < 2:
        return 0.0, excluded
    gram = v @ v.T
    iu = np.triu_indices(n, k=1)
    return float(gram[iu].mean()), excluded


@dataclass
class ScaleStats:
    min: float
    mean: float
    max: float

    @staticmethod
    def of_rows(u: np.ndarray) -> "ScaleStats":
        norms = np.sqrt((np.asarray(u, dtype=float) ** 2).sum(axis=-1))
        norms = np.atleast_1d(norms)
        return ScaleStats(float(norms.min()), float(norms.mean()), float(norms.max()))


def jsd_histogram(values: np.ndarray, bins: int = 14) -> dict:
    """Histogram of JSD values over [0, ln 2]; counts sum to len(values)."""
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(0.0, LN2))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


@dataclass
class FamilyDiagnostics:
    """Distribution-level metrics for one rule family (binary or unary)."""

    gpj: float
    local_ppl: float
    global_ppl: float
    mean_entropy: float
    jsd_histogram: dict
    overlap_ratios: list[float]
    overlap_ratio_mean: float
    collapsed_pair_fraction: float  # pairs with JSD below COLLAPSE_JSD


@dataclass
class DiagnosticsReport:
    mode: str
    num_nonterminals: int
    num_preterminals: int
    vocab_size: int
    embed_dim: int
    binary: FamilyDiagnostics
    unary: FamilyDiagnostics
    zero_ratio: dict  # network -> fraction of dead post-activation entries
    children_cosine_mean: dict  # family -> (mean, excluded rows)
    scale_stats: dict = field(default_factory=dict)  # tensor -> ScaleStats

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def _family_diagnostics(
    rows: np.ndarray,
    bins: int,
    overlap_mass: float,
    max_pairs: int | None,
    seed: int,
) -> FamilyDiagnostics:
    vals = pairwise_jsd(rows, max_pairs=max_pairs, seed=seed)
    if vals.size and np.all(vals > 0.0):
        g = float(np.exp(np.mean(np.log(vals))))
    else:
        g = 0.0
    n = rows.shape[0]
    pair_idx = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if max_pairs is not None and len(pair_idx) > max_pairs:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(pair_idx), size=max_pairs, replace=False)
        pair_idx = [pair_idx[k] for k in sorted(idx)]
    overlaps = [overlap_ratio(rows[i], rows[j], overlap_mass) for i, j in pair_idx]
    return FamilyDiagnostics(
        gpj=g,
        local_ppl=local_perplexity(rows),
        global_ppl=global_perplexity(rows),
        mean_entropy=float(np.mean([entropy(r) for r in rows])),
        jsd_histogram=jsd_histogram(vals, bins=bins),
        overlap_ratios=[float(o) for o in overlaps],
        overlap_ratio_mean=float(np.mean(overlaps)) if overlaps else 0.0,
        collapsed_pair_fraction=float(np.mean(vals < COLLAPSE_JSD)) if vals.size else 0.0,
    )


def diagnose(
    p: ParameterSet,
    bins: int = 14,
    overlap_mass: float = 0.9,
    max_pairs: int | None = None,
    seed: int = 0,
) -> DiagnosticsReport:
    """Full diagnostic report for the grammar induced by ``p``.

    Pure: does not mutate the parameters, and identical inputs give an
    identical report. Zero ratios are measured on post-activation parent
    representations; networks without an activation fall back to the raw
    parent representation.
    """
    g = compute_grammar(p)
    n = p.symbols.num_nonterminals
    binary_rows = np.exp(g.binary_logprobs.reshape(n, -1))
    unary_rows = np.exp(g.unary_logprobs)

    acts = collect_activations(p)
    zr = {name: zero_ratio(arrays) for name, arrays in acts.items()}

    report = DiagnosticsReport(
        mode=p.mode,
        num_nonterminals=n,
        num_preterminals=p.symbols.num_preterminals,
        vocab_size=p.vocab_size,
        embed_dim=p.embed_dim,
        binary=_family_diagnostics(binary_rows, bins, overlap_mass, max_pairs, seed),
        unary=_family_diagnostics(unary_rows, bins, overlap_mass, max_pairs, seed),
        zero_ratio=zr,
        children_cosine_mean={
            "binary": children_cosine_mean(p.children_out),
            "unary": children_cosine_mean(p.terminal_out),
        },
        scale_stats={
            "children_out": ScaleStats.of_rows(p.children_out),
            "terminal_out": ScaleStats.of_rows(p.terminal_out),
            "binary_parent": ScaleStats.of_rows(parent_representation(p, "binary")),
            "unary_parent": ScaleStats.of_rows(parent_representation(p, "unary")),
        },
    )
    return report
