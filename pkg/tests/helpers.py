"""Shared test utilities: random grammars, enumeration oracles, gradcheck.

The oracles here are deliberately written against the math, not against the
library code paths: brute-force tree enumeration works in plain probability
space with python loops, so agreement with the log-space chart algorithms is
meaningful evidence of correctness.
"""

import numpy as np

from npcfg.grammar import Grammar, LOG_ZERO, SymbolTable
from npcfg.trees import ParseTree


def rel_close(analytic: float, reference: float, tol: float = 1e-4) -> bool:
    """Relative agreement with an absolute floor for near-zero values."""
    scale = max(abs(analytic), abs(reference), 1e-3)
    return abs(analytic - reference) <= tol * scale


def random_grammar(rng, n_nt: int, n_pt: int, vocab: int, concentrate: float = 1.0) -> Grammar:
    """A proper random grammar; higher ``concentrate`` makes rows peakier."""
    sym = SymbolTable(num_nonterminals=n_nt, num_preterminals=n_pt)
    c = sym.num_children

    def rows(*shape):
        x = rng.gamma(1.0 / concentrate, size=shape)
        x /= x.sum(axis=-1, keepdims=True)
        return np.log(x)

    return Grammar(
        symbols=sym,
        root_logprobs=rows(n_nt),
        binary_logprobs=rows(n_nt, c * c).reshape(n_nt, c, c),
        unary_logprobs=rows(n_pt, vocab),
    )


# ---------------------------------------------------------------------------
# Tree-shape enumeration


def tree_shapes(start: int, end: int):
    """All binary bracketings of [start, end) as nested tuples."""
    if end - start == 1:
        yield ("leaf", start)
        return
    for k in range(start + 1, end):
        for left in tree_shapes(start, k):
            for right in tree_shapes(k, end):
                yield ("node", left, right, start, end)


def shape_label_scores(g: Grammar, sent, shape) -> np.ndarray:
    """Probability of the subtree under each label (combined child space).

    Sums over all labelings of the shape's descendants; linear space.
    """
    sym = g.symbols
    nn = sym.num_nonterminals
    c = sym.num_children
    if shape[0] == "leaf":
        v = np.zeros(c)
        for t in range(sym.num_preterminals):
            v[nn + t] = np.exp(g.unary_logprobs[t, sent[shape[1]]])
        return v
    left = shape_label_scores(g, sent, shape[1])
    right = shape_label_scores(g, sent, shape[2])
    v = np.zeros(c)
    b = np.exp(g.binary_logprobs)
    for a in range(nn):
        v[a] = float((b[a] * np.outer(left, right)).sum())
    return v


def shape_prob(g: Grammar, sent, shape) -> float:
    """Total probability of one bracketing: root choice summed in."""
    scores = shape_label_scores(g, sent, shape)
    nn = g.symbols.num_nonterminals
    return float((np.exp(g.root_logprobs) * scores[:nn]).sum())


def brute_force_inside(g: Grammar, sent) -> float:
    """Log-probability by summing every bracketing's labeled-tree mass."""
    total = sum(shape_prob(g, sent, s) for s in tree_shapes(0, len(sent)))
    return float(np.log(total)) if total > 0.0 else LOG_ZERO


def enumerate_labeled(g: Grammar, sent, shape):
    """Yield (top_label, probability, ParseTree) for every labeling.

    Fully explicit enumeration (no distributive law), exponential in the
    sentence length; keep sentences at length <= 3 or sizes tiny.
    """
    sym = g.symbols
    nn = sym.num_nonterminals
    if shape[0] == "leaf":
        i = shape[1]
        for t in range(sym.num_preterminals):
            p = float(np.exp(g.unary_logprobs[t, sent[i]]))
            yield nn + t, p, ParseTree.leaf(int(sent[i]), t)
        return
    for bl, pl, tl in enumerate_labeled(g, sent, shape[1]):
        for cl, pr, tr in enumerate_labeled(g, sent, shape[2]):
            for a in range(nn):
                p = float(np.exp(g.binary_logprobs[a, bl, cl])) * pl * pr
                yield a, p, ParseTree.node(a, tl, tr)


def naive_inside(g: Grammar, sent) -> float:
    """Cross-check oracle: exponential enumeration of every labeled tree."""
    total = 0.0
    for shape in tree_shapes(0, len(sent)):
        for a, p, _ in enumerate_labeled(g, sent, shape):
            total += float(np.exp(g.root_logprobs[a])) * p
    return float(np.log(total)) if total > 0.0 else LOG_ZERO


def best_labeled_tree(g: Grammar, sent):
    """Argmax labeled derivation by enumeration: (ParseTree, log-prob)."""
    best_p, best_t = -1.0, None
    for shape in tree_shapes(0, len(sent)):
        for a, p, t in enumerate_labeled(g, sent, shape):
            full = float(np.exp(g.root_logprobs[a])) * p
            if full > best_p:
                best_p, best_t = full, t
    return best_t, float(np.log(best_p))


def enumeration_span_posteriors(g: Grammar, sent) -> dict:
    """Posterior of every span by summing labeled-tree probabilities."""
    z = 0.0
    mass: dict = {}
    n = len(sent)
    for shape in tree_shapes(0, n):
        spans = shape_spans_all(shape)
        p = shape_prob(g, sent, shape)
        z += p
        for s in spans:
            mass[s] = mass.get(s, 0.0) + p
    return {s: m / z for s, m in mass.items()}


def shape_spans_all(shape) -> set:
    """Every span of the shape including width-1 leaves and the whole span."""
    spans = set()

    def walk(s):
        if s[0] == "leaf":
            spans.add((s[1], s[1] + 1))
            return
        _, left, right, i, j = s
        walk(left)
        walk(right)
        spans.add((i, j))

    walk(shape)
    return spans


def tree_unlabeled_spans(tree: ParseTree, include_whole: bool = True) -> set:
    spans = set()
    n = tree.leaf_count()

    def walk(node, start):
        if node.is_leaf:
            return start + 1
        mid = walk(node.left, start)
        end = walk(node.right, mid)
        if end - start >= 2 and (include_whole or not (start == 0 and end == n)):
            spans.add((start, end))
        return end

    walk(tree, 0)
    return spans


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def fd_gradcheck(loss_fn, arr: np.ndarray, analytic: np.ndarray, entries, h: float = 1e-5, tol: float = 1e-4):
    """Check selected entries of one tensor against central differences.

    Returns a list of (index, analytic, fd) mismatch triples; empty = pass.
    """
    bad = []
    flat = arr.reshape(-1)
    aflat = analytic.reshape(-1)
    for idx in entries:
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_fn()
        flat[idx] = orig - h
        dn = loss_fn()
        flat[idx] = orig
        fd = (up - dn) / (2.0 * h)
        if not rel_close(aflat[idx], fd, tol):
            bad.append((idx, float(aflat[idx]), float(fd)))
    return bad


def pick_entries(rng, size: int, k: int):
    """Up to k distinct flat indices into a tensor of the given size."""
    k = min(k, size)
    return rng.choice(size, size=k, replace=False)
