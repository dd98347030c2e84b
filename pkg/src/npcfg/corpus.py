"""Treebank ingestion, preprocessing, vocabulary, evaluation, and sampling.

Treebank files carry one bracketed tree per line. Ingested trees are n-ary
(:class:`NaryTree`); spans for evaluation always come from the original
(preprocessed but unbinarized) gold trees, while binary trees are derived by
right-binarization only where a binary structure is required (focus masks).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    DataError,
    DegenerateGrammarError,
    TreebankParseError,
)
from .grammar import Grammar, LOG_ZERO, SymbolTable
from .inference import SpanMask
from .trees import ParseTree, tree_to_spans

DEFAULT_PUNCT_TAGS = frozenset(
    {",", ".", ":", "``", "''", "-LRB-", "-RRB-", "-NONE-"}
)
UNK = "<unk>"
VOCAB_CUTOFF = 10_000  # keep this many words by frequency, plus the unk token


# ---------------------------------------------------------------------------
# Trees


@dataclass
class NaryTree:
    """Ingested tree node: internal (label + children) or leaf (tag + token)."""

    label: str
    children: list["NaryTree"] = field(default_factory=list)
    token: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.token is not None

    def tokens(self) -> list[str]:
        if self.is_leaf:
            return [self.token]
        out = []
        for c in self.children:
            out.extend(c.tokens())
        return out

    def to_bracketed(self) -> str:
        if self.is_leaf:
            return f"({self.label} {self.token})"
        inner = " ".join(c.to_bracketed() for c in self.children)
        return f"({self.label} {inner})"


def parse_bracketed(text: str, path=None, line=None) -> NaryTree:
    """Parse one bracketed tree like ``(S (NP (DT the) (NN dog)) ...)``.

    A node with a single bare token is a leaf whose label is the tag. An
    outer wrapper with an empty label, as in ``( (S ...))``, is unwrapped.
    """
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    if not tokens:
        raise TreebankParseError("empty tree", path, line)
    pos = 0

    def error(msg):
        raise TreebankParseError(msg, path, line)

    def parse_node() -> NaryTree:
        nonlocal pos
        if tokens[pos] != "(":
            error(f"expected '(' at token {pos}, got {tokens[pos]!r}")
        pos += 1
        if pos >= len(tokens):
            error("unexpected end after '('")
        if tokens[pos] in ("(", ")"):
            label = ""
        else:
            label = tokens[pos]
            pos += 1
        children: list[NaryTree] = []
        words: list[str] = []
        while pos < len(tokens) and tokens[pos] != ")":
            if tokens[pos] == "(":
                children.append(parse_node())
            else:
                words.append(tokens[pos])
                pos += 1
        if pos >= len(tokens):
            error("unbalanced parentheses: missing ')'")
        pos += 1  # consume ')'
        if words and children:
            error(f"node {label!r} mixes tokens and subtrees")
        if words:
            if len(words) > 1:
                error(f"node {label!r} has multiple tokens {words}")
            return NaryTree(label=label, token=words[0])
        if not children:
            error(f"node {label!r} has no children")
        return NaryTree(label=label, children=children)

    root = parse_node()
    if pos != len(tokens):
        error("trailing content after the tree")
    while root.label == "" and not root.is_leaf and len(root.children) == 1:
        root = root.children[0]
    return root


def preprocess_tree(tree: NaryTree, punct_tags=DEFAULT_PUNCT_TAGS) -> NaryTree | None:
    """Remove punctuation leaves and collapse unary chains.

    Returns ``None`` when fewer than two leaves survive; such sentences are
    excluded from every pipeline (they cannot be parsed by a binary grammar).
    Unary chains keep the topmost label.
    """

    def strip(node: NaryTree) -> NaryTree | None:
        if node.is_leaf:
            return None if node.label in punct_tags else node
        kept = [c for c in (strip(c) for c in node.children) if c is not None]
        if not kept:
            return None
        if len(kept) == 1:
            child = kept[0]
            if child.is_leaf:
                return NaryTree(label=node.label or child.label, token=child.token)
            return NaryTree(label=node.label or child.label, children=child.children)
        return NaryTree(label=node.label, children=kept)

    out = strip(tree)
    if out is None or out.is_leaf or len(out.tokens()) < 2:
        return None
    return out


def right_binarize(tree: NaryTree) -> NaryTree:
    """Right-binarize, introducing synthetic labels for intermediate nodes."""
    if tree.is_leaf:
        return tree
    kids = [right_binarize(c) for c in tree.children]
    if len(kids) == 1:
        # unary chain: collapse through, the span is unchanged
        only = kids[0]
        if only.is_leaf:
            return NaryTree(label=tree.label, token=only.token)
        return NaryTree(label=tree.label, children=only.children)
    node_label = tree.label
    while len(kids) > 2:
        last_two = NaryTree(label=f"{node_label}|<>", children=kids[-2:])
        kids = kids[:-2] + [last_two]
    return NaryTree(label=node_label, children=kids)


def gold_spans(tree: NaryTree) -> set:
    """Non-trivial spans of a gold tree (width >= 2, whole span excluded)."""
    return tree_to_spans(tree, include_whole=False)


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass
class Vocabulary:
    words: list[str]
    unk: str = UNK

    def __post_init__(self):
        if self.unk not in self.words:
            raise DataError("vocabulary must contain the unk token")
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise DataError("vocabulary contains duplicate words")

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def unk_id(self) -> int:
        return self._index[self.unk]

    def index(self, word: str) -> int:
        return self._index.get(word, self._index[self.unk])

    def word(self, i: int) -> str:
        return self.words[i]

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=int)


def build_vocabulary(
    token_lists, cutoff: int = VOCAB_CUTOFF, unk: str = UNK
) -> Vocabulary:
    """Keep the ``cutoff`` most frequent words; frequency ties resolve to the
    word seen first in the corpus. The unk token sits at index 0."""
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    pos = 0
    for toks in token_lists:
        for t in toks:
            counts[t] += 1
            if t not in first_seen:
                first_seen[t] = pos
            pos += 1
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    kept = ranked[:cutoff]
    return Vocabulary(words=[unk] + kept, unk=unk)


# ---------------------------------------------------------------------------
# Corpus


@dataclass
class Corpus:
    """Preprocessed sentences, their gold trees, and optional focus trees."""

    tokens: list[list[str]]
    sentences: list[np.ndarray]
    gold_trees: list[NaryTree] | None = None
    focus_trees: list[list[NaryTree]] | None = None  # per sentence, K binary trees
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.sentences)

    def gold_span_sets(self) -> list[set]:
        if self.gold_trees is None:
            raise DataError("corpus has no gold trees")
        return [gold_spans(t) for t in self.gold_trees]

    def focus_masks(self) -> list[SpanMask]:
        """Span-union masks from the focus trees (or gold trees as fallback)."""
        if self.focus_trees is not None:
            source = self.focus_trees
        elif self.gold_trees is not None:
            source = [[right_binarize(t)] for t in self.gold_trees]
        else:
            raise DataError("corpus has neither focus trees nor gold trees")
        return [
            SpanMask.from_trees(len(toks), trees)
            for toks, trees in zip(self.tokens, source)
        ]


def load_treebank(path) -> list[NaryTree]:
    """All trees in a file, one bracketed tree per non-blank line."""
    trees = []
    with open(path, encoding="utf-8") as f:
        for i, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text:
                continue
            trees.append(parse_bracketed(text, path=str(path), line=i))
    return trees


def make_corpus(
    trees,
    vocab: Vocabulary | None = None,
    punct_tags=DEFAULT_PUNCT_TAGS,
    max_len: int | None = None,
    cutoff: int = VOCAB_CUTOFF,
) -> tuple[Corpus, Vocabulary]:
    """Preprocess trees into a corpus; builds the vocabulary when none given."""
    kept_trees: list[NaryTree] = []
    rejected = 0
    for t in trees:
        pt = preprocess_tree(t, punct_tags)
        if pt is None:
            rejected += 1
            continue
        if max_len is not None and len(pt.tokens()) > max_len:
            rejected += 1
            continue
        kept_trees.append(pt)
    token_lists = [t.tokens() for t in kept_trees]
    if vocab is None:
        vocab = build_vocabulary(token_lists, cutoff=cutoff)
    corpus = Corpus(
        tokens=token_lists,
        sentences=[vocab.encode(toks) for toks in token_lists],
        gold_trees=kept_trees,
        rejected=rejected,
    )
    return corpus, vocab


def load_manifest(path) -> dict:
    """Corpus manifest: JSON naming train/dev/test files and focus-tree files.

    Relative paths are resolved against the manifest's directory.
    """
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    base = p.parent

    def resolve(v):
        return str((base / v)) if not Path(v).is_absolute() else v

    out = {"splits": {}, "focus_trees": {}}
    for split in ("train", "dev", "test"):
        if split in data:
            out["splits"][split] = resolve(data[split])
    for split, paths in data.get("focus_trees", {}).items():
        out["focus_trees"][split] = [resolve(v) for v in paths]
    if not out["splits"]:
        raise DataError(f"manifest {path} names no train/dev/test files")
    return out


def attach_focus_trees(corpus: Corpus, paths, punct_tags=DEFAULT_PUNCT_TAGS) -> None:
    """Load K focus-tree files and attach their binarized trees to the corpus.

    Each file must hold one tree per corpus sentence, token-aligned after
    preprocessing; any mismatch raises with the sentence index and file.
    """
    per_file: list[list[NaryTree]] = []
    for path in paths:
        trees = load_treebank(path)
        if len(trees) != len(corpus):
            raise AlignmentError(
                f"{path}: {len(trees)} trees for {len(corpus)} corpus sentences"
            )
        processed = []
        for i, t in enumerate(trees):
            pt = preprocess_tree(t, punct_tags)
            if pt is None:
                raise AlignmentError(f"{path}: tree {i} empty after preprocessing")
            if pt.tokens() != corpus.tokens[i]:
                raise AlignmentError(
                    f"{path}: tree {i} tokens do not match corpus sentence {i}"
                )
            processed.append(right_binarize(pt))
        per_file.append(processed)
    corpus.focus_trees = [
        [per_file[k][i] for k in range(len(per_file))] for i in range(len(corpus))
    ]


# ---------------------------------------------------------------------------
# Evaluation


def sentence_f1(gold: set, pred: set) -> float:
    """Unlabeled F1 over non-trivial spans; two empty sets count as 1.0."""
    if not gold and not pred:
        return 1.0
    match = len(gold & pred)
    precision = match / len(pred) if pred else 0.0
    recall = match / len(gold) if gold else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def corpus_f1(gold_sets, pred_sets, micro: bool = False) -> float:
    """Sentence-level mean F1 by default; corpus-level micro-F1 on request."""
    gold_sets, pred_sets = list(gold_sets), list(pred_sets)
    if len(gold_sets) != len(pred_sets):
        raise DataError("gold/predicted span set counts differ")
    if not gold_sets:
        raise DataError("cannot score an empty corpus")
    if not micro:
        return float(np.mean([sentence_f1(g, p) for g, p in zip(gold_sets, pred_sets)]))
    match = sum(len(g & p) for g, p in zip(gold_sets, pred_sets))
    n_pred = sum(len(p) for p in pred_sets)
    n_gold = sum(len(g) for g in gold_sets)
    precision = match / n_pred if n_pred else 0.0
    recall = match / n_gold if n_gold else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Sampling


class GrammarSampler:
    """Ancestral sampler over a grammar, with cumulative tables per parent."""

    def __init__(self, grammar: Grammar, seed: int | None = None):
        self.grammar = grammar
        self.symbols = grammar.symbols
        self.rng = np.random.default_rng(seed)
        self._root_cum = self._cumulate(np.exp(grammar.root_logprobs)[None, :])[0]
        n = self.symbols.num_nonterminals
        self._binary_cum = self._cumulate(
            np.exp(grammar.binary_logprobs.reshape(n, -1))
        )
        self._unary_cum = self._cumulate(np.exp(grammar.unary_logprobs))

    @staticmethod
    def _cumulate(rows: np.ndarray) -> np.ndarray:
        cum = np.cumsum(rows, axis=-1)
        last = cum[:, -1:]
        if np.any(last <= 0.0):
            raise DegenerateGrammarError("a rule distribution has no mass")
        return cum / last

    def _draw(self, cum: np.ndarray) -> int:
        return int(np.searchsorted(cum, self.rng.random(), side="right"))

    def sample_tree(self, max_len: int) -> ParseTree | None:
        """One tree, or None if it would exceed ``max_len`` leaves."""
        nn = self.symbols.num_nonterminals
        c = self.symbols.num_children
        root_sym = self._draw(self._root_cum)
        leaves = 0

        def expand(sym: int) -> ParseTree | None:
            nonlocal leaves
            if sym >= nn:  # preterminal: emit a word
                leaves += 1
                if leaves > max_len:
                    return None
                w = self._draw(self._unary_cum[sym - nn])
                return ParseTree.leaf(w, sym - nn)
            pair = self._draw(self._binary_cum[sym])
            left = expand(pair // c)
            if left is None:
                return None
            right = expand(pair % c)
            if right is None:
                return None
            return ParseTree.node(sym, left, right)

        return expand(root_sym)

    def sample_corpus(self, n_sentences: int, max_len: int) -> list[ParseTree]:
        """Sample trees, rejecting any that exceed ``max_len`` leaves.

        Raises when the rejection rate makes the draw effectively impossible.
        """
        out: list[ParseTree] = []
        attempts = 0
        while len(out) < n_sentences:
            attempts += 1
            if attempts > 100 * (len(out) + 10):
                raise DegenerateGrammarError(
                    f"rejection rate too high: {len(out)} accepted in {attempts} attempts"
                )
            t = self.sample_tree(max_len)
            if t is not None and t.leaf_count() >= 2:
                out.append(t)
        return out


# ---------------------------------------------------------------------------
# Hand-built generator grammar


def toy_grammar() -> tuple[Grammar, Vocabulary]:
    """A 6-nonterminal, 12-preterminal English-like generator grammar.

    Word frequencies are Zipf-skewed within each class, and many forms are
    class-ambiguous ("fish", "light", "round", ...) the way real words cross
    part-of-speech lines; this makes the lexicon a genuine induction problem
    rather than a lookup table. Every symbol is reachable and recursion rates
    are subcritical, so sampling terminates with mean length around 6.
    """
    nts = ("S", "NP", "VP", "PP", "NOM", "AUXP")
    pts = (
        "Det", "Noun", "Adj", "VerbT", "VerbI", "Prep",
        "Adv", "Pron", "Name", "Mod", "Num", "Part",
    )
    words = {
        "Det": [("the", 0.45), ("a", 0.28), ("every", 0.10), ("some", 0.08),
                ("no", 0.05), ("this", 0.04)],
        "Noun": [("fish", 0.20), ("dog", 0.14), ("cat", 0.12), ("light", 0.08),
                 ("run", 0.07), ("bird", 0.08), ("man", 0.07), ("park", 0.06),
                 ("walk", 0.05), ("play", 0.05), ("back", 0.04), ("telescope", 0.04)],
        "Adj": [("light", 0.22), ("big", 0.18), ("small", 0.14), ("old", 0.11),
                ("still", 0.09), ("young", 0.08), ("round", 0.07), ("red", 0.06),
                ("close", 0.05)],
        "VerbT": [("sees", 0.20), ("likes", 0.16), ("watch", 0.12), ("light", 0.10),
                  ("chases", 0.09), ("finds", 0.08), ("play", 0.08), ("holds", 0.07),
                  ("round", 0.06), ("walk", 0.04)],
        "VerbI": [("fish", 0.22), ("runs", 0.18), ("sleeps", 0.14), ("play", 0.12),
                  ("jumps", 0.09), ("walk", 0.09), ("swims", 0.08), ("back", 0.08)],
        "Prep": [("in", 0.28), ("on", 0.22), ("with", 0.14), ("near", 0.11),
                 ("like", 0.09), ("round", 0.09), ("back", 0.07)],
        "Adv": [("light", 0.18), ("quickly", 0.16), ("still", 0.16), ("well", 0.14),
                ("today", 0.12), ("close", 0.12), ("back", 0.12)],
        "Pron": [("it", 0.5), ("she", 0.3), ("he", 0.2)],
        "Name": [("alex", 0.4), ("sam", 0.3), ("kim", 0.2), ("lee", 0.1)],
        "Mod": [("can", 0.4), ("will", 0.3), ("may", 0.2), ("must", 0.1)],
        "Num": [("one", 0.5), ("two", 0.3), ("three", 0.2)],
        "Part": [("up", 0.3), ("off", 0.25), ("round", 0.25), ("away", 0.2)],
    }
    rules = {
        "S": [("NP", "VP", 0.60), ("Pron", "VP", 0.12), ("Name", "VP", 0.13), ("NP", "AUXP", 0.15)],
        "NP": [("Det", "Noun", 0.40), ("Det", "NOM", 0.22), ("NP", "PP", 0.13),
               ("Adj", "Noun", 0.15), ("Num", "Noun", 0.10)],
        "VP": [("VerbT", "NP", 0.45), ("VerbI", "Adv", 0.20), ("VerbI", "Part", 0.15),
               ("VP", "PP", 0.10), ("Adv", "VP", 0.10)],
        "PP": [("Prep", "NP", 0.90), ("Prep", "NOM", 0.10)],
        "NOM": [("Adj", "Noun", 0.60), ("Adj", "NOM", 0.25), ("Noun", "PP", 0.15)],
        "AUXP": [("Mod", "VP", 0.90), ("Adv", "VP", 0.10)],
    }
    root = {"S": 1.0}

    symbols = SymbolTable(
        num_nonterminals=len(nts),
        num_preterminals=len(pts),
        nonterminal_names=nts,
        preterminal_names=pts,
    )
    vocab_words = [UNK]
    for pt in pts:
        # class-ambiguous forms appear under several preterminals
        vocab_words.extend(w for w, _ in words[pt] if w not in vocab_words)
    vocab = Vocabulary(words=vocab_words)

    nt_id = {name: i for i, name in enumerate(nts)}
    child_id = {name: i for i, name in enumerate(nts)}
    for i, name in enumerate(pts):
        child_id[name] = symbols.num_nonterminals + i

    n, c = symbols.num_nonterminals, symbols.num_children
    root_lp = np.full(n, LOG_ZERO)
    for name, prob in root.items():
        root_lp[nt_id[name]] = np.log(prob)
    binary_lp = np.full((n, c, c), LOG_ZERO)
    for parent, entries in rules.items():
        total = sum(p for _, _, p in entries)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"rules for {parent} sum to {total}")
        for left, right, prob in entries:
            binary_lp[nt_id[parent], child_id[left], child_id[right]] = np.log(prob)
    unary_lp = np.full((symbols.num_preterminals, vocab.size), LOG_ZERO)
    for t, pt in enumerate(pts):
        total = sum(p for _, p in words[pt])
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"words for {pt} sum to {total}")
        for w, prob in words[pt]:
            unary_lp[t, vocab.index(w)] = np.log(prob)

    grammar = Grammar(
        symbols=symbols,
        root_logprobs=root_lp,
        binary_logprobs=binary_lp,
        unary_logprobs=unary_lp,
    )
    return grammar, vocab


def trees_to_file(trees, path, symbols=None, vocab=None) -> None:
    """Write trees one per line; ParseTree nodes are resolved via the tables."""
    with open(path, "w", encoding="utf-8") as f:
        for t in trees:
            if isinstance(t, ParseTree):
                f.write(t.to_bracketed(symbols, vocab) + "\n")
            else:
                f.write(t.to_bracketed() + "\n")
