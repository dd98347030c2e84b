"""Core grammar representation: symbol inventory and rule log-probability tensors.

A grammar has a start symbol S, nonterminals N, preterminals P, and a word
vocabulary. Rules come in three families:

    root:   S -> A          for A in N
    binary: A -> B C        for A in N and B, C in N union P
    unary:  T -> w          for T in P and w in the vocabulary

Children live in a combined index space of size ``|N| + |P|`` with
nonterminals first, so ``binary_logprobs[a, b, c]`` addresses parents by
nonterminal index and children by combined index. All probabilities are
stored as natural-log values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GrammarShapeError

# Log-space zero. exp(LOG_ZERO) underflows to exactly 0.0 in float64, and the
# magnitude leaves room to add many sentinels without overflowing. Anything
# below IMPOSSIBLE is treated as "no derivation"; real sentence log-probs are
# orders of magnitude above it.
LOG_ZERO = -1.0e9
IMPOSSIBLE = -1.0e8


def is_log_zero(x: float) -> bool:
    """True if a log-space value means probability zero."""
    return x <= IMPOSSIBLE


@dataclass(frozen=True)
class SymbolTable:
    """Inventory of nonterminals and preterminals.

    ``num_preterminals`` defaults to twice ``num_nonterminals`` when not
    given. Combined child indices put nonterminals at 0..|N|-1 and
    preterminals at |N|..|N|+|P|-1.
    """

    num_nonterminals: int
    num_preterminals: int | None = None
    nonterminal_names: tuple[str, ...] | None = None
    preterminal_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_nonterminals < 1:
            raise GrammarShapeError("need at least one nonterminal")
        if self.num_preterminals is None:
            object.__setattr__(self, "num_preterminals", 2 * self.num_nonterminals)
        if self.num_preterminals < 1:
            raise GrammarShapeError("need at least one preterminal")
        if self.nonterminal_names is None:
            object.__setattr__(
                self,
                "nonterminal_names",
                tuple(f"NT{i}" for i in range(self.num_nonterminals)),
            )
        if self.preterminal_names is None:
            object.__setattr__(
                self,
                "preterminal_names",
                tuple(f"T{i}" for i in range(self.num_preterminals)),
            )
        if len(self.nonterminal_names) != self.num_nonterminals:
            raise GrammarShapeError("nonterminal name count mismatch")
        if len(self.preterminal_names) != self.num_preterminals:
            raise GrammarShapeError("preterminal name count mismatch")

    @property
    def num_children(self) -> int:
        """Size of the combined child index space."""
        return self.num_nonterminals + self.num_preterminals

    def pt_child(self, t: int) -> int:
        """Combined child index of preterminal ``t``."""
        return self.num_nonterminals + t

    def pair_index(self, b: int, c: int) -> int:
        """Flat index of the child pair (b, c) in combined-child order."""
        return b * self.num_children + c

    def child_name(self, i: int) -> str:
        if i < self.num_nonterminals:
            return self.nonterminal_names[i]
        return self.preterminal_names[i - self.num_nonterminals]


@dataclass
class Grammar:
    """Rule log-probability tensors over a fixed symbol table.

    Shapes: root ``(|N|,)``, binary ``(|N|, C, C)`` with ``C = |N| + |P|``,
    unary ``(|P|, V)`` for a vocabulary of size V.
    """

    symbols: SymbolTable
    root_logprobs: np.ndarray
    binary_logprobs: np.ndarray
    unary_logprobs: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.unary_logprobs.shape[1]

    def check_shapes(self) -> None:
        n = self.symbols.num_nonterminals
        p = self.symbols.num_preterminals
        c = self.symbols.num_children
        if self.root_logprobs.shape != (n,):
            raise GrammarShapeError(
                f"root tensor has shape {self.root_logprobs.shape}, expected ({n},)"
            )
        if self.binary_logprobs.shape != (n, c, c):
            raise GrammarShapeError(
                f"binary tensor has shape {self.binary_logprobs.shape}, "
                f"expected ({n}, {c}, {c})"
            )
        if self.unary_logprobs.ndim != 2 or self.unary_logprobs.shape[0] != p:
            raise GrammarShapeError(
                f"unary tensor has shape {self.unary_logprobs.shape}, "
                f"expected ({p}, V)"
            )


@dataclass(frozen=True)
class ValidationIssue:
    family: str  # "root", "binary", or "unary"
    index: int | None  # parent index within the family, None for root
    kind: str  # "mass" (sum far from 1) or "positive" (log-prob > 0)
    deviation: float

    def __str__(self):
        where = self.family if self.index is None else f"{self.family}[{self.index}]"
        return f"{where}: {self.kind} deviation {self.deviation:.3e}"


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self):
        if self.ok:
            return "grammar valid"
        return "\n".join(str(i) for i in self.issues)


def validate_grammar(g: Grammar, tol: float = 1e-6) -> ValidationReport:
    """Check that every rule distribution is a proper one.

    Raises :class:`GrammarShapeError` for structural problems. Normalization
    deviations (per-parent probability mass off from 1 by more than ``tol``)
    and positive log-prob entries are collected into the returned report
    rather than raised.
    """
    g.check_shapes()
    report = ValidationReport()

    def check_rows(rows: np.ndarray, family: str, single: bool = False) -> None:
        mass = np.exp(rows).sum(axis=-1)
        dev = np.abs(mass - 1.0)
        bad = np.nonzero(dev > tol)[0]
        for i in bad:
            report.issues.append(
                ValidationIssue(family, None if single else int(i), "mass", float(dev[i]))
            )
        pos = rows.max(axis=-1)
        for i in np.nonzero(pos > 0.0)[0]:
            report.issues.append(
                ValidationIssue(
                    family, None if single else int(i), "positive", float(pos[i])
                )
            )

    n = g.symbols.num_nonterminals
    check_rows(g.root_logprobs[None, :], "root", single=True)
    check_rows(g.binary_logprobs.reshape(n, -1), "binary")
    check_rows(g.unary_logprobs, "unary")
    return report


def uniform_grammar(symbols: SymbolTable, vocab_size: int) -> Grammar:
    """Grammar with uniform distributions in every family. Handy in tests."""
    n = symbols.num_nonterminals
    p = symbols.num_preterminals
    c = symbols.num_children
    return Grammar(
        symbols=symbols,
        root_logprobs=np.full(n, -np.log(n)),
        binary_logprobs=np.full((n, c, c), -np.log(c * c)),
        unary_logprobs=np.full((p, vocab_size), -np.log(vocab_size)),
    )


def log_zeros(shape) -> np.ndarray:
    """Array filled with the log-space zero sentinel."""
    return np.full(shape, LOG_ZERO)
