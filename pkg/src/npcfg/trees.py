"""Binary parse trees and span extraction.

A :class:`ParseTree` is either an internal node with a nonterminal label and
two children, or a leaf carrying a word and its preterminal tag. Labels and
words are integer ids resolved against a :class:`~npcfg.grammar.SymbolTable`
and a vocabulary only when printing.

A span is a half-open interval ``(i, j)`` over leaf positions. Span sets are
plain ``set`` objects of such tuples.
"""

from __future__ import annotations

from dataclasses import dataclass

SpanSet = set  # set[tuple[int, int]]


@dataclass
class ParseTree:
    label: int
    left: "ParseTree | None" = None
    right: "ParseTree | None" = None
    word: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.word is not None

    @staticmethod
    def leaf(word: int, tag: int) -> "ParseTree":
        return ParseTree(label=tag, word=word)

    @staticmethod
    def node(label: int, left: "ParseTree", right: "ParseTree") -> "ParseTree":
        return ParseTree(label=label, left=left, right=right)

    def leaf_count(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.leaf_count() + self.right.leaf_count()

    def leaves(self) -> list["ParseTree"]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def words(self) -> list[int]:
        return [leaf.word for leaf in self.leaves()]

    def to_bracketed(self, symbols=None, vocab=None) -> str:
        """Render as a bracketed string, resolving names when tables are given."""

        def tag_name(t):
            return symbols.preterminal_names[t] if symbols is not None else f"T{t}"

        def nt_name(a):
            return symbols.nonterminal_names[a] if symbols is not None else f"NT{a}"

        def word_str(w):
            return vocab.word(w) if vocab is not None else str(w)

        if self.is_leaf:
            return f"({tag_name(self.label)} {word_str(self.word)})"
        left = self.left.to_bracketed(symbols, vocab)
        right = self.right.to_bracketed(symbols, vocab)
        return f"({nt_name(self.label)} {left} {right})"


def tree_to_spans(tree, include_whole: bool = False) -> SpanSet:
    """Spans of width >= 2 covered by a tree's internal nodes.

    Works for any tree whose nodes expose ``is_leaf`` and either
    ``left``/``right`` or ``children``. The whole-sentence span is excluded
    unless ``include_whole`` is set; width-1 spans are never included.
    """
    spans: SpanSet = set()
    total = _count_leaves(tree)

    def walk(node, start: int) -> int:
        if node.is_leaf:
            return start + 1
        pos = start
        for child in _children(node):
            pos = walk(child, pos)
        width = pos - start
        if width >= 2 and (include_whole or not (start == 0 and pos == total)):
            spans.add((start, pos))
        return pos

    walk(tree, 0)
    return spans


def _children(node):
    kids = getattr(node, "children", None)
    if kids is not None:
        return kids
    return (node.left, node.right)


def _count_leaves(node) -> int:
    if node.is_leaf:
        return 1
    return sum(_count_leaves(c) for c in _children(node))
