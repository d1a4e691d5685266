"""Constituency trees: bracketed I/O, node-level linearization, truncation, paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class ParseTree:
    """Delexicalized constituency tree; words never appear as nodes."""

    label: str
    children: tuple["ParseTree", ...] = ()

    def __post_init__(self):
        if not self.label or any(c in self.label for c in "() \t\r\n"):
            raise ValueError(f"invalid node label {self.label!r}")
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    def __str__(self) -> str:
        return to_bracketed(self)

    def preorder(self) -> Iterator["ParseTree"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    @property
    def size(self) -> int:
        return sum(1 for _ in self.preorder())

    @property
    def depth(self) -> int:
        return 1 + max((c.depth for c in self.children), default=0)


@dataclass(frozen=True)
class LinearParse:
    """Node-level form of a tree: labels in preorder paired with depths (root = 1)."""

    nodes: tuple[str, ...]
    levels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if len(self.nodes) != len(self.levels):
            raise ValueError(f"{len(self.nodes)} nodes but {len(self.levels)} levels")

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_strings(cls, nodes: str, levels: str) -> "LinearParse":
        return cls(tuple(nodes.split()), tuple(int(v) for v in levels.split()))

    def node_string(self) -> str:
        return " ".join(self.nodes)

    def level_string(self) -> str:
        return " ".join(str(v) for v in self.levels)


@dataclass(frozen=True)
class PathSet:
    """Root-to-leaf index chains into a LinearParse, one per leaf."""

    paths: tuple[tuple[int, ...], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.paths)


class TreeSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class LevelSequenceError(ValueError):
    def __init__(self, position: int, levels: Sequence[int]):
        super().__init__(f"invalid level sequence at position {position}: {list(levels)}")
        self.position = position


# ---------------------------------------------------------------------------
# bracketed format


def parse_bracketed(text: str) -> ParseTree:
    """Parse ``(S(NP(PRP))(VP ...))``; whitespace between tokens is ignored."""
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    def parse_node() -> ParseTree:
        nonlocal pos
        skip_ws()
        if pos >= n:
            raise TreeSyntaxError("expected '(' but input ended", pos)
        if text[pos] != "(":
            raise TreeSyntaxError(f"expected '(' but found {text[pos]!r}", pos)
        pos += 1
        skip_ws()
        start = pos
        while pos < n and text[pos] not in "()" and not text[pos].isspace():
            pos += 1
        if pos == start:
            raise TreeSyntaxError("empty label", start)
        label = text[start:pos]
        children = []
        while True:
            skip_ws()
            if pos >= n:
                raise TreeSyntaxError("unbalanced brackets: input ended", pos)
            if text[pos] == ")":
                pos += 1
                return ParseTree(label, tuple(children))
            if text[pos] != "(":
                raise TreeSyntaxError(f"unexpected {text[pos]!r}", pos)
            children.append(parse_node())

    tree = parse_node()
    skip_ws()
    if pos != n:
        raise TreeSyntaxError("trailing characters after tree", pos)
    return tree


def to_bracketed(tree: ParseTree) -> str:
    parts: list[str] = []

    def emit(node: ParseTree):
        parts.append("(" + node.label)
        for c in node.children:
            emit(c)
        parts.append(")")

    emit(tree)
    return "".join(parts)


def bracketed_token_count(tree: ParseTree) -> int:
    """Tokens of the bracketed form: one label and two parentheses per node."""
    return 3 * tree.size


# ---------------------------------------------------------------------------
# node-level format


def linearize(tree: ParseTree) -> LinearParse:
    nodes, levels = [], []
    stack = [(tree, 1)]
    while stack:
        node, depth = stack.pop()
        nodes.append(node.label)
        levels.append(depth)
        stack.extend((c, depth + 1) for c in reversed(node.children))
    return LinearParse(tuple(nodes), tuple(levels))


def first_invalid_level(levels: Sequence[int]) -> int | None:
    """Index of the first entry breaking the preorder-depth rule, or None."""
    if len(levels) == 0:
        return 0
    if levels[0] != 1:
        return 0
    for i in range(1, len(levels)):
        # a second level-1 entry would start a second root
        if not 2 <= levels[i] <= levels[i - 1] + 1:
            return i
    return None


def validate_levels(levels: Sequence[int]) -> bool:
    return first_invalid_level(levels) is None


def _check(lp: LinearParse) -> None:
    bad = first_invalid_level(lp.levels)
    if bad is not None:
        raise LevelSequenceError(bad, lp.levels)


def parent_indices(lp: LinearParse) -> list[int]:
    """Parent index per node (-1 for the root)."""
    _check(lp)
    parents = [-1]
    last_at_depth = {1: 0}
    for i in range(1, len(lp)):
        d = lp.levels[i]
        parents.append(last_at_depth[d - 1])
        last_at_depth[d] = i
    return parents


def delinearize(lp: LinearParse) -> ParseTree:
    parents = parent_indices(lp)
    kids: list[list[int]] = [[] for _ in parents]
    for i, p in enumerate(parents[1:], start=1):
        kids[p].append(i)

    def build(i: int) -> ParseTree:
        return ParseTree(lp.nodes[i], tuple(build(k) for k in kids[i]))

    return build(0)


def truncate(tree: ParseTree, depth: int) -> ParseTree:
    """Keep only the top ``depth`` levels."""
    if depth < 1:
        raise ValueError(f"truncation depth must be >= 1, got {depth}")
    if depth == 1:
        return ParseTree(tree.label)
    return ParseTree(tree.label, tuple(truncate(c, depth - 1) for c in tree.children))


# ---------------------------------------------------------------------------
# paths


def enumerate_paths(lp: LinearParse) -> PathSet:
    parents = parent_indices(lp)
    has_child = [False] * len(parents)
    for p in parents[1:]:
        has_child[p] = True
    paths = []
    for i, internal in enumerate(has_child):
        if internal:
            continue
        chain = []
        j = i
        while j != -1:
            chain.append(j)
            j = parents[j]
        paths.append(tuple(reversed(chain)))
    return PathSet(tuple(paths))


def path_mask_matrix(ps: PathSet, n: int) -> np.ndarray:
    """Boolean [n_paths x n]: entry (i, j) is true iff node j lies on path i."""
    mask = np.zeros((len(ps), n), dtype=bool)
    for i, path in enumerate(ps.paths):
        mask[i, list(path)] = True
    return mask


def random_tree(
    rng: np.random.Generator,
    max_depth: int = 8,
    max_branch: int = 4,
    labels: Sequence[str] = ("S", "NP", "VP", "PP", "DT", "NN", "VBD", "IN", "JJ"),
    expand_prob: float = 0.6,
) -> ParseTree:
    def grow(depth: int) -> ParseTree:
        label = labels[rng.integers(len(labels))]
        if depth >= max_depth or rng.random() > expand_prob:
            return ParseTree(label)
        k = int(rng.integers(1, max_branch + 1))
        return ParseTree(label, tuple(grow(depth + 1) for _ in range(k)))

    return grow(1)
