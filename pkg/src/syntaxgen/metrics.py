"""Tree edit distance family, sentence BLEU and template preservation.

TED uses unit-cost insert, delete and relabel (rename) on ordered labeled
trees via the Zhang-Shasha dynamic program.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .tree import LinearParse, ParseTree, delinearize, truncate

REFERENCE = "reference"
HYPOTHESIS = "hypothesis"
MAX = "max"


@dataclass(frozen=True)
class _Annotated:
    labels: tuple[str, ...]  # postorder
    lmd: tuple[int, ...]  # leftmost leaf descendant per postorder index
    keyroots: tuple[int, ...]


@lru_cache(maxsize=65536)
def _annotate(tree: ParseTree) -> _Annotated:
    labels: list[str] = []
    lmd: list[int] = []

    def walk(node: ParseTree) -> int:
        first = None
        for c in node.children:
            leftmost = walk(c)
            if first is None:
                first = leftmost
        idx = len(labels)
        labels.append(node.label)
        lmd.append(idx if first is None else first)
        return lmd[idx]

    walk(tree)
    # keyroots: the highest node for each distinct leftmost leaf
    seen: dict[int, int] = {}
    for i, l in enumerate(lmd):
        seen[l] = i
    return _Annotated(tuple(labels), tuple(lmd), tuple(sorted(seen.values())))


def tree_edit_distance(t1: ParseTree, t2: ParseTree) -> int:
    a, b = _annotate(t1), _annotate(t2)
    la, lb = a.lmd, b.lmd
    A, B = a.labels, b.labels
    n, m = len(A), len(B)
    td = [[0] * m for _ in range(n)]
    for i in a.keyroots:
        li = la[i]
        for j in b.keyroots:
            lj = lb[j]
            rows = i - li + 2
            cols = j - lj + 2
            fd = [[0] * cols for _ in range(rows)]
            for x in range(1, rows):
                fd[x][0] = x
            for y in range(1, cols):
                fd[0][y] = y
            for x in range(1, rows):
                ii = li + x - 1
                lii = la[ii]
                fx, fprev = fd[x], fd[x - 1]
                for y in range(1, cols):
                    jj = lj + y - 1
                    if lii == li and lb[jj] == lj:
                        fx[y] = min(fprev[y] + 1, fx[y - 1] + 1, fprev[y - 1] + (A[ii] != B[jj]))
                        td[ii][jj] = fx[y]
                    else:
                        fx[y] = min(fprev[y] + 1, fx[y - 1] + 1,
                                    fd[lii - li][lb[jj] - lj] + td[ii][jj])
    return td[n - 1][m - 1]


def _denominator(t1: ParseTree, t2: ParseTree, mode: str) -> int:
    if mode == REFERENCE:
        return t2.size
    if mode == HYPOTHESIS:
        return t1.size
    if mode == MAX:
        return max(t1.size, t2.size)
    raise ValueError(f"unknown N-TED denominator {mode!r}")


def n_ted(t1: ParseTree, t2: ParseTree, denominator: str = REFERENCE) -> float:
    """TED divided by a node count; ``t2`` is the reference tree."""
    return tree_edit_distance(t1, t2) / _denominator(t1, t2, denominator)


def ted_at_level(t1: ParseTree, t2: ParseTree, level: int, denominator: str = REFERENCE) -> tuple[int, float]:
    a, b = truncate(t1, level), truncate(t2, level)
    d = tree_edit_distance(a, b)
    return d, d / _denominator(a, b, denominator)


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(hypothesis: Sequence[str], reference: Sequence[str], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total hypothesis n-grams."""
    hyp = _ngrams(hypothesis, n)
    ref = _ngrams(reference, n)
    return sum(min(c, ref[g]) for g, c in hyp.items()), sum(hyp.values())


def bleu(hypothesis: Sequence[str], reference: Sequence[str], max_n: int = 4, epsilon: float = 1e-9) -> float:
    """Sentence BLEU with uniform weights and epsilon smoothing of zero matches.

    Orders longer than the hypothesis are skipped so that short exact
    matches still score 1.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not hypothesis:
        return 0.0
    orders = min(max_n, len(hypothesis))
    log_p = 0.0
    for n in range(1, orders + 1):
        hits, total = modified_precision(hypothesis, reference, n)
        log_p += math.log((hits if hits > 0 else epsilon) / total)
    c, r = len(hypothesis), len(reference)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p / orders)


# ---------------------------------------------------------------------------
# template preservation


def template_match_rate(x_expanded: LinearParse, x_tmpl: LinearParse, depth: int) -> float:
    """1.0 iff the top ``depth`` levels of the expansion equal the template."""
    return float(truncate(delinearize(x_expanded), depth) == delinearize(x_tmpl))


def corpus_template_match_rate(pairs: Sequence[tuple[LinearParse, LinearParse]], depth: int) -> float:
    if not pairs:
        return 0.0
    return sum(template_match_rate(x, t, depth) for x, t in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# report


TED_LEVELS = tuple(range(2, 9))


def pair_scores(hyp_tokens: Sequence[str], ref_tokens: Sequence[str], hyp_tree: ParseTree | None,
                ref_tree: ParseTree | None, denominator: str = REFERENCE) -> dict:
    out = {"bleu": bleu(hyp_tokens, ref_tokens), "exact_match": float(list(hyp_tokens) == list(ref_tokens))}
    if hyp_tree is not None and ref_tree is not None:
        d = tree_edit_distance(hyp_tree, ref_tree)
        out["ted"] = d
        out["n_ted"] = d / _denominator(hyp_tree, ref_tree, denominator)
        for lvl in TED_LEVELS:
            t, nt = ted_at_level(hyp_tree, ref_tree, lvl, denominator)
            out[f"ted_{lvl}"] = t
            out[f"n_ted_{lvl}"] = nt
    return out


def corpus_means(rows: Sequence[dict]) -> dict:
    keys = sorted({k for r in rows for k in r if isinstance(r[k], (int, float))})
    return {k: sum(r[k] for r in rows if k in r) / max(1, sum(1 for r in rows if k in r)) for k in keys}
