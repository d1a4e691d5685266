"""Independent oracles and the gradient / self-test suites behind the CLI.

The oracles deliberately avoid the code paths they check: trees are
enumerated combinatorially, edit distances come from breadth-first search
over single-edit moves, and path attention is recomputed by literally
running attention on each path's sub-sequence.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

from . import attention as attn
from .tensor import (
    Tensor,
    concat,
    dropout,
    embedding_gather,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    nll_loss,
    relu,
    reshape,
    softmax_masked,
    sum_,
    swapaxes,
)
from .tree import (
    LinearParse,
    ParseTree,
    enumerate_paths,
    linearize,
    parse_bracketed,
    path_mask_matrix,
    random_tree,
    to_bracketed,
    delinearize,
    validate_levels,
)

# ---------------------------------------------------------------------------
# tree enumeration


@lru_cache(maxsize=None)
def _shapes(n: int, depth: int) -> tuple:
    """All ordered unlabeled trees with exactly n nodes and depth <= depth (nested tuples)."""
    if n < 1 or depth < 1:
        return ()
    return tuple(_forests(n - 1, depth - 1))


@lru_cache(maxsize=None)
def _forests(n: int, depth: int) -> tuple:
    if n == 0:
        return ((),)
    out = []
    for first in range(1, n + 1):
        for head in _shapes(first, depth):
            for tail in _forests(n - first, depth):
                out.append((head,) + tail)
    return tuple(out)


def tree_shapes(max_nodes: int, max_depth: int = 99) -> list[tuple]:
    return [s for n in range(1, max_nodes + 1) for s in _shapes(n, max_depth)]


def shape_levels(shape: tuple, depth: int = 1) -> list[int]:
    out = [depth]
    for child in shape:
        out.extend(shape_levels(child, depth + 1))
    return out


def shape_size(shape: tuple) -> int:
    return 1 + sum(shape_size(c) for c in shape)


def label_shape(shape: tuple, labels: Sequence[str]) -> ParseTree:
    it = iter(labels)

    def build(s):
        label = next(it)
        return ParseTree(label, tuple(build(c) for c in s))

    return build(shape)


def labeled_trees(max_nodes: int, labels: Sequence[str]) -> list[ParseTree]:
    out = []
    for shape in tree_shapes(max_nodes):
        for combo in itertools.product(labels, repeat=shape_size(shape)):
            out.append(label_shape(shape, combo))
    return out


def tree_level_sequences(max_nodes: int, max_depth: int) -> set[tuple[int, ...]]:
    return {tuple(shape_levels(s)) for s in tree_shapes(max_nodes, max_depth)}


# ---------------------------------------------------------------------------
# brute-force edit distance


def _replace_at(tree: ParseTree, path: tuple[int, ...], make) -> ParseTree:
    if not path:
        return make(tree)
    i = path[0]
    kids = list(tree.children)
    kids[i] = _replace_at(kids[i], path[1:], make)
    return ParseTree(tree.label, tuple(kids))


def _node_paths(tree: ParseTree, prefix=()) -> Iterator[tuple[tuple[int, ...], ParseTree]]:
    yield prefix, tree
    for i, c in enumerate(tree.children):
        yield from _node_paths(c, prefix + (i,))


def single_edit_neighbours(tree: ParseTree, labels: Sequence[str]) -> Iterator[ParseTree]:
    """Trees one relabel or one deletion away (insertions are deletions reversed)."""
    for path, node in _node_paths(tree):
        for lab in labels:
            if lab != node.label:
                yield _replace_at(tree, path, lambda n, lab=lab: ParseTree(lab, n.children))
        if not path:
            if len(node.children) == 1:
                yield node.children[0]
            continue
        parent_path, idx = path[:-1], path[-1]

        def splice(parent, idx=idx):
            kids = parent.children
            return ParseTree(parent.label, kids[:idx] + kids[idx].children + kids[idx + 1:])

        yield _replace_at(tree, parent_path, splice)


@dataclass
class EditGraphDistances:
    trees: list[ParseTree]
    index: dict[ParseTree, int]
    dist: np.ndarray  # int8 [n, n]

    def __call__(self, a: ParseTree, b: ParseTree) -> int:
        return int(self.dist[self.index[a], self.index[b]])


def brute_force_ted_table(max_nodes: int = 5, labels: Sequence[str] = ("a", "b", "c")) -> EditGraphDistances:
    """Minimal edit-script lengths between all labeled trees of <= max_nodes nodes.

    Breadth-first search over the graph whose edges are single relabels or
    deletions.  A minimal script can always be ordered deletions, relabels,
    insertions, so no intermediate tree is larger than the larger endpoint
    and the graph restricted to <= max_nodes nodes is sufficient.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import shortest_path

    trees = labeled_trees(max_nodes, labels)
    index = {t: i for i, t in enumerate(trees)}
    rows, cols = [], []
    for i, t in enumerate(trees):
        for nb in single_edit_neighbours(t, labels):
            rows.append(i)
            cols.append(index[nb])
    n = len(trees)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    dist = shortest_path(graph, directed=False, unweighted=True)
    return EditGraphDistances(trees, index, dist.astype(np.int8))


def _canonical_labelings(k: int, n_labels: int) -> Iterator[tuple[int, ...]]:
    # restricted growth strings: labels appear in first-occurrence order
    def rec(prefix, used):
        if len(prefix) == k:
            yield tuple(prefix)
            return
        for lab in range(min(used + 1, n_labels)):
            yield from rec(prefix + [lab], max(used, lab + 1))

    yield from rec([], 0)


def canonical_tree_pairs(max_nodes: int, labels: Sequence[str]) -> Iterator[tuple[ParseTree, ParseTree]]:
    """One representative per class of tree pairs under consistent label renaming."""
    shapes = tree_shapes(max_nodes)
    built: dict[tuple, ParseTree] = {}

    def tree(shape, combo):
        key = (shape, combo)
        t = built.get(key)
        if t is None:
            t = built[key] = label_shape(shape, [labels[c] for c in combo])
        return t

    for s1 in shapes:
        n1 = shape_size(s1)
        for s2 in shapes:
            for combo in _canonical_labelings(n1 + shape_size(s2), len(labels)):
                yield tree(s1, combo[:n1]), tree(s2, combo[n1:])


# ---------------------------------------------------------------------------
# reference path attention


def reference_path_attention(O: np.ndarray, lp: LinearParse, params: attn.SelfAttnParams) -> np.ndarray:
    """Run self-attention separately on each path's nodes and average the
    scattered results, with plain numpy and explicit per-head loops."""
    N = O.shape[0]
    paths = enumerate_paths(lp).paths
    WQ, WK, WV, WO = (params.heads.W_Q.data, params.heads.W_K.data, params.heads.W_V.data, params.W_O.data)
    h, _, d_k = WQ.shape
    total = np.zeros((N, WO.shape[1]))
    for path in paths:
        sub = O[list(path)]
        heads = []
        for j in range(h):
            q, k, v = sub @ WQ[j], sub @ WK[j], sub @ WV[j]
            s = q @ k.T / math.sqrt(d_k)
            w = np.exp(s - s.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            heads.append(w @ v)
        C = np.zeros((N, WO.shape[1]))
        C[list(path)] = np.concatenate(heads, axis=1) @ WO
        total += C
    return total / len(paths)


# ---------------------------------------------------------------------------
# suites


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand(rng, *shape, name=None) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def _self_attn_params(rng, h, d_m, d_k, d_v) -> attn.SelfAttnParams:
    return attn.SelfAttnParams(
        attn.HeadParams(_rand(rng, h, d_m, d_k, name="W_Q"), _rand(rng, h, d_m, d_k, name="W_K"),
                        _rand(rng, h, d_m, d_v, name="W_V")),
        _rand(rng, h * d_v, d_m, name="W_O"),
    )


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # random projection so the check sees a non-degenerate output gradient
    w = rng.normal(size=out.shape)
    return sum_(out * w)


def op_gradient_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = []

    a, b = _rand(rng, 3, 4, name="a"), _rand(rng, 4, 2, name="b")
    cases.append(("matmul", lambda: _weighted_sum(matmul(a, b), np.random.default_rng(1)), [a, b]))

    x = _rand(rng, 3, 5, name="x")
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    cases.append(("softmax_masked", lambda: _weighted_sum(softmax_masked(x, mask), np.random.default_rng(2)), [x]))

    x2 = _rand(rng, 2, 4, name="x")
    g, be = _rand(rng, 4, name="gamma"), _rand(rng, 4, name="beta")
    cases.append(("layer_norm", lambda: _weighted_sum(layer_norm(x2, g, be), np.random.default_rng(3)), [x2, g, be]))

    table = _rand(rng, 5, 3, name="table")
    idx = np.array([0, 2, 2, 4])
    cases.append(("embedding_gather", lambda: _weighted_sum(embedding_gather(table, idx), np.random.default_rng(4)),
                  [table]))

    logits = _rand(rng, 4, 6, name="logits")
    tg = np.array([0, 5, 2, 2])
    cases.append(("log_softmax+nll_loss", lambda: nll_loss(log_softmax(logits), tg, "mean"), [logits]))

    lw = _rand(rng, 2, 3, 5, name="logits")
    tw = np.array([[0, 4, 1], [2, 2, 3]])
    wmask = np.array([[1, 1, 0], [1, 0.5, 1]])
    cases.append(("nll_loss(weights, sum)", lambda: nll_loss(log_softmax(lw), tw, "sum", wmask), [lw]))

    sh = _rand(rng, 2, 3, 4, name="x")
    cases.append(("reshape/swapaxes",
                  lambda: _weighted_sum(swapaxes(reshape(sh, (3, 2, 4)), 0, 2), np.random.default_rng(13)), [sh]))

    dr = _rand(rng, 4, 5, name="x")
    cases.append(("dropout(fixed mask)",
                  lambda: _weighted_sum(dropout(dr, 0.3, np.random.default_rng(14)), np.random.default_rng(15)),
                  [dr]))

    r = _rand(rng, 3, 4, name="x")
    cases.append(("relu", lambda: _weighted_sum(relu(r), np.random.default_rng(5)), [r]))

    c1, c2 = _rand(rng, 2, 3, name="c1"), _rand(rng, 2, 2, name="c2")
    cases.append(("concat", lambda: _weighted_sum(concat([c1, c2], -1), np.random.default_rng(6)), [c1, c2]))

    mm = _rand(rng, 3, 2, 4, name="x")
    cases.append(("mean", lambda: _weighted_sum(mean(mm, axis=0), np.random.default_rng(7)), [mm]))

    e1, e2 = _rand(rng, 3, 4, name="p"), _rand(rng, 4, name="q")
    cases.append(("add/mul/scale", lambda: _weighted_sum((e1 + e2) * e1 * 0.5 - e2, np.random.default_rng(8)),
                  [e1, e2]))

    d_m, d_k = 6, 3
    Q, K, V = _rand(rng, 4, d_k, name="Q"), _rand(rng, 5, d_k, name="K"), _rand(rng, 5, d_k, name="V")
    kmask = np.ones((4, 5), dtype=bool)
    kmask[1, 3:] = False
    cases.append(("scaled_dot_attention",
                  lambda: _weighted_sum(attn.scaled_dot_attention(Q, K, V, kmask), np.random.default_rng(9)),
                  [Q, K, V]))

    X = _rand(rng, 4, d_m, name="X")
    sp = _self_attn_params(rng, 2, d_m, d_k, d_k)
    cases.append(("multi_head_self_attention(causal)",
                  lambda: _weighted_sum(attn.multi_head_self_attention(X, sp, causal=True), np.random.default_rng(10)),
                  [X, sp.heads.W_Q, sp.heads.W_K, sp.heads.W_V, sp.W_O]))

    O, H1, H2 = _rand(rng, 3, d_m, name="O"), _rand(rng, 4, d_m, name="H1"), _rand(rng, 6, d_m, name="H2")
    mp = attn.MultiEncoderParams(_self_attn_params(rng, 2, d_m, d_k, d_k).heads,
                                 _self_attn_params(rng, 1, d_m, d_k, d_k).heads, _rand(rng, 3 * d_k, d_m, name="W_O"))
    cases.append(("multi_encoder_attention",
                  lambda: _weighted_sum(attn.multi_encoder_attention(O, H1, H2, mp), np.random.default_rng(11)),
                  [O, H1, H2, mp.heads_enc1.W_Q, mp.heads_enc2.W_V, mp.W_O]))

    lp = linearize(parse_bracketed("(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))"))
    masks = path_mask_matrix(enumerate_paths(lp), len(lp))
    P = _rand(rng, len(lp), d_m, name="O")
    pp = _self_attn_params(rng, 2, d_m, d_k, d_k)
    cases.append(("path_attention",
                  lambda: _weighted_sum(attn.path_attention(P, masks, pp), np.random.default_rng(12)),
                  [P, pp.heads.W_Q, pp.heads.W_K, pp.heads.W_V, pp.W_O]))
    for mode, avg in ((attn.KEYS_ONLY, attn.UNIFORM), (attn.KEYS_AND_QUERIES, attn.PER_NODE)):
        cases.append((f"path_attention({mode}, {avg})",
                      lambda mode=mode, avg=avg: _weighted_sum(attn.path_attention(P, masks, pp, mode=mode, average=avg),
                                                               np.random.default_rng(16)),
                      [P, pp.heads.W_Q, pp.W_O]))
    return cases


def tiny_model_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """Loss-through-model cases for both models at d_m=16, one block, two heads."""
    from .data import (build_vocabs, collate_expander, collate_generator, expander_examples,
                       generator_examples, synthetic_corpus)
    from .model import ExpanderModel, GeneratorModel, ModelConfig
    from .train import TrainConfig, batch_loss

    records = synthetic_corpus(4, seed=seed)
    vocabs = build_vocabs(records)
    cfg = ModelConfig(d_m=16, d_k=8, d_v=8, h1=1, h2=1, h_enc=2, n1=1, n2=1, d_ff=32, seed=seed)
    tc = TrainConfig()
    cases = []
    exp = ExpanderModel(cfg, vocabs)
    eb = collate_expander(expander_examples(records[:3]), vocabs)
    cases.append(("expander loss", lambda: batch_loss(exp, eb, tc)[0], exp.parameters()))
    gen = GeneratorModel(cfg, vocabs)
    gb = collate_generator(generator_examples(records[:3]), vocabs)
    cases.append(("generator loss", lambda: batch_loss(gen, gb, tc)[0], gen.parameters()))
    return cases


def run_gradcheck(tol: float = 1e-4, step: float = 1e-5, model_elements: int = 3, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, f, inputs in op_gradient_cases(seed):
        rep = grad_check(f, inputs, step=step, tol=tol)
        results.append(CheckResult(name, rep.passed, f"max rel err {rep.max_rel_error:.2e}"))
    for name, f, inputs in tiny_model_cases(seed):
        rep = grad_check(f, inputs, step=step, tol=tol, max_elements=model_elements, seed=seed)
        results.append(CheckResult(name, rep.passed,
                                   f"max rel err {rep.max_rel_error:.2e} over {len(rep.entries)} tensors"))
    return results


def check_linearization(n_trees: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_trees):
        t = random_tree(rng, max_depth=8, max_branch=4, expand_prob=0.45)
        lp = linearize(t)
        if delinearize(lp) != t or parse_bracketed(to_bracketed(t)) != t or not validate_levels(lp.levels):
            bad += 1
    return CheckResult("linearization round trip", bad == 0, f"{bad} failures over {n_trees} trees")


def check_level_oracle(max_nodes: int = 6, max_level: int = 4) -> CheckResult:
    valid = tree_level_sequences(max_nodes, max_level)
    mismatches = 0
    checked = 0
    for n in range(1, max_nodes + 1):
        for seq in itertools.product(range(1, max_level + 1), repeat=n):
            checked += 1
            if validate_levels(seq) != (seq in valid):
                mismatches += 1
    return CheckResult("level validity oracle", mismatches == 0, f"{mismatches} mismatches over {checked} sequences")


def check_ted_oracle(max_nodes: int = 5, labels: Sequence[str] = ("a", "b", "c")) -> CheckResult:
    from .metrics import tree_edit_distance

    table = brute_force_ted_table(max_nodes, labels)
    mismatches = checked = 0
    for t1, t2 in canonical_tree_pairs(max_nodes, labels):
        checked += 1
        if tree_edit_distance(t1, t2) != table(t1, t2):
            mismatches += 1
    return CheckResult("TED vs brute force", mismatches == 0,
                       f"{mismatches} mismatches over {checked} canonical pairs ({len(table.trees)} trees)")


def check_path_locality(n_trees: int = 100, seed: int = 0, d_m: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = _self_attn_params(rng, 2, d_m, 4, 4)
    worst = 0.0
    for _ in range(n_trees):
        t = random_tree(rng, max_depth=6, max_branch=3, expand_prob=0.5)
        lp = linearize(t)
        N = len(lp)
        masks = path_mask_matrix(enumerate_paths(lp), N)
        share = (masks.T.astype(int) @ masks.astype(int)) > 0
        O = rng.normal(size=(N, d_m))
        base = attn.path_attention(Tensor(O), masks, params).data
        for u in range(N):
            if share[u].all():
                continue
            O2 = O.copy()
            O2[u] += rng.normal(size=d_m)
            diff = np.abs(attn.path_attention(Tensor(O2), masks, params).data - base).max(axis=1)
            worst = max(worst, float(diff[~share[u]].max()))
    return CheckResult("path attention locality", worst <= 1e-12, f"max off-path change {worst:.1e}")


def run_selftest(fast: bool = False) -> list[CheckResult]:
    out = [
        check_linearization(200 if fast else 1000),
        check_level_oracle(),
        check_path_locality(20 if fast else 100),
    ]
    out.append(check_ted_oracle(4 if fast else 5))
    return out


def timed(fn, *args, **kw):
    t = time.perf_counter()
    res = fn(*args, **kw)
    return res, time.perf_counter() - t
