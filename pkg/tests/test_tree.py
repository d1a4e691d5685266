import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syntaxgen.tree import (
    LevelSequenceError,
    LinearParse,
    ParseTree,
    TreeSyntaxError,
    bracketed_token_count,
    delinearize,
    enumerate_paths,
    linearize,
    parse_bracketed,
    path_mask_matrix,
    random_tree,
    to_bracketed,
    truncate,
    validate_levels,
)

APPLE = "(S(NP(PRP))(VP(VBD)(NP(DT)(NN))))"


@st.composite
def trees(draw, max_depth=6, max_branch=3):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_tree(np.random.default_rng(seed), max_depth=max_depth, max_branch=max_branch, expand_prob=0.55)


def chain(n):
    t = ParseTree("X")
    for i in range(n - 1):
        t = ParseTree(f"N{i}", (t,))
    return t


# bracketed I/O


def test_parse_apple():
    t = parse_bracketed(APPLE)
    assert t.size == 8
    assert [n.label for n in t.preorder()] == "S NP PRP VP VBD NP DT NN".split()


def test_parse_single_node():
    assert parse_bracketed("(S)") == ParseTree("S")


def test_parse_unbalanced_reports_end_offset():
    with pytest.raises(TreeSyntaxError) as e:
        parse_bracketed("(S(NP)")
    assert e.value.offset == len("(S(NP)")


@pytest.mark.parametrize("bad", ["()", "(S))", "(S)(NP)", "S", "(S(NP)x)", ""])
def test_parse_rejects_malformed(bad):
    with pytest.raises(TreeSyntaxError):
        parse_bracketed(bad)


def test_parse_tolerates_whitespace():
    assert parse_bracketed(" (S (NP (PRP))\n (VP (VBD) (NP (DT) (NN)))) ") == parse_bracketed(APPLE)


def test_to_bracketed():
    assert to_bracketed(ParseTree("S")) == "(S)"
    assert to_bracketed(parse_bracketed(APPLE)) == APPLE


@settings(max_examples=200, deadline=None)
@given(trees(max_depth=8, max_branch=4))
def test_bracketed_round_trip(t):
    assert parse_bracketed(to_bracketed(t)) == t


def test_invalid_label_rejected():
    with pytest.raises(ValueError):
        ParseTree("N P")
    with pytest.raises(ValueError):
        ParseTree("")


# linearization


def test_linearize_apple():
    lp = linearize(parse_bracketed(APPLE))
    assert lp.node_string() == "S NP PRP VP VBD NP DT NN"
    assert lp.level_string() == "1 2 3 2 3 3 4 4"


def test_linearize_single():
    lp = linearize(ParseTree("S"))
    assert lp.nodes == ("S",) and lp.levels == (1,)


def test_token_ratio_apple():
    t = parse_bracketed(APPLE)
    assert len(linearize(t)) == 8
    assert bracketed_token_count(t) == 24
    assert len(linearize(t)) * 3 == bracketed_token_count(t)


def test_delinearize_apple():
    lp = LinearParse.from_strings("S NP PRP VP VBD NP DT NN", "1 2 3 2 3 3 4 4")
    assert delinearize(lp) == parse_bracketed(APPLE)


def test_delinearize_reports_first_bad_position():
    with pytest.raises(LevelSequenceError) as e:
        delinearize(LinearParse.from_strings("S NP", "1 3"))
    assert e.value.position == 1


@settings(max_examples=200, deadline=None)
@given(trees(max_depth=8, max_branch=4))
def test_linearize_bijection_and_ratio(t):
    lp = linearize(t)
    assert validate_levels(lp.levels)
    assert delinearize(lp) == t
    assert linearize(delinearize(lp)) == lp
    assert bracketed_token_count(t) == 3 * len(lp) == 3 * t.size


@pytest.mark.parametrize("levels,ok", [
    ("1 2 3 2 3 3 4 4", True),
    ("1 3", False),
    ("1", True),
    ("2", False),
    ("", False),
    ("1 2 2 3 4 2", True),
    ("1 2 1", False),  # a second root
    ("1 2 0", False),
])
def test_validate_levels(levels, ok):
    assert validate_levels([int(v) for v in levels.split()]) is ok


# truncation


def test_truncate_apple_depth3():
    lp = linearize(truncate(parse_bracketed(APPLE), 3))
    assert lp.node_string() == "S NP PRP VP VBD NP"
    assert lp.level_string() == "1 2 3 2 3 3"


def test_truncate_deep_enough_is_identity_and_one_is_root():
    t = parse_bracketed(APPLE)
    assert truncate(t, 4) == t and truncate(t, 10) == t
    assert truncate(t, 1) == ParseTree("S")


def test_truncate_rejects_zero():
    with pytest.raises(ValueError):
        truncate(ParseTree("S"), 0)


@settings(max_examples=100, deadline=None)
@given(trees(), st.integers(1, 7), st.integers(1, 7))
def test_truncate_composes(t, a, b):
    assert truncate(truncate(t, a), b) == truncate(t, min(a, b))
    assert truncate(t, a).depth == min(a, t.depth)


# paths


def test_paths_apple():
    ps = enumerate_paths(linearize(parse_bracketed(APPLE)))
    assert ps.paths == ((0, 1, 2), (0, 3, 4), (0, 3, 5, 6), (0, 3, 5, 7))


def test_paths_single_and_chain():
    assert enumerate_paths(linearize(ParseTree("S"))).paths == ((0,),)
    assert enumerate_paths(linearize(chain(5))).paths == ((0, 1, 2, 3, 4),)


def test_paths_reject_invalid_levels():
    with pytest.raises(LevelSequenceError):
        enumerate_paths(LinearParse.from_strings("S NP", "1 3"))


def test_path_mask_apple():
    lp = linearize(parse_bracketed(APPLE))
    m = path_mask_matrix(enumerate_paths(lp), len(lp))
    assert m[0].tolist() == [True, True, True, False, False, False, False, False]
    assert m[:, 0].all()
    for leaf in (2, 4, 6, 7):
        assert m[:, leaf].sum() == 1


@settings(max_examples=150, deadline=None)
@given(trees())
def test_path_properties(t):
    lp = linearize(t)
    ps = enumerate_paths(lp)
    n = len(lp)
    m = path_mask_matrix(ps, n)
    leaves = [i for i, node in enumerate(t.preorder()) if not node.children]
    assert len(ps) == len(leaves)
    assert m.any(axis=0).all()
    assert sum(len(p) for p in ps.paths) >= n
    for p in ps.paths:
        assert p[0] == 0 and list(p) == sorted(p)
        assert [lp.levels[i] for i in p] == list(range(1, len(p) + 1))
        assert p[-1] in leaves
    # membership count equals number of descendant leaves
    nodes = list(t.preorder())
    for i, node in enumerate(nodes):
        n_leaves = sum(1 for d in node.preorder() if not d.children)
        assert m[:, i].sum() == n_leaves


def test_random_tree_respects_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t = random_tree(rng, max_depth=8, max_branch=4)
        assert t.depth <= 8
        assert all(len(n.children) <= 4 for n in t.preorder())
