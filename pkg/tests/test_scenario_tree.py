import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmp.scenario_tree import (
    TREE_CSV_HEADER,
    LevelMismatchError,
    Policy,
    TreeSizeError,
    VolatilityGrid,
    build_tree,
    conditional_g_expectation,
    enumerate_policies,
    enumerate_support_policies,
    expectation_under_policy,
    g_expectation,
    policy_from_code,
    reach_probabilities,
    tv_distance,
)
from oracles import all_policy_values, path_expectation

G12 = VolatilityGrid((1.0, 2.0))


def test_node_counts_and_spot_path():
    tree = build_tree(3, 1.0, G12)
    assert [tree.node_count(k) for k in range(4)] == [1, 4, 16, 64]
    assert len(tree.B[3]) == 64
    # (sigma=2, +), (sigma=1, -), (sigma=2, +)
    node = 0
    for j, s in ((1, 0), (0, 1), (1, 0)):
        node = node * tree.branching + 2 * j + s
    assert tree.B[3][node] == pytest.approx((2 - 1 + 2) * math.sqrt(1 / 3), abs=1e-15)
    assert tree.QV[3][node] == pytest.approx((4 + 1 + 4) / 3, abs=1e-15)
    assert tree.path_of(3, node) == [(1, 1), (0, -1), (1, 1)]


def test_children_sum_consistently():
    tree = build_tree(2, 2.0, VolatilityGrid((0.5, 0.8, 1.1)))
    for k in range(tree.depth):
        kids = tree.split(tree.B[k + 1])
        np.testing.assert_allclose(kids.mean(axis=2), np.repeat(tree.B[k][:, None], tree.m, 1), atol=1e-15)


def test_budget_names_size():
    with pytest.raises(TreeSizeError, match=r"N=5, \|grid\|=3"):
        build_tree(5, 1.0, VolatilityGrid((1, 2, 3)), budget=1000)


def test_budget_from_environment(monkeypatch):
    monkeypatch.setenv("GSMP_NODE_BUDGET", "10")
    with pytest.raises(TreeSizeError):
        build_tree(2, 1.0, G12)


@pytest.mark.parametrize("vals", [(), (0.0, 1.0), (2.0, 1.0), (1.0, float("nan"))])
def test_grid_validation(vals):
    with pytest.raises(ValueError):
        VolatilityGrid(vals)


def test_variance_bounds_one_step():
    for lo, hi in ((0.5, 1.0), (1.0, 2.0)):
        tree = build_tree(1, 1.0, VolatilityGrid((lo, hi)))
        bt = tree.B[1]
        assert g_expectation(tree, bt**2) == pytest.approx(hi**2, abs=1e-14)
        assert g_expectation(tree, -(bt**2)) == pytest.approx(-(lo**2), abs=1e-14)
        P = Policy.constant(tree, 1)
        assert expectation_under_policy(tree, P, bt**2) == pytest.approx(hi**2, abs=1e-14)


def test_level_mismatch():
    tree = build_tree(2, 1.0, G12)
    with pytest.raises(LevelMismatchError):
        g_expectation(tree, np.zeros(5))
    with pytest.raises(LevelMismatchError):
        conditional_g_expectation(tree, np.zeros(16), 3)


def test_conditional_is_tower():
    tree = build_tree(3, 1.0, G12)
    xi = np.random.default_rng(1).normal(size=64)
    mid = conditional_g_expectation(tree, xi, 1)
    assert g_expectation(tree, mid) == pytest.approx(g_expectation(tree, xi), abs=1e-14)
    np.testing.assert_array_equal(conditional_g_expectation(tree, xi, 3), xi)


def test_g_expectation_equals_enumeration_depth3():
    tree = build_tree(3, 1.0, G12)
    rng = np.random.default_rng(7)
    xis = [rng.normal(size=64) for _ in range(3)]
    brute = all_policy_values(tree, xis).max(axis=0)
    for xi, b in zip(xis, brute):
        assert abs(g_expectation(tree, xi) - b) <= 1e-12


def test_policy_expectation_matches_paths():
    tree = build_tree(3, 1.0, G12)
    rng = np.random.default_rng(3)
    for _ in range(5):
        P = Policy(tuple(rng.integers(0, 2, tree.node_count(k)) for k in range(3)))
        xi = rng.normal(size=64)
        assert expectation_under_policy(tree, P, xi) == pytest.approx(path_expectation(tree, P, xi), abs=1e-14)


def test_reach_probabilities_sum_to_one():
    tree = build_tree(3, 1.0, VolatilityGrid((0.5, 1.0, 1.5)))
    P = Policy(tuple(np.random.default_rng(0).integers(0, 3, tree.node_count(k)) for k in range(3)))
    w = reach_probabilities(tree, P)
    assert [float(a.sum()) for a in w] == [1.0] * 4
    assert all(np.count_nonzero(a) == 2**k for k, a in enumerate(w))


def test_enumeration_counts_and_budget():
    tree = build_tree(2, 1.0, G12)
    assert sum(1 for _ in enumerate_policies(tree)) == 2**5
    support = list(enumerate_support_policies(tree))
    assert len(support) == 2**3
    laws = {tuple(reach_probabilities(tree, P)[-1]) for P in support}
    assert len(laws) == len(support)
    with pytest.raises(TreeSizeError):
        next(enumerate_policies(tree, budget=4))


def test_policy_code_roundtrip():
    tree = build_tree(2, 1.0, G12)
    seen = {tuple(np.concatenate(policy_from_code(tree, c, 2).choice)) for c in range(32)}
    assert len(seen) == 32


def test_tv_distance():
    tree = build_tree(2, 1.0, G12)
    lo, hi = Policy.constant(tree, 0), Policy.constant(tree, 1)
    assert tv_distance(tree, lo, lo) == 0.0
    assert tv_distance(tree, lo, hi) == 1.0
    mixed = Policy((np.array([0]), np.array([0, 1, 1, 1])))
    assert tv_distance(tree, lo, mixed) == pytest.approx(0.5)


def test_policy_shape_checked():
    tree = build_tree(2, 1.0, G12)
    with pytest.raises(LevelMismatchError):
        reach_probabilities(tree, Policy((np.array([0]), np.array([0, 0]))))


def test_tree_csv(tmp_path):
    tree = build_tree(2, 1.0, G12)
    path = tmp_path / "tree.csv"
    tree.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TREE_CSV_HEADER)
    assert len(lines) == 1 + 1 + 4 + 16


fields = st.lists(st.floats(-10, 10), min_size=16, max_size=16).map(np.array)


@settings(max_examples=60, deadline=None)
@given(fields, fields, st.floats(0, 5), st.floats(-5, 5))
def test_sublinear_axioms(x, y, lam, c):
    tree = build_tree(2, 1.0, G12)
    E = lambda f: g_expectation(tree, f)  # noqa: E731
    tol = 1e-9 * (1 + np.abs(x).sum() + np.abs(y).sum())
    assert E(x + y) <= E(x) + E(y) + tol
    assert E(lam * x) == pytest.approx(lam * E(x), abs=tol)
    assert E(x + c) == pytest.approx(E(x) + c, abs=tol)
    assert E(np.full(16, c)) == pytest.approx(c, abs=1e-12)
    assert E(np.maximum(x, y)) >= max(E(x), E(y)) - tol
    assert -E(-x) <= E(x) + tol
