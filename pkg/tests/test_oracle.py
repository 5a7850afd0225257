from __future__ import annotations

import numpy as np
import pytest

from divprem.oracle import (
    BudgetError,
    GridSpec,
    duality_gap,
    grid_allocation_search,
    grid_sup_convolution,
    oracle_check,
    pareto_scan,
    random_allocation,
    random_martingale,
)
from divprem.preferences import ExponentialUtility, schedule_from_matrix, sup_convolution
from divprem.tree import AdaptedProcess, binomial_tree, random_tree, up_moves
from divprem.valuation import optimal_allocation, utility_U


def test_grid_spec():
    g = GridSpec(-1.0, 1.0, 0.5)
    np.testing.assert_allclose(g.points(), [-1, -0.5, 0, 0.5, 1])
    with pytest.raises(ValueError):
        GridSpec(0.0, 1.0, 0.0)
    with pytest.raises(BudgetError):
        GridSpec(0.0, 1.0, 0.1, budget=3).require(4)


def test_grid_convolution_symmetric_split():
    res = grid_sup_convolution([ExponentialUtility(2.0)] * 2, 1.0, 1e-3)
    np.testing.assert_allclose(res.argmax, [0.5, 0.5], atol=1e-3)


def test_grid_convolution_single_utility_is_identity():
    u = ExponentialUtility(1.7)
    res = grid_sup_convolution([u], 0.8)
    assert res.value == u.u(0.8)


def test_coarse_grid_is_strictly_worse():
    us = [ExponentialUtility(1.0), ExponentialUtility(3.0)]
    exact = sup_convolution(us, 0.3).value
    coarse = grid_sup_convolution(us, 0.3, GridSpec(-3.0, 3.0, 0.5))
    assert exact > coarse.value
    assert exact - coarse.value <= coarse.tolerance


def test_three_way_grid_convolution():
    us = [ExponentialUtility(1.0), ExponentialUtility(2.0), ExponentialUtility(4.0)]
    exact = sup_convolution(us, 1.0).value
    res = grid_sup_convolution(us, 1.0, GridSpec(-1.0, 2.0, 1e-2))
    assert 0.0 <= exact - res.value <= res.tolerance


def test_allocation_search_zero_payoff(coin):
    res = grid_allocation_search(coin, np.zeros(2), schedule_from_matrix(1.0, horizon=1), 1e-3)
    assert res.value == pytest.approx(0.0, abs=1e-15)
    for s in range(2):
        np.testing.assert_allclose(res.allocation.at(s), 0.0, atol=1e-12)


def test_allocation_search_two_point(coin):
    z = np.array([1.0, 0.0])
    sch = schedule_from_matrix(1.0, horizon=1)
    res = grid_allocation_search(coin, z, sch, 1e-3)
    analytic = utility_U(coin, z, sch)[0]
    assert abs(res.value - analytic) < 1e-3
    assert 0.0 <= analytic - res.value <= res.tolerance
    np.testing.assert_allclose(res.allocation.path_sum(), z, atol=1e-12)


def test_allocation_search_martingale_approximately():
    tree = binomial_tree(2, 0.4)
    z = up_moves(tree) - 0.5
    sch = schedule_from_matrix([[1.0, 2.0, 1.5]])
    res = grid_allocation_search(tree, z, sch, 1e-3)
    ref = optimal_allocation(tree, z, sch)
    for s in range(3):
        np.testing.assert_allclose(res.allocation.at(s), ref.total.at(s), atol=3e-3)


def test_allocation_search_budget():
    tree = binomial_tree(3)
    with pytest.raises(BudgetError):
        grid_allocation_search(tree, up_moves(tree), schedule_from_matrix(1.0, horizon=3))
    small = binomial_tree(1)
    with pytest.raises(BudgetError):
        grid_allocation_search(small, np.array([0.0, 1.0]), schedule_from_matrix(1.0, horizon=1), GridSpec(-1, 2, 1e-3, budget=10))


def test_duality_gap_examples():
    rng = np.random.default_rng(4)
    tree = random_tree(rng, 2, max_leaves=6)
    z = rng.uniform(-1, 1, tree.size(2))
    sch = schedule_from_matrix([[1.0, 0.5, 2.0], [2.0, 1.0, 1.0]])
    alloc = optimal_allocation(tree, z, sch)
    assert abs(duality_gap(tree, z, sch, alloc.total, alloc.martingale)) < 1e-8
    ones = AdaptedProcess.from_fn(tree, 0, lambda s: np.ones(tree.size(s)))
    assert duality_gap(tree, z, sch, alloc.total, ones) > 0
    zero = AdaptedProcess.from_fn(tree, 0, lambda s: np.zeros(tree.size(s)))
    assert duality_gap(tree, np.zeros(z.size), sch, zero, ones) == 0.0


def test_weak_duality_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tree = random_tree(rng, int(rng.integers(1, 4)), max_leaves=8)
        z = rng.uniform(-2, 2, tree.size(tree.horizon))
        sch = schedule_from_matrix(rng.uniform(0.3, 3, (2, tree.horizon + 1)))
        for _ in range(10):
            gap = duality_gap(tree, z, sch, random_allocation(tree, z, rng), random_martingale(tree, rng))
            assert gap >= -1e-10


def test_duality_gap_rejects_infeasible_allocation(coin):
    sch = schedule_from_matrix(1.0, horizon=1)
    x = AdaptedProcess(coin, 0, [np.array([0.0]), np.array([0.0, 0.0])])
    ones = AdaptedProcess(coin, 0, [np.array([1.0]), np.array([1.0, 1.0])])
    with pytest.raises(ValueError, match="sum"):
        duality_gap(coin, np.array([1.0, 0.0]), sch, x, ones)


def test_pareto_optimum_is_not_dominated():
    tree = binomial_tree(2, 0.4)
    z = up_moves(tree) - 0.5
    sch = schedule_from_matrix([[1.0, 2.0, 1.5], [2.0, 1.0, 3.0]])
    alloc = optimal_allocation(tree, z, sch)
    scan = pareto_scan(tree, alloc.agents, sch)
    assert not scan.dominated
    assert scan.best_gain < 0
    assert scan.perturbations > 0


def test_pareto_scan_detects_a_bad_allocation():
    tree = binomial_tree(2, 0.4)
    z = up_moves(tree) - 0.5
    sch = schedule_from_matrix([[1.0, 2.0, 1.5], [2.0, 1.0, 3.0]])
    alloc = optimal_allocation(tree, z, sch)
    # hand agent 0's whole time-0 share to agent 1 and compensate at the leaves
    shift = alloc.agents[0].at(0)[0] + 0.3
    a0 = [v.copy() for v in alloc.agents[0].values]
    a1 = [v.copy() for v in alloc.agents[1].values]
    a0[0] = a0[0] - shift
    a1[0] = a1[0] + shift
    a1[2] = a1[2] - shift
    a0[2] = a0[2] + shift
    agents = [AdaptedProcess(tree, 0, a0), AdaptedProcess(tree, 0, a1)]
    assert pareto_scan(tree, agents, sch).dominated


def test_oracle_check_report():
    tree = binomial_tree(2, 0.5)
    report = oracle_check(tree, up_moves(tree) - 1.0, schedule_from_matrix(1.0, horizon=2), pairs=20)
    assert report["pass"]
    assert report["weak_duality"]["pairs"] == 20
