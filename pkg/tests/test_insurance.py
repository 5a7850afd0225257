from __future__ import annotations

import math

import numpy as np
import pytest

from divprem.insurance import (
    Contract,
    InsuranceError,
    InsurancePortfolio,
    expected_claims,
    h_recursion,
    hazard_to_tree,
    portfolio_from_dict,
    premium_closed_form,
    state_dict,
)
from divprem.preferences import schedule_from_matrix
from divprem.valuation import premium, premium_process


def _portfolio(contracts, alpha=1.0):
    T = contracts[0].horizon
    return InsurancePortfolio(tuple(contracts), schedule_from_matrix(alpha, horizon=T))


def _random_portfolio(rng, n, T):
    contracts = [
        Contract(f"c{i}", tuple(rng.uniform(0, 2, T)), tuple(rng.uniform(0, 0.4, T)))
        for i in range(n)
    ]
    return InsurancePortfolio(tuple(contracts), schedule_from_matrix(rng.uniform(0.3, 2.5, (2, T + 1))))


def test_single_period_value():
    pf = _portfolio([Contract("x", (1.0,), (0.1,))])
    table = h_recursion(pf)
    assert table.h[0, 0] == pytest.approx(0.1 * math.e + 0.9, abs=1e-15)
    assert table.h[0, 1] == 1.0
    h = premium_closed_form(pf)
    assert h == math.log(0.1 * math.exp(1.0) + 0.9) / 1.0
    assert h == pytest.approx(0.158565078740, abs=1e-12)


def test_zero_payments_give_unit_table():
    pf = _portfolio([Contract("x", (0.0, 0.0, 0.0), (0.2, 0.3, 0.1))])
    assert np.all(h_recursion(pf).h == 1.0)


def test_zero_first_hazard_passes_through():
    pf = _portfolio([Contract("x", (5.0, 1.0, 2.0), (0.0, 0.3, 0.1))])
    h = h_recursion(pf).h
    assert h[0, 0] == pytest.approx(h[0, 1], rel=1e-15)


def test_table_bounded_below_by_one():
    pf = _random_portfolio(np.random.default_rng(1), 3, 4)
    assert np.all(h_recursion(pf).h >= 1.0)


def test_terminal_premium_is_realised_claim():
    pf = _portfolio([Contract("x", (1.0, 2.0), (0.3, 0.4)), Contract("y", (0.5, 4.0), (0.1, 0.2))])
    assert premium_closed_form(pf, 2, {"x": 2, "y": None}) == 2.0
    assert premium_closed_form(pf, 2, {"x": 1, "y": 2}) == 5.0
    assert premium_closed_form(pf, 2, {}) == 0.0


def test_time_zero_is_sum_of_logs():
    pf = _random_portfolio(np.random.default_rng(2), 3, 3)
    assert premium_closed_form(pf) == pytest.approx(h_recursion(pf).log_h[:, 0].sum(), abs=0)


def test_additive_over_contracts():
    rng = np.random.default_rng(3)
    pf = _random_portfolio(rng, 2, 3)
    singles = [InsurancePortfolio((c,), pf.schedule) for c in pf.contracts]
    ex = hazard_to_tree(pf)
    joint = premium(ex.tree, ex.z, pf.schedule)
    split = 0.0
    for single in singles:
        e = hazard_to_tree(single)
        split += premium(e.tree, e.z, single.schedule)
    assert joint == pytest.approx(split, abs=1e-12)
    assert premium_closed_form(pf) == pytest.approx(split, abs=1e-12)


def test_inconsistent_state_rejected():
    pf = _portfolio([Contract("x", (1.0, 2.0), (0.3, 0.4))])
    with pytest.raises(InsuranceError):
        premium_closed_form(pf, 1, {"x": 2})
    with pytest.raises(InsuranceError):
        premium_closed_form(pf, 1, {"nobody": None})


def test_tree_shapes():
    one = hazard_to_tree(_portfolio([Contract("x", (1.0,), (0.1,))]))
    assert one.tree.size(1) == 2
    assert sorted(one.tree.probs_at(1)) == pytest.approx([0.1, 0.9])
    two = hazard_to_tree(_portfolio([Contract("x", (1.0,), (0.1,)), Contract("y", (1.0,), (0.3,))]))
    assert sorted(two.tree.probs_at(1)) == pytest.approx(sorted([0.03, 0.07, 0.27, 0.63]))
    chain = hazard_to_tree(_portfolio([Contract("x", (1.0, 1.0), (0.2, 0.5))]))
    assert sorted(chain.tree.path_probs_at(2)) == pytest.approx(sorted([0.2, 0.8 * 0.5, 0.8 * 0.5]))
    assert chain.tree.size(2) == 3


def test_expansion_budget():
    pf = _portfolio([Contract(f"c{i}", (1.0,), (0.1,)) for i in range(5)])
    with pytest.raises(InsuranceError, match="budget"):
        hazard_to_tree(pf)


@pytest.mark.parametrize("seed", range(6))
def test_cross_validation_nodewise(seed):
    rng = np.random.default_rng(100 + seed)
    pf = _random_portfolio(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    ex = hazard_to_tree(pf)
    h = premium_process(ex.tree, ex.z, pf.schedule)
    table = h_recursion(pf)
    for t in range(pf.horizon + 1):
        closed = [premium_closed_form(pf, t, state_dict(pf, ex.states[nid]), table) for nid in ex.tree.ids_at(t)]
        np.testing.assert_allclose(h.at(t), closed, atol=1e-10)


def test_risk_loading():
    pf = _random_portfolio(np.random.default_rng(4), 3, 4)
    ex = hazard_to_tree(pf)
    assert expected_claims(pf) == pytest.approx(ex.tree.expectation(ex.z), abs=1e-13)
    assert premium_closed_form(pf) >= expected_claims(pf)


def test_monotone_in_hazard():
    base = Contract("x", (1.0, 3.0, 2.0), (0.1, 0.2, 0.3))
    prev = premium_closed_form(_portfolio([base]))
    for q in (0.25, 0.4, 0.6, 0.9):
        bumped = Contract("x", base.payments, (0.1, q, 0.3))
        now = premium_closed_form(_portfolio([bumped]))
        assert now >= prev - 1e-15
        prev = now


def test_large_payments_do_not_overflow():
    pf = _portfolio([Contract("x", (2000.0, 1.0), (0.01, 0.2))], alpha=1.0)
    h = premium_closed_form(pf)
    assert math.isfinite(h)
    ex = hazard_to_tree(pf)
    assert premium(ex.tree, ex.z, pf.schedule) == pytest.approx(h, rel=1e-12)


def test_contract_validation():
    with pytest.raises(InsuranceError):
        Contract("x", (1.0,), (1.0,))
    with pytest.raises(InsuranceError):
        Contract("x", (-1.0,), (0.1,))
    with pytest.raises(InsuranceError):
        Contract("x", (1.0, 2.0), (0.1,))
    with pytest.raises(InsuranceError):
        _portfolio([Contract("x", (1.0,), (0.1,)), Contract("y", (1.0, 1.0), (0.1, 0.1))])


def test_portfolio_from_dict():
    pf = portfolio_from_dict({"T": 1, "contracts": [{"id": "a", "payments": [1], "hazard": [0.1]}]})
    assert pf.schedule.beta.tolist() == [0.5, 1.0]
    assert portfolio_from_dict(pf.to_dict()).contracts == pf.contracts
    with pytest.raises(InsuranceError, match="contracts"):
        portfolio_from_dict({"T": 1})
