"""Shared fixtures and the acceptance summary printed at the end of the run."""

from __future__ import annotations

import numpy as np
import pytest

from divprem.tree import build_tree, random_tree

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

ACCEPTANCE_TITLES = {
    1: "axiom suite on randomized trees",
    2: "closed-form consistency of H, V and U",
    3: "martingale and Pareto certificates",
    4: "strong and weak duality",
    5: "time consistency and one-period limit",
    6: "oracle equivalence on tiny instances",
    7: "insurance closed form against the expanded tree",
    8: "premium decay in the number of agents",
    9: "second-order expansion residual ratio",
    10: "time-refinement gap",
}


def record(criterion: int, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_TITLES):
        if k not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {k:2d}: NOT RUN  {ACCEPTANCE_TITLES[k]}")
            continue
        ok, detail = ACCEPTANCE[k]
        tail = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {ACCEPTANCE_TITLES[k]}{tail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def coin():
    """Two equally likely leaves, horizon 1."""
    return build_tree(
        {
            "horizon": 1,
            "nodes": [
                {"id": "r", "time": 0, "parent": None, "prob": 1.0},
                {"id": "a", "time": 1, "parent": "r", "prob": 0.5},
                {"id": "b", "time": 1, "parent": "r", "prob": 0.5},
            ],
        }
    )


def random_instances(seed: int, count: int, max_horizon: int = 4, max_leaves: int = 16):
    """Yield (tree, payoff) pairs with bounded payoffs."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        T = int(rng.integers(1, max_horizon + 1))
        tree = random_tree(rng, T, max_leaves=max_leaves)
        z = rng.uniform(-2.0, 2.0, tree.size(T))
        yield tree, z
