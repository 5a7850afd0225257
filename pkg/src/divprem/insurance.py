"""Fixed-payment insurance portfolios with independent event times.

Contract ``i`` pays ``c[i, t]`` (already discounted) if its event time falls
in ``(t-1, t]``.  Under an exponential schedule the premium factorises over
contracts and is assembled from per-contract backward multipliers ``h``.
The portfolio can also be expanded into an explicit scenario tree so the
closed form can be checked against the generic recursion.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .preferences import RiskAversionSchedule, schedule_from_config
from .tree import Node, ScenarioTree, build_tree

# exponents below this are evaluated without shifting
_DIRECT_EXP_LIMIT = 700.0


class InsuranceError(ValueError):
    """Invalid contract data, inconsistent survival state or an oversized expansion."""


@dataclass(frozen=True)
class Contract:
    """Payments ``payments[t-1] = c_t`` for t = 1..T and hazards ``hazard[t] = q_t`` for t = 0..T-1."""

    id: str
    payments: tuple[float, ...]
    hazard: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in self.payments)
        q = tuple(float(v) for v in self.hazard)
        object.__setattr__(self, "payments", c)
        object.__setattr__(self, "hazard", q)
        if len(c) != len(q) or not c:
            raise InsuranceError(f"contract {self.id}: {len(c)} payments but {len(q)} hazards")
        if any(not math.isfinite(v) or v < 0 for v in c):
            raise InsuranceError(f"contract {self.id}: payments must be finite and nonnegative")
        if any(not (0.0 <= v < 1.0) for v in q):
            raise InsuranceError(f"contract {self.id}: hazards must lie in [0, 1)")

    @property
    def horizon(self) -> int:
        return len(self.payments)

    def death_probs(self) -> np.ndarray:
        """P(tau = t) for t = 1..T."""
        q = np.asarray(self.hazard)
        alive = np.concatenate([[1.0], np.cumprod(1.0 - q)[:-1]])
        return alive * q


@dataclass(frozen=True)
class InsurancePortfolio:
    contracts: tuple[Contract, ...]
    schedule: RiskAversionSchedule

    def __post_init__(self):
        object.__setattr__(self, "contracts", tuple(self.contracts))
        if not self.contracts:
            raise InsuranceError("portfolio has no contracts")
        horizons = {c.horizon for c in self.contracts}
        if len(horizons) != 1:
            raise InsuranceError(f"contracts disagree on the horizon: {sorted(horizons)}")
        if self.schedule.horizon != self.horizon:
            raise InsuranceError(f"schedule horizon {self.schedule.horizon} differs from contract horizon {self.horizon}")
        ids = [c.id for c in self.contracts]
        if len(set(ids)) != len(ids):
            raise InsuranceError("duplicate contract ids")

    @property
    def horizon(self) -> int:
        return self.contracts[0].horizon

    def to_dict(self) -> dict[str, Any]:
        return {
            "T": self.horizon,
            "schedule": self.schedule.to_dict(),
            "contracts": [{"id": c.id, "payments": list(c.payments), "hazard": list(c.hazard)} for c in self.contracts],
        }


def portfolio_from_dict(cfg: Mapping[str, Any]) -> InsurancePortfolio:
    try:
        T = int(cfg["T"])
        contracts = tuple(Contract(str(c["id"]), tuple(c["payments"]), tuple(c["hazard"])) for c in cfg["contracts"])
    except KeyError as exc:
        raise InsuranceError(f"portfolio is missing field {exc.args[0]!r}") from None
    schedule = schedule_from_config(cfg.get("schedule", {"alpha": 1.0}), T)
    return InsurancePortfolio(contracts, schedule)


def load_portfolio(path: str | Path) -> InsurancePortfolio:
    return portfolio_from_dict(json.loads(Path(path).read_text()))


# -- closed form -----------------------------------------------------------------------


@dataclass(frozen=True)
class HTable:
    """``log_h[i, t-1] = log h_{i,t}`` for t = 1..T+1; the last column is zero."""

    ids: tuple[str, ...]
    log_h: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return np.exp(self.log_h)

    def to_dict(self) -> dict[str, list[float]]:
        return {cid: [float(v) for v in np.exp(row)] for cid, row in zip(self.ids, self.log_h)}


def _log_step(q: float, p: float, b: float, c: float, y_next: float) -> float:
    """(1/b) log(q e^{b c} + p e^{b y_next})."""
    e1, e2 = b * c, b * y_next
    if max(e1, e2) < _DIRECT_EXP_LIMIT:
        return math.log(q * math.exp(e1) + p * math.exp(e2)) / b
    m = max(e1, e2)
    return (m + math.log(q * math.exp(e1 - m) + p * math.exp(e2 - m))) / b


def h_recursion(portfolio: InsurancePortfolio) -> HTable:
    """Backward multipliers from h_{i,T+1} = 1, kept in log form.

    log h_{i,t} = (1/beta_t) log(q_{i,t-1} e^{beta_t c_{i,t}} + p_{i,t-1} h_{i,t+1}^{beta_t}).
    """
    T = portfolio.horizon
    beta = portfolio.schedule.beta
    out = np.zeros((len(portfolio.contracts), T + 1))
    for i, c in enumerate(portfolio.contracts):
        for t in range(T, 0, -1):
            q = c.hazard[t - 1]
            out[i, t - 1] = _log_step(q, 1.0 - q, float(beta[t]), c.payments[t - 1], out[i, t])
    out.setflags(write=False)
    return HTable(tuple(c.id for c in portfolio.contracts), out)


def premium_closed_form(
    portfolio: InsurancePortfolio,
    t: int = 0,
    state: Mapping[str, int | None] | None = None,
    table: HTable | None = None,
) -> float:
    """Premium at time ``t`` given each contract's event time (``None`` while alive).

    Contracts missing from ``state`` are treated as alive.
    """
    T = portfolio.horizon
    if not 0 <= t <= T:
        raise InsuranceError(f"time {t} outside [0, {T}]")
    state = dict(state or {})
    unknown = set(state) - {c.id for c in portfolio.contracts}
    if unknown:
        raise InsuranceError(f"state names unknown contracts {sorted(unknown)}")
    table = table or h_recursion(portfolio)
    total = 0.0
    for i, c in enumerate(portfolio.contracts):
        died = state.get(c.id)
        if died is None:
            total += float(table.log_h[i, t])
        elif not 1 <= died <= t:
            raise InsuranceError(f"contract {c.id}: event time {died} is not in [1, {t}]")
        else:
            total += c.payments[died - 1]
    return total


def expected_claims(portfolio: InsurancePortfolio) -> float:
    return float(sum(np.dot(c.payments, c.death_probs()) for c in portfolio.contracts))


# -- explicit tree ---------------------------------------------------------------------


@dataclass
class ExpandedPortfolio:
    tree: ScenarioTree
    z: np.ndarray
    # node id -> per-contract event time, None while alive
    states: dict[str, tuple[int | None, ...]] = field(default_factory=dict)


def _node_id(t: int, state: Sequence[int | None]) -> str:
    return f"t{t}:" + ",".join("a" if s is None else f"d{s}" for s in state)


def hazard_to_tree(portfolio: InsurancePortfolio, n_max: int = 4, max_horizon: int = 6, max_nodes: int = 200_000) -> ExpandedPortfolio:
    """Product tree of the contracts' alive/dead histories.

    Branches with zero probability (hazard 0, or a product that underflows)
    are omitted; contracts whose event has happened stay in that state.
    """
    n, T = len(portfolio.contracts), portfolio.horizon
    if n > n_max or T > max_horizon:
        raise InsuranceError(f"expansion budget exceeded: n={n} (max {n_max}), T={T} (max {max_horizon})")
    root_state: tuple[int | None, ...] = (None,) * n
    nodes = [Node(_node_id(0, root_state), 0, None, 1.0)]
    states = {nodes[0].id: root_state}
    frontier = [root_state]
    for t in range(1, T + 1):
        nxt = []
        for state in frontier:
            options = []
            for c, s in zip(portfolio.contracts, state):
                q = c.hazard[t - 1]
                if s is not None:
                    options.append(((s, 1.0),))
                elif q == 0.0:
                    options.append(((None, 1.0),))
                else:
                    options.append(((t, q), (None, 1.0 - q)))
            for combo in itertools.product(*options):
                child = tuple(s for s, _ in combo)
                prob = math.prod(p for _, p in combo)
                if prob == 0.0:
                    # underflowed product of tiny hazards: no mass to carry
                    continue
                cid = _node_id(t, child)
                nodes.append(Node(cid, t, _node_id(t - 1, state), prob))
                states[cid] = child
                nxt.append(child)
        frontier = nxt
        if len(nodes) > max_nodes:
            raise InsuranceError(f"expansion budget exceeded: more than {max_nodes} nodes")
    tree = build_tree(nodes, T)
    z = np.array([
        sum(c.payments[s - 1] for c, s in zip(portfolio.contracts, states[leaf]) if s is not None)
        for leaf in tree.leaves
    ])
    return ExpandedPortfolio(tree, z, states)


def state_dict(portfolio: InsurancePortfolio, state: Sequence[int | None]) -> dict[str, int | None]:
    return {c.id: s for c, s in zip(portfolio.contracts, state)}
