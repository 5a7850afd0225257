"""Brute-force verifiers for tiny instances.

Nothing here is used by the production valuation paths.  Grid searches come
with a falsifiable tolerance derived from the step size and the size of the
marginal utilities over the search box, so comparisons against the analytic
results can fail for real.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .preferences import ConvolvedUtility, RiskAversionSchedule, Utility, aggregate_utilities, sup_convolution
from .tree import AdaptedProcess, ScenarioTree, condexp, conditional_process
from .valuation import dual_objective, optimal_allocation, primal_objective, utility_U

DEFAULT_BUDGET = 2_000_000_000


class BudgetError(RuntimeError):
    """The requested grid search would exceed its evaluation budget."""


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    step: float
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if not self.hi > self.lo:
            raise ValueError("grid range is empty")

    @property
    def size(self) -> int:
        return int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1

    def points(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.size)

    def require(self, cost: int) -> None:
        if cost > self.budget:
            raise BudgetError(f"grid search needs {cost} evaluations, budget is {self.budget}")


@dataclass
class GridResult:
    value: float
    argmax: Any
    tolerance: float
    evaluations: int


# -- sup-convolution ---------------------------------------------------------------------


def grid_sup_convolution(utilities: Sequence[Utility], x: float, grid: GridSpec | float = 1e-3) -> GridResult:
    """Maximise sum_i u_i(x_i) over x_1..x_{n-1} on the grid, x_n = x - sum of the others.

    The tolerance bounds how far the grid maximum can sit below the true
    supremum: each free coordinate is within ``step`` of the optimum, and the
    objective moves at most ``step * max u'`` per coordinate over that range.
    """
    us = list(utilities)
    n = len(us)
    if not 1 <= n <= 3:
        raise ValueError("grid sup-convolution supports one to three utilities")
    if n == 1:
        return GridResult(float(us[0].u(x)), (float(x),), 0.0, 1)
    if not isinstance(grid, GridSpec):
        span = abs(x) + 3.0
        grid = GridSpec(x / n - span, x / n + span, float(grid))
    pts = grid.points()
    grid.require(pts.size ** (n - 1))
    if n == 2:
        vals = us[0].u(pts) + us[1].u(x - pts)
        k = int(np.argmax(vals))
        split = (float(pts[k]), float(x - pts[k]))
        best = float(vals[k])
    else:
        u0 = np.asarray(us[0].u(pts))
        best, split = -np.inf, None
        for j, x1 in enumerate(pts):
            vals = u0[j] + us[1].u(pts) + us[2].u(x - x1 - pts)
            k = int(np.argmax(vals))
            if vals[k] > best:
                best, split = float(vals[k]), (float(x1), float(pts[k]), float(x - x1 - pts[k]))
    slopes = [float(u.du(xi - grid.step)) for u, xi in zip(us, split)]
    return GridResult(best, split, grid.step * sum(slopes), pts.size ** (n - 1))


# -- allocations -------------------------------------------------------------------------


def _slot_utility_on(u: Utility | Sequence[Utility], d: np.ndarray, step: float) -> np.ndarray:
    """Values of the slot utility on ``d``; agent lists are convolved on the grid."""
    if isinstance(u, Utility) and not isinstance(u, ConvolvedUtility):
        return np.asarray(u.u(d), dtype=float)
    members = list(u.members) if isinstance(u, ConvolvedUtility) else list(u)
    if len(members) == 1:
        return np.asarray(members[0].u(d), dtype=float)
    if len(members) != 2:
        raise ValueError("grid allocation search supports at most two agents per slot")
    a, b = members
    span = float(np.max(np.abs(d))) + 3.0
    pts = np.arange(-span, span + step / 2, step)
    ua = np.asarray(a.u(pts))
    out = np.empty_like(d)
    for k0 in range(0, d.size, 256):
        blk = d[k0:k0 + 256]
        out[k0:k0 + 256] = np.max(ua[None, :] + np.asarray(b.u(blk[:, None] - pts[None, :])), axis=1)
    return out


@dataclass
class GridAllocation:
    value: float
    allocation: AdaptedProcess
    tolerance: float
    evaluations: int
    grid: GridSpec
    diagnostics: dict[str, float] = field(default_factory=dict)


def grid_allocation_search(
    tree: ScenarioTree,
    z,
    utilities,
    grid: GridSpec | float = 1e-3,
    max_periods: int = 2,
    max_branch: int = 2,
) -> GridAllocation:
    """Exhaustive search for max sum_s E[u_s(X_s)] over allocations of Z from time 0.

    The state is the cumulative amount already allocated.  Interior slots pick
    the next cumulative amount on the grid and the terminal slot absorbs the
    rest, so every candidate sums to Z exactly.  Per-slot entries may be
    utilities or two-agent lists, which are convolved on the same grid.
    """
    z = np.asarray(z, dtype=float)
    T = tree.horizon
    if T > max_periods or any(int(c.max(initial=0)) > max_branch for c in (tree.children_counts(t) for t in range(T))):
        raise BudgetError(f"grid allocation search is limited to {max_periods} periods and {max_branch} branches")
    raw = utilities.utilities() if isinstance(utilities, RiskAversionSchedule) else list(utilities)
    if len(raw) != T + 1:
        raise ValueError(f"need {T + 1} slot utilities, got {len(raw)}")
    if not isinstance(grid, GridSpec):
        pad = 1.0
        grid = GridSpec(min(0.0, float(z.min())) - pad, max(0.0, float(z.max())) + pad, float(grid))
    pts = grid.points()
    G = pts.size
    n_inner = sum(tree.size(t) for t in range(T))
    grid.require(n_inner * G * G)
    step = grid.step
    # slot utilities evaluated on every grid difference a' - a
    diffs = step * np.arange(-(G - 1), G)
    slot_vals = [_slot_utility_on(raw[s], diffs, step) for s in range(T)]

    # W[s][node] is a length-G array indexed by incoming cumulative amount
    leaf_w = np.stack([np.asarray(_slot_utility_on(raw[T], zl - pts, step)) for zl in z])
    w = leaf_w
    choices: dict[int, np.ndarray] = {}
    for s in range(T - 1, -1, -1):
        pl = tree.parent_local(s + 1)
        probs = tree.probs_at(s + 1)
        cont = np.zeros((tree.size(s), G))
        np.add.at(cont, pl, probs[:, None] * w)
        new_w = np.empty((tree.size(s), G))
        arg = np.empty((tree.size(s), G), dtype=np.int64)
        for node in range(tree.size(s)):
            incoming = np.array([int(round(-grid.lo / step))]) if s == 0 else np.arange(G)
            for k0 in range(0, incoming.size, 512):
                a_idx = incoming[k0:k0 + 512]
                # u_s(pts[j] - pts[a]) lives at diffs index j - a + G - 1
                idx = np.arange(G)[None, :] - a_idx[:, None] + G - 1
                tot = slot_vals[s][idx] + cont[node][None, :]
                best = np.argmax(tot, axis=1)
                if s == 0:
                    new_w[node, :] = -np.inf
                    new_w[node, a_idx] = tot[np.arange(a_idx.size), best]
                    arg[node, :] = -1
                    arg[node, a_idx] = best
                else:
                    new_w[node, a_idx] = tot[np.arange(a_idx.size), best]
                    arg[node, a_idx] = best
        choices[s] = arg
        w = new_w
    zero = int(round(-grid.lo / step))
    if abs(pts[zero]) > 1e-9:
        raise ValueError("grid must contain 0 for the initial cumulative amount")
    value = float(w[0, zero])

    # walk the argmax back down the tree
    cum = np.array([zero])
    x_vals = []
    for s in range(T):
        nxt = choices[s][np.arange(tree.size(s)), cum]
        x_vals.append(pts[nxt] - pts[cum])
        cum = nxt[tree.parent_local(s + 1)]
    x_vals.append(z - pts[cum])
    alloc = AdaptedProcess(tree, 0, x_vals)

    us = aggregate_utilities(raw)
    slopes = 0.0
    for s in range(T + 1):
        slopes += tree.expectation(np.asarray(us[s].du(alloc.at(s) - 2 * step)), s)
    tol = step * slopes
    return GridAllocation(value, alloc, tol, n_inner * G * G, grid)


# -- duality -----------------------------------------------------------------------------


def duality_gap(tree: ScenarioTree, z, utilities, x: AdaptedProcess, m: AdaptedProcess, tol: float = 1e-9) -> float:
    """Dual minus primal objective at time 0 for a feasible pair (X, M).

    Weak duality makes this nonnegative; it vanishes exactly when X_s = I_s(M_s).
    """
    z = np.asarray(z, dtype=float)
    if x.start != 0 or m.start != 0:
        raise ValueError("duality gap is evaluated from time 0")
    miss = float(np.max(np.abs(x.path_sum() - z)))
    if miss > tol * max(1.0, float(np.max(np.abs(z)))):
        raise ValueError(f"allocation does not sum to the payoff (residual {miss:.3g})")
    dual = dual_objective(tree, m, z, utilities, 0, tol=tol)
    primal = primal_objective(tree, x, utilities, 0)
    return float(dual[0] - primal[0])


def random_allocation(tree: ScenarioTree, z, rng: np.random.Generator, scale: float = 1.0) -> AdaptedProcess:
    """Random adapted process whose terminal slot makes every path sum to Z."""
    z = np.asarray(z, dtype=float)
    T = tree.horizon
    vals = [scale * rng.standard_normal(tree.size(s)) for s in range(T)]
    running = np.zeros(tree.size(T))
    for s in range(T):
        running += tree.lift(vals[s], s, T)
    vals.append(z - running)
    return AdaptedProcess(tree, 0, vals)


def random_martingale(tree: ScenarioTree, rng: np.random.Generator, spread: float = 1.0) -> AdaptedProcess:
    """Positive martingale with M_0 = 1 from a random lognormal terminal density."""
    dens = np.exp(spread * rng.standard_normal(tree.size(tree.horizon)))
    dens /= tree.expectation(dens)
    return conditional_process(tree, dens)


# -- Pareto perturbation scan ------------------------------------------------------------


@dataclass
class ParetoScan:
    dominated: bool
    best_gain: float  # max over perturbations of the smallest agent gain
    witness: tuple | None
    perturbations: int


def agent_utility_values(tree: ScenarioTree, agents: Sequence[AdaptedProcess], agent_utilities, t: int = 0) -> np.ndarray:
    """Row i: sum_s E[u_{i,s}(X_{i,s}) | F_t] on the time-t slice."""
    T = tree.horizon
    out = np.zeros((len(agents), tree.size(t)))
    for i, x in enumerate(agents):
        for s in range(t, T + 1):
            out[i] += condexp(tree, np.asarray(agent_utilities[s][i].u(x.at(s))), t, s)
    return out


def pareto_scan(
    tree: ScenarioTree,
    agents: Sequence[AdaptedProcess],
    agent_utilities,
    sizes: Sequence[float] = (1e-3, -1e-3, 1e-2, -1e-2, 0.1, -0.1),
    tol: float = 1e-12,
) -> ParetoScan:
    """Shift y * 1_A from agent j's slot r to agent k's slot tau >= r for every node A.

    Such moves keep the allocation adapted and summing to Z.  The allocation
    is reported dominated if some move weakly raises every agent's expected
    utility and strictly raises one.
    """
    if isinstance(agent_utilities, RiskAversionSchedule):
        agent_utilities = agent_utilities.agent_utilities()
    T = tree.horizon
    n = len(agents)
    base = agent_utility_values(tree, agents, agent_utilities)[:, 0]
    best, witness, count = -np.inf, None, 0
    for r in range(T + 1):
        for a in range(tree.size(r)):
            for tau in range(r, T + 1):
                mask = (tree.ancestors(r, tau) == a).astype(float)
                for j in range(n):
                    for k in range(n):
                        if j == k and tau == r:
                            continue
                        for y in sizes:
                            vals = [list(x.values) for x in agents]
                            e_r = np.zeros(tree.size(r))
                            e_r[a] = 1.0
                            vals[j][r - agents[j].start] = vals[j][r - agents[j].start] - y * e_r
                            vals[k][tau - agents[k].start] = vals[k][tau - agents[k].start] + y * mask
                            moved = [AdaptedProcess(tree, agents[i].start, vals[i]) for i in range(n)]
                            gain = agent_utility_values(tree, moved, agent_utilities)[:, 0] - base
                            count += 1
                            g = float(gain.min())
                            if g > best:
                                best, witness = g, (r, tree.ids_at(r)[a], tau, j, k, y)
                            if np.all(gain >= -tol) and np.any(gain > tol):
                                return ParetoScan(True, g, (r, tree.ids_at(r)[a], tau, j, k, y), count)
    return ParetoScan(False, best, witness, count)


# -- combined check ----------------------------------------------------------------------


def oracle_check(
    tree: ScenarioTree,
    z,
    schedule: RiskAversionSchedule,
    step: float = 1e-3,
    rng: np.random.Generator | None = None,
    pairs: int = 100,
) -> dict[str, Any]:
    """Compare the closed forms with the brute-force oracles on one tiny instance."""
    rng = rng or np.random.default_rng(0)
    z = np.asarray(z, dtype=float)
    alloc = optimal_allocation(tree, z, schedule)
    analytic = float(utility_U(tree, z, schedule, 0)[0])
    out: dict[str, Any] = {}

    gap = duality_gap(tree, z, schedule, alloc.total, alloc.martingale)
    out["duality_gap"] = {"value": gap, "pass": abs(gap) < 1e-8}

    weak = min(
        duality_gap(tree, z, schedule, random_allocation(tree, z, rng), random_martingale(tree, rng))
        for _ in range(pairs)
    )
    out["weak_duality"] = {"min_gap": weak, "pairs": pairs, "pass": weak >= -1e-10}

    search = grid_allocation_search(tree, z, schedule.agent_utilities() if schedule.n_agents == 2 else schedule, step)
    diff = analytic - search.value
    out["allocation_search"] = {
        "analytic": analytic,
        "grid": search.value,
        "tolerance": search.tolerance,
        "pass": -1e-12 <= diff <= search.tolerance,
    }

    conv = []
    for s in range(tree.horizon + 1):
        members = schedule.agent_utilities()[s]
        if len(members) > 3:
            continue
        x = float(np.mean(z))
        exact = sup_convolution(members, x).value
        g = grid_sup_convolution(members, x, step)
        conv.append({"s": s, "x": x, "analytic": exact, "grid": g.value, "tolerance": g.tolerance,
                     "pass": -1e-12 <= exact - g.value <= g.tolerance})
    out["sup_convolution"] = conv
    out["pass"] = all(v["pass"] for k, v in out.items() if isinstance(v, dict)) and all(c["pass"] for c in conv)
    return out
