"""Dynamic utility, indifference premium, optimal allocations and dual certificates.

Exponential schedules get the closed-form backward recursions.  General
per-time utilities go through :func:`general_allocation_solve`, which finds the
dual martingale by a damped Newton method on the log of its terminal values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.sparse.linalg import LinearOperator, cg

from .preferences import RiskAversionSchedule, Utility, aggregate_utilities
from .roots import invert_scalar
from .tree import AdaptedProcess, ScenarioTree, condexp, conditional_process, is_martingale

logger = logging.getLogger(__name__)

MARTINGALE_TOL = 1e-9
ALLOCATION_TOL = 1e-9


class ConvergenceError(RuntimeError):
    """The dual Newton iteration ran out of budget; ``best`` holds the smallest residual seen."""

    def __init__(self, message: str, best: float):
        super().__init__(message)
        self.best = best


def _payoff(tree: ScenarioTree, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (tree.size(tree.horizon),):
        raise ValueError(f"payoff needs {tree.size(tree.horizon)} leaf values, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("payoff must be finite")
    return z


def _beta(tree: ScenarioTree, schedule: RiskAversionSchedule) -> np.ndarray:
    if schedule.horizon != tree.horizon:
        raise ValueError(f"schedule horizon {schedule.horizon} differs from tree horizon {tree.horizon}")
    return schedule.beta


def entropic_step(tree: ScenarioTree, x: np.ndarray, r: int, beta: float, sign: float = 1.0) -> np.ndarray:
    """sign/beta * log E[exp(sign * beta * X) | F_{r-1}] for X on slice ``r``.

    Shifted by the per-parent extreme value; children with identical values
    return that value exactly.
    """
    pl = tree.parent_local(r)
    y = sign * np.asarray(x, dtype=float)
    m = np.full(tree.size(r - 1), -np.inf)
    np.maximum.at(m, pl, y)
    w = tree.probs_at(r) * np.exp(beta * (y - m[pl]))
    s = np.bincount(pl, weights=w, minlength=tree.size(r - 1))
    return sign * (m + np.log(s / tree.weight_sums(r)) / beta)


def _entropic_process(tree: ScenarioTree, z: np.ndarray, beta: np.ndarray, sign: float) -> AdaptedProcess:
    vals = [z]
    for r in range(tree.horizon, 0, -1):
        vals.append(entropic_step(tree, vals[-1], r, float(beta[r]), sign))
    return AdaptedProcess(tree, 0, vals[::-1])


def value_process(tree: ScenarioTree, z, schedule: RiskAversionSchedule) -> AdaptedProcess:
    """V_T = Z, V_t = -1/beta_{t+1} log E[exp(-beta_{t+1} V_{t+1}) | F_t]."""
    return _entropic_process(tree, _payoff(tree, z), _beta(tree, schedule), -1.0)


def premium_process(tree: ScenarioTree, z, schedule: RiskAversionSchedule) -> AdaptedProcess:
    """Indifference premium H_t(Z) for t = 0..T under an exponential schedule."""
    return _entropic_process(tree, _payoff(tree, z), _beta(tree, schedule), 1.0)


def premium_from_beta(tree: ScenarioTree, z, beta: Sequence[float]) -> AdaptedProcess:
    """Premium recursion driven by an explicit ``beta`` vector (length T + 1)."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (tree.horizon + 1,):
        raise ValueError("beta needs one entry per time 0..T")
    return _entropic_process(tree, _payoff(tree, z), beta, 1.0)


def premium(tree: ScenarioTree, z, schedule: RiskAversionSchedule) -> float:
    return float(premium_process(tree, z, schedule).at(0)[0])


def utility_U(tree: ScenarioTree, z, schedule: RiskAversionSchedule, t: int = 0) -> np.ndarray:
    """U_t(Z) = (1 - exp(-beta_t V_t(Z))) / beta_t on the time-t slice."""
    v = value_process(tree, z, schedule).at(t)
    b = schedule.beta[t]
    return -np.expm1(-b * v) / b


@dataclass
class Allocation:
    total: AdaptedProcess  # aggregate allocation per time slot
    martingale: AdaptedProcess  # u_s'(X_s), the dual certificate
    agents: list[AdaptedProcess]  # per-agent split I_{i,s}(M_s)


def optimal_allocation(tree: ScenarioTree, z, schedule: RiskAversionSchedule, t: int = 0) -> Allocation:
    """Closed-form maximiser of the dynamic sup-convolution from time ``t``.

    X_s = L_s / alpha_s with L_t = beta_t V_t and
    L_s = L_{s-1} + beta_s (V_s - V_{s-1}); the certificate is M_s = exp(-L_s).
    """
    v = value_process(tree, z, schedule)
    beta, agg = schedule.beta, schedule.aggregate
    logs = [beta[t] * v.at(t)]
    for s in range(t + 1, tree.horizon + 1):
        pl = tree.parent_local(s)
        logs.append(logs[-1][pl] + beta[s] * (v.at(s) - v.at(s - 1)[pl]))
    total = AdaptedProcess(tree, t, [lg / agg[s] for s, lg in zip(range(t, tree.horizon + 1), logs)])
    mart = AdaptedProcess(tree, t, [np.exp(-lg) for lg in logs])
    agents = [
        AdaptedProcess(tree, t, [lg / schedule.alpha[i, s] for s, lg in zip(range(t, tree.horizon + 1), logs)])
        for i in range(schedule.n_agents)
    ]
    return Allocation(total, mart, agents)


def residual_allocation(tree: ScenarioTree, z, schedule: RiskAversionSchedule, t: int = 0) -> AdaptedProcess:
    """Pareto-optimal allocation of H_t(Z) - Z, zero in slot ``t``."""
    h = premium_process(tree, z, schedule)
    beta, agg = schedule.beta, schedule.aggregate
    cum = [np.zeros(tree.size(t))]
    for s in range(t + 1, tree.horizon + 1):
        pl = tree.parent_local(s)
        cum.append(cum[-1][pl] + beta[s] * (h.at(s) - h.at(s - 1)[pl]))
    return AdaptedProcess(tree, t, [-c / agg[s] for s, c in zip(range(t, tree.horizon + 1), cum)])


def check_time_consistency(
    tree: ScenarioTree,
    z,
    schedule: RiskAversionSchedule,
    t: int,
    tau: int,
    inner_beta: Sequence[float] | None = None,
) -> float:
    """max |H_t(Z) - H_t(H_{t+tau}(Z))| over time-t nodes.

    ``inner_beta`` replaces the risk aversions used for the inner premium
    H_{t+tau}; perturbing it is the negative control.
    """
    if t < 0 or tau < 0 or t + tau > tree.horizon:
        raise ValueError(f"need 0 <= t and t + tau <= T, got t={t}, tau={tau}")
    if tau == 0:
        return 0.0
    z = _payoff(tree, z)
    outer = premium_process(tree, z, schedule)
    inner = outer if inner_beta is None else premium_from_beta(tree, z, inner_beta)
    nested = premium_process(tree, tree.lift(inner.at(t + tau), t + tau), schedule)
    return float(np.max(np.abs(outer.at(t) - nested.at(t))))


# -- duality ---------------------------------------------------------------------------


def primal_objective(tree: ScenarioTree, x: AdaptedProcess, utilities, t: int = 0) -> np.ndarray:
    """sum_s E[u_s(X_s) | F_t] on the time-t slice."""
    us = aggregate_utilities(utilities)
    out = np.zeros(tree.size(t))
    for s in range(t, tree.horizon + 1):
        out += condexp(tree, np.asarray(us[s].u(x.at(s))), t, s)
    return out


def dual_objective(tree: ScenarioTree, m: AdaptedProcess, z, utilities, t: int = 0, tol: float = MARTINGALE_TOL) -> np.ndarray:
    """sum_s E[u_s*(M_s) | F_t] + E[M_T Z | F_t] for a positive martingale M.

    ``utilities`` is a schedule or one utility (or list of agents) per slot.
    """
    z = _payoff(tree, z)
    us = aggregate_utilities(utilities)
    if m.start > t:
        raise ValueError(f"martingale starts at {m.start}, after t={t}")
    if any(np.any(~(m.at(s) > 0)) for s in range(t, tree.horizon + 1)):
        raise ValueError("dual variable must be strictly positive")
    scale = max(1.0, max(float(np.max(m.at(s))) for s in range(t, tree.horizon + 1)))
    residual = 0.0
    for s in range(t, tree.horizon):
        residual = max(residual, float(np.max(np.abs(m.at(s) - tree.step_back(m.at(s + 1), s + 1)))))
    if residual > tol * scale:
        raise ValueError(f"dual variable is not a martingale (residual {residual:.3g})")
    out = condexp(tree, m.at(tree.horizon) * z, t)
    for s in range(t, tree.horizon + 1):
        out = out + condexp(tree, np.asarray(us[s].conjugate(m.at(s))), t, s)
    return out


# -- general utilities -----------------------------------------------------------------


@dataclass
class GeneralSolution:
    allocation: AdaptedProcess
    martingale: AdaptedProcess
    log_terminal: np.ndarray
    iterations: int
    diagnostics: dict[str, float] = field(default_factory=dict)


class _LeafSystem:
    """Leaf-indexed view of the optimality system sum_s I_s(E[M_T | F_s]) = Z."""

    def __init__(self, tree: ScenarioTree, z: np.ndarray, us: list[Utility], t: int):
        T = tree.horizon
        self.tree, self.z, self.us, self.t = tree, z, us, t
        self.times = range(t, T + 1)
        self.pi = tree.path_probs_at(T)
        self.anc = {s: tree.ancestors(s, T) for s in self.times}
        self.pi_s = {s: np.bincount(self.anc[s], weights=self.pi, minlength=tree.size(s)) for s in self.times}

    def cond(self, v: np.ndarray, s: int) -> np.ndarray:
        return np.bincount(self.anc[s], weights=self.pi * v, minlength=self.tree.size(s)) / self.pi_s[s]

    def slices(self, mt: np.ndarray) -> dict[int, np.ndarray]:
        return {s: self.cond(mt, s) for s in self.times}

    def residual(self, ms: dict[int, np.ndarray]) -> np.ndarray:
        total = np.zeros_like(self.z)
        for s in self.times:
            total += np.asarray(self.us[s].inv_marginal(ms[s]))[self.anc[s]]
        return total - self.z

    def merit(self, ms: dict[int, np.ndarray]) -> tuple[float, float]:
        """Unconditional dual objective and the magnitude of its terms.

        The gradient of the objective in M_T is -pi * residual; the magnitude
        sets the rounding floor for comparisons.
        """
        terms = [self.pi * ms[self.tree.horizon] * self.z]
        for s in self.times:
            terms.append(self.pi_s[s] * np.asarray(self.us[s].conjugate(ms[s])))
        return float(sum(t.sum() for t in terms)), float(sum(np.abs(t).sum() for t in terms))

    def curvature(self, ms: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        return {s: -np.asarray(self.us[s].inv_marginal_deriv(ms[s])) for s in self.times}

    def newton_direction(self, ms, f: np.ndarray) -> np.ndarray:
        """Solve A d = f with A v = sum_s c_s E[v | F_s]; pi * A is symmetric positive definite."""
        c = self.curvature(ms)
        n = self.z.size
        if n <= 2048:
            mat = np.zeros((n, n))
            for s in self.times:
                a = self.anc[s]
                same = a[:, None] == a[None, :]
                mat += same * (c[s][a] / self.pi_s[s][a])[:, None] * self.pi[None, :]
            return np.linalg.solve(mat, f)

        def matvec(v):
            out = np.zeros(n)
            for s in self.times:
                out += (c[s] * self.cond(v, s))[self.anc[s]]
            return self.pi * out

        diag = self.pi * sum(c[s][self.anc[s]] * self.pi / self.pi_s[s][self.anc[s]] for s in self.times)
        op = LinearOperator((n, n), matvec=matvec)
        pre = LinearOperator((n, n), matvec=lambda v: v / diag)
        d, info = cg(op, self.pi * f, rtol=1e-13, atol=0.0, maxiter=20 * n, M=pre)
        if info < 0:
            raise np.linalg.LinAlgError("conjugate gradient breakdown")
        return d

    def coordinate_sweep(self, y: np.ndarray) -> np.ndarray:
        """Gauss-Seidel pass: zero each leaf residual in its own log M_T coordinate."""
        y = y.copy()
        mt = np.exp(y)
        ms = self.slices(mt)
        for leaf in range(self.z.size):
            nodes = {s: self.anc[s][leaf] for s in self.times}
            w = {s: self.pi[leaf] / self.pi_s[s][nodes[s]] for s in self.times}
            base = {s: ms[s][nodes[s]] - w[s] * mt[leaf] for s in self.times}

            def f(v, leaf=leaf, base=base, w=w):
                e = np.exp(v)
                return sum(float(self.us[s].inv_marginal(max(base[s] + w[s] * e, 1e-300))) for s in self.times) - self.z[leaf]

            y[leaf] = invert_scalar(f, None, 0.0, x0=y[leaf], atol=1e-13)
            new = np.exp(y[leaf])
            for s in self.times:
                ms[s][nodes[s]] = base[s] + w[s] * new
            mt[leaf] = new
        return y


def general_allocation_solve(
    tree: ScenarioTree,
    z,
    utilities,
    t: int = 0,
    tol: float = 1e-8,
    max_iter: int = 100,
    initial: np.ndarray | None = None,
) -> GeneralSolution:
    """Optimal allocation for arbitrary per-slot utilities via the dual martingale.

    Unknowns are the log terminal values of M.  Each Newton step solves the
    symmetric linearised system and is damped by a backtracking search on the
    convex dual objective; if the search stalls a coordinate-wise bisection
    sweep takes over.  Converged when max |sum_s X_s - Z| <= tol.
    """
    z = _payoff(tree, z)
    us = aggregate_utilities(utilities)
    if len(us) != tree.horizon + 1:
        raise ValueError(f"need one utility per time 0..{tree.horizon}, got {len(us)}")
    sys_ = _LeafSystem(tree, z, us, t)
    y = np.zeros(z.size) if initial is None else np.array(initial, dtype=float)

    ms = sys_.slices(np.exp(y))
    f = sys_.residual(ms)
    psi, scale = sys_.merit(ms)
    best = float(np.max(np.abs(f)))
    it = 0
    while best > tol:
        if it >= max_iter:
            raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {best:.3g})", best)
        it += 1
        accepted = False
        fmax = float(np.max(np.abs(f)))
        try:
            d = sys_.newton_direction(ms, f) / np.exp(y)
            big = float(np.max(np.abs(d)))
            if big > 4.0:
                d *= 4.0 / big
            # d psi / d y = -pi * M_T * residual
            slope = -float(np.dot(sys_.pi * np.exp(y) * f, d))
            lam = 1.0
            for _ in range(40):
                y_try = y + lam * d
                ms_try = sys_.slices(np.exp(y_try))
                with np.errstate(over="ignore", invalid="ignore"):
                    psi_try, _ = sys_.merit(ms_try)
                    f_try = sys_.residual(ms_try)
                if np.isfinite(psi_try) and (
                    psi_try <= psi + 1e-4 * lam * slope + 1e-14 * scale
                    or float(np.max(np.abs(f_try))) <= 0.5 * fmax
                ):
                    accepted = True
                    break
                lam *= 0.5
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            accepted = False
        if accepted:
            y, ms, f = y_try, ms_try, f_try
        else:
            logger.debug("line search stalled at iteration %d; bisection sweep", it)
            y = sys_.coordinate_sweep(y)
            ms = sys_.slices(np.exp(y))
            f = sys_.residual(ms)
        psi, scale = sys_.merit(ms)
        best = min(best, float(np.max(np.abs(f))))

    mart = AdaptedProcess(tree, t, [ms[s] for s in sys_.times])
    alloc = AdaptedProcess(tree, t, [np.asarray(us[s].inv_marginal(ms[s]), dtype=float) for s in sys_.times])
    _, mres = is_martingale(tree, mart)
    primal = primal_objective(tree, alloc, us, t)
    dual = dual_objective(tree, mart, z, us, t, tol=np.inf)
    diagnostics = {
        "allocation_residual": float(np.max(np.abs(alloc.path_sum() - z))),
        "martingale_residual": mres,
        "duality_gap": float(np.max(np.abs(dual - primal))),
    }
    return GeneralSolution(alloc, mart, y, it, diagnostics)


def general_utility(tree: ScenarioTree, z, utilities, t: int = 0, **kw) -> np.ndarray:
    sol = general_allocation_solve(tree, z, utilities, t, **kw)
    return primal_objective(tree, sol.allocation, utilities, t)


def general_premium(tree: ScenarioTree, z, utilities, tol: float = 1e-9) -> float:
    """H_0(Z) for general utilities: the K with U_0(K - Z) = 0, by bracketed root search.

    The root lies in [E Z, max Z] because H_0 >= E Z and U_0(max Z - Z) >= U_0(0) = 0.
    """
    z = _payoff(tree, z)
    lo, hi = tree.expectation(z), float(z.max())
    if hi - lo <= tol:
        return lo
    warm = {"y": None}

    def g(k: float) -> float:
        sol = general_allocation_solve(tree, k - z, utilities, 0, tol=1e-12, initial=warm["y"])
        warm["y"] = sol.log_terminal
        return float(primal_objective(tree, sol.allocation, utilities, 0)[0])

    g_lo, g_hi = g(lo), g(hi)
    if g_lo >= 0:
        return lo
    if g_hi <= 0:
        return hi
    return float(brentq(g, lo, hi, xtol=tol / 10, rtol=4 * np.finfo(float).eps))


# -- bundled results -------------------------------------------------------------------


@dataclass
class ValuationResult:
    premium: AdaptedProcess
    value: AdaptedProcess
    utility: AdaptedProcess
    allocation: Allocation
    t: int
    diagnostics: dict[str, float]

    def to_dict(self, digits: int = 12) -> dict[str, Any]:
        r = lambda x: float(f"{x:.{digits}g}")  # noqa: E731

        def table(p: AdaptedProcess):
            return {s: {k: r(v) for k, v in row.items()} for s, row in p.to_dict().items()}

        return {
            "premium": r(float(self.premium.at(0)[0])),
            "t": self.t,
            "H": table(self.premium),
            "V": table(self.value),
            "U": table(self.utility),
            "X": table(self.allocation.total),
            "M": table(self.allocation.martingale),
            "agents": [table(a) for a in self.allocation.agents],
            "diagnostics": {k: r(v) for k, v in self.diagnostics.items()},
        }


def valuate(tree: ScenarioTree, z, schedule: RiskAversionSchedule, t: int = 0) -> ValuationResult:
    """Premium, value and utility processes plus the optimal allocation from ``t`` with its certificates."""
    z = _payoff(tree, z)
    h = premium_process(tree, z, schedule)
    v = value_process(tree, z, schedule)
    beta = schedule.beta
    u = AdaptedProcess(tree, 0, [-np.expm1(-beta[s] * v.at(s)) / beta[s] for s in range(tree.horizon + 1)])
    alloc = optimal_allocation(tree, z, schedule, t)
    _, mres = is_martingale(tree, alloc.martingale)
    primal = primal_objective(tree, alloc.total, schedule, t)
    dual = dual_objective(tree, alloc.martingale, z, schedule, t, tol=np.inf)
    marginal_gap = 0.0
    for s in range(t, tree.horizon + 1):
        for i, agent in enumerate(alloc.agents):
            du = np.exp(-schedule.alpha[i, s] * agent.at(s))
            marginal_gap = max(marginal_gap, float(np.max(np.abs(du - alloc.martingale.at(s)))))
    loading = float(np.min([np.min(h.at(s) - conditional_process(tree, z).at(s)) for s in range(tree.horizon + 1)]))
    diagnostics = {
        "martingale_residual": mres,
        "allocation_residual": float(np.max(np.abs(alloc.total.path_sum() - z))),
        "duality_gap": float(np.max(np.abs(dual - primal))),
        "marginal_gap": marginal_gap,
        "min_risk_loading": loading,
    }
    return ValuationResult(h, v, u, alloc, t, diagnostics)
