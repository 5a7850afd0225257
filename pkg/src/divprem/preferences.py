"""Utilities, their conjugates, risk-aversion schedules and the sup-convolution.

Every utility is normalised so that ``u(0) = 0`` and ``u'(0) = 1``, strictly
increasing and strictly concave with ``u'(+inf) = 0`` and ``u'(-inf) = inf``.
Evaluators accept scalars or numpy arrays.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .roots import invert_decreasing

SUM_ATOL = 1e-12


class ScheduleError(ValueError):
    pass


class Utility(ABC):
    """Evaluator interface: ``u``, ``u'``, ``u''``, inverse marginal and conjugate.

    Subclasses must provide ``u``, ``du`` and ``d2u``; the inverse marginal is
    then found numerically, which closed-form members override.
    """

    @abstractmethod
    def u(self, x): ...

    @abstractmethod
    def du(self, x): ...

    @abstractmethod
    def d2u(self, x): ...

    def log_du(self, x):
        return np.log(self.du(x))

    def inv_marginal(self, y):
        """I(y) = (u')^{-1}(y) for y > 0."""
        y = np.asarray(y, dtype=float)
        _require_positive(y)
        x = invert_decreasing(
            self.log_du,
            lambda v: self.d2u(v) / self.du(v),
            np.log(y),
            x0=-np.log(y),
            atol=1e-14,
        )
        return x if x.ndim else float(x)

    def inv_marginal_deriv(self, y):
        """dI/dy = 1 / u''(I(y))."""
        return 1.0 / self.d2u(self.inv_marginal(y))

    def conjugate(self, y):
        """u*(y) = sup_x {u(x) - x y} = u(I(y)) - y I(y) for y > 0."""
        y = np.asarray(y, dtype=float)
        _require_positive(y)
        x = self.inv_marginal(y)
        out = self.u(x) - y * x
        return out if np.ndim(out) else float(out)

    def __call__(self, x):
        return self.u(x)


def _require_positive(y: np.ndarray) -> None:
    if np.any(~(y > 0)):
        raise ValueError("conjugate and inverse marginal are only finite for y > 0")


@dataclass(frozen=True)
class ExponentialUtility(Utility):
    """u(x) = (1 - exp(-alpha x)) / alpha."""

    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"risk aversion must be positive and finite, got {self.alpha}")

    def u(self, x):
        return -np.expm1(-self.alpha * np.asarray(x, dtype=float)) / self.alpha

    def du(self, x):
        return np.exp(-self.alpha * np.asarray(x, dtype=float))

    def d2u(self, x):
        return -self.alpha * self.du(x)

    def log_du(self, x):
        return -self.alpha * np.asarray(x, dtype=float)

    def inv_marginal(self, y):
        y = np.asarray(y, dtype=float)
        _require_positive(y)
        out = -np.log(y) / self.alpha
        return out if out.ndim else float(out)

    def inv_marginal_deriv(self, y):
        return -1.0 / (self.alpha * np.asarray(y, dtype=float))

    def conjugate(self, y):
        y = np.asarray(y, dtype=float)
        _require_positive(y)
        out = (1.0 - y + xlogy(y, y)) / self.alpha
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class ExponentialMixture(Utility):
    """Convex combination of exponential utilities; weights sum to one.

    The inverse marginal has no closed form, so this is the stock example of a
    generic member.
    """

    weights: tuple[float, ...]
    alphas: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        a = np.asarray(self.alphas, dtype=float)
        if w.shape != a.shape or w.ndim != 1 or w.size == 0:
            raise ValueError("weights and alphas must be matching nonempty sequences")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(~(a > 0)) or not np.all(np.isfinite(a)):
            raise ValueError("mixture risk aversions must be positive and finite")
        object.__setattr__(self, "weights", tuple(map(float, w)))
        object.__setattr__(self, "alphas", tuple(map(float, a)))

    def _terms(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., None] * np.asarray(self.alphas)

    def u(self, x):
        w, a = np.asarray(self.weights), np.asarray(self.alphas)
        return (-np.expm1(-self._terms(x)) * (w / a)).sum(axis=-1)

    def du(self, x):
        return np.exp(self.log_du(x))

    def log_du(self, x):
        return logsumexp(-self._terms(x), b=np.asarray(self.weights), axis=-1)

    def d2u(self, x):
        w, a = np.asarray(self.weights), np.asarray(self.alphas)
        return -(np.exp(-self._terms(x)) * (w * a)).sum(axis=-1)


class ConvolvedUtility(Utility):
    """Sup-convolution of several utilities at one time slot.

    The inverse marginal and the conjugate are additive over the members; the
    utility value itself needs the multiplier root-find.
    """

    def __init__(self, members: Sequence[Utility]):
        if not members:
            raise ValueError("sup-convolution needs at least one member")
        self.members = tuple(members)

    def __repr__(self) -> str:
        return f"ConvolvedUtility({list(self.members)!r})"

    def inv_marginal(self, y):
        y = np.asarray(y, dtype=float)
        _require_positive(y)
        out = sum(np.asarray(m.inv_marginal(y)) for m in self.members)
        return out if np.ndim(out) else float(out)

    def inv_marginal_deriv(self, y):
        return sum(np.asarray(m.inv_marginal_deriv(y)) for m in self.members)

    def conjugate(self, y):
        out = sum(np.asarray(m.conjugate(y)) for m in self.members)
        return out if np.ndim(out) else float(out)

    def log_multiplier(self, x):
        """log of the common marginal utility at the optimal split of ``x``."""
        x = np.asarray(x, dtype=float)
        ell = invert_decreasing(
            lambda v: np.asarray(self.inv_marginal(np.exp(v))),
            lambda v: np.exp(v) * np.asarray(self.inv_marginal_deriv(np.exp(v))),
            x,
            x0=0.0,
            atol=SUM_ATOL,
        )
        return ell

    def split(self, x):
        lam = np.exp(self.log_multiplier(x))
        return np.stack([np.asarray(m.inv_marginal(lam)) for m in self.members]), lam

    def u(self, x):
        parts, _ = self.split(x)
        out = sum(np.asarray(m.u(p)) for m, p in zip(self.members, parts))
        return out if np.ndim(out) else float(out)

    def du(self, x):
        out = np.exp(self.log_multiplier(x))
        return out if out.ndim else float(out)

    def log_du(self, x):
        return self.log_multiplier(x)

    def d2u(self, x):
        lam = self.du(x)
        return 1.0 / np.asarray(self.inv_marginal_deriv(lam))


@dataclass(frozen=True)
class SupConvolution:
    value: float
    split: np.ndarray
    multiplier: float
    marginal_gap: float  # max_i |u_i'(x_i) - multiplier|


def sup_convolution(utilities: Sequence[Utility], x: float) -> SupConvolution:
    """Best split of wealth ``x`` across ``utilities``.

    The multiplier solves ``sum_j I_j(lam) = x``; the split is ``x_i = I_i(lam)``
    and the value ``sum_i u_i(x_i)``.  The residual of the sum constraint is
    below 1e-12 absolute.
    """
    conv = ConvolvedUtility(utilities)
    lam = float(np.exp(conv.log_multiplier(np.array([float(x)]))[0]))
    split = np.array([float(u.inv_marginal(lam)) for u in utilities])
    value = float(sum(float(u.u(xi)) for u, xi in zip(utilities, split)))
    gap = max(abs(float(u.du(xi)) - lam) for u, xi in zip(utilities, split))
    return SupConvolution(value=value, split=split, multiplier=lam, marginal_gap=gap)


def conjugate(u: Utility, y: float) -> float:
    """Convex conjugate u*(y); raises ``ValueError`` for y <= 0 where it is +inf."""
    if not y > 0:
        raise ValueError(f"conjugate is +inf for y = {y} <= 0")
    return float(u.conjugate(y))


def check_utility(u: Utility, grid: np.ndarray | None = None, tol: float = 1e-10) -> dict[str, float]:
    """Sample the normalisation, monotonicity and inversion axioms.

    Returns the worst violations; raises ``ValueError`` if any exceeds ``tol``.
    """
    grid = np.linspace(-3.0, 3.0, 61) if grid is None else np.asarray(grid, dtype=float)
    d = np.asarray(u.du(grid))
    report = {
        "u0": abs(float(u.u(0.0))),
        "du0": abs(float(u.du(0.0)) - 1.0),
        "increasing": float(max(0.0, -d.min())),
        "concave": float(max(0.0, np.diff(d).max())),
        "inverse": float(np.max(np.abs(np.asarray(u.inv_marginal(d)) - grid))),
    }
    if float(u.du(200.0)) > 1e-6 or float(u.du(-200.0)) < 1e6:
        report["limits"] = 1.0
    else:
        report["limits"] = 0.0
    bad = {k: v for k, v in report.items() if v > tol}
    if bad or d.min() <= 0:
        raise ValueError(f"utility {u!r} violates axioms: {bad}")
    return report


# -- risk aversion schedules -----------------------------------------------------------


@dataclass(frozen=True)
class RiskAversionSchedule:
    """Risk aversions ``alpha[i, s]`` for agents i and times s = 0..T.

    ``aggregate[s]`` is the harmonic sum over agents and ``beta[t]`` the
    harmonic sum of ``aggregate`` over the remaining times t..T.
    """

    alpha: np.ndarray
    aggregate: np.ndarray = field(init=False, repr=False)
    beta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float)
        if a.ndim != 2 or a.size == 0:
            raise ScheduleError(f"risk aversion matrix must be 2-d and nonempty, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            i, s = np.argwhere(~(np.isfinite(a) & (a > 0)))[0]
            raise ScheduleError(f"risk aversion alpha[{i}, {s}] = {a[i, s]} must be positive and finite")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        agg = 1.0 / (1.0 / a).sum(axis=0)
        beta = 1.0 / np.cumsum((1.0 / agg)[::-1])[::-1]
        agg.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "aggregate", agg)
        object.__setattr__(self, "beta", beta)

    @property
    def horizon(self) -> int:
        return self.alpha.shape[1] - 1

    @property
    def n_agents(self) -> int:
        return self.alpha.shape[0]

    def utilities(self) -> list[ExponentialUtility]:
        """Aggregated (already convolved) utility per time slot."""
        return [ExponentialUtility(float(a)) for a in self.aggregate]

    def agent_utilities(self) -> list[list[ExponentialUtility]]:
        """``[s][i]`` nested list of the individual agents' utilities."""
        return [[ExponentialUtility(float(a)) for a in self.alpha[:, s]] for s in range(self.horizon + 1)]

    def to_dict(self) -> dict[str, Any]:
        return {"alpha": self.alpha.tolist()}


def schedule_from_matrix(alpha, horizon: int | None = None, n_agents: int = 1) -> RiskAversionSchedule:
    """Build a schedule from a scalar, a per-time vector or an agents x times matrix.

    Scalars need ``horizon``; scalars and vectors are broadcast to ``n_agents``
    identical agents.
    """
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 0:
        if horizon is None:
            raise ScheduleError("a scalar risk aversion needs the horizon to broadcast over")
        a = np.full((n_agents, horizon + 1), float(a))
    elif a.ndim == 1:
        a = np.tile(a, (n_agents, 1))
    elif a.ndim != 2:
        raise ScheduleError(f"risk aversion must be scalar, vector or matrix, got {a.ndim}-d")
    if horizon is not None and a.shape[1] != horizon + 1:
        raise ScheduleError(f"schedule covers {a.shape[1]} times, tree needs {horizon + 1}")
    return RiskAversionSchedule(a)


def homogeneous_schedule(alpha: float, n_agents: int, horizon: int) -> RiskAversionSchedule:
    return schedule_from_matrix(alpha, horizon=horizon, n_agents=n_agents)


def schedule_from_config(cfg: Mapping[str, Any] | float, horizon: int) -> RiskAversionSchedule:
    """``{"alpha": scalar | [per-s] | [[per-i, s]], "agents": n}`` -> schedule."""
    if not isinstance(cfg, Mapping):
        cfg = {"alpha": cfg}
    if "alpha" not in cfg:
        raise ScheduleError("schedule config needs an 'alpha' entry")
    return schedule_from_matrix(cfg["alpha"], horizon=horizon, n_agents=int(cfg.get("agents", 1)))


def utility_from_config(cfg: Mapping[str, Any]) -> Utility:
    """``{"kind": "exp", "alpha": a}`` or ``{"kind": "mix", "weights": [...], "alphas": [...]}``."""
    kind = cfg.get("kind", "exp")
    if kind == "exp":
        return ExponentialUtility(float(cfg["alpha"]))
    if kind == "mix":
        return ExponentialMixture(tuple(cfg["weights"]), tuple(cfg["alphas"]))
    raise ValueError(f"unknown utility kind {kind!r}")


def aggregate_utilities(utilities) -> list[Utility]:
    """Normalise a per-time utility specification to one utility per slot.

    Accepts a :class:`RiskAversionSchedule`, a list of utilities, or a list of
    per-agent lists (each convolved).
    """
    if isinstance(utilities, RiskAversionSchedule):
        return utilities.utilities()
    out: list[Utility] = []
    for item in utilities:
        if isinstance(item, Utility):
            out.append(item)
        elif len(item) == 1:
            out.append(item[0])
        else:
            out.append(ConvolvedUtility(item))
    return out
