"""Finite-size diversification experiments.

Three sweeps, each returning a :class:`SweepReport`:

* :func:`large_n_sweep` spreads a risk over n identical exponential agents and
  watches the premium fall towards the expected claim.
* :func:`expansion_check` compares the same premiums with the second-order
  term 1/2 sum_t beta_t E[(dZ_t)^2] and reports the residual decay.
* :func:`time_refinement_sweep` keeps the law of the payoff fixed while
  cutting the horizon into more trading slots.

Grid points are independent and run on a thread pool whose size is capped by
the ``DIVPREM_THREADS`` environment variable.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .preferences import homogeneous_schedule
from .tree import Node, ScenarioTree, build_tree, martingale_differences
from .valuation import premium

Generator = Callable[[int], "tuple[ScenarioTree, np.ndarray]"]

CSV_COLUMNS = ("n_or_m", "premium", "reference", "expansion_term", "residual")


def max_workers() -> int:
    cap = os.environ.get("DIVPREM_THREADS")
    default = min(8, os.cpu_count() or 1)
    if not cap:
        return default
    try:
        return max(1, int(cap))
    except ValueError:
        raise ValueError(f"DIVPREM_THREADS must be an integer, got {cap!r}") from None


def _parallel_map(fn, items: Sequence) -> list:
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fmt(x: float) -> str:
    return f"{x + 0.0:.12g}"


@dataclass
class SweepReport:
    kind: str
    grid: list[int]
    premiums: np.ndarray
    reference: np.ndarray
    expansion_terms: np.ndarray | None = None
    note: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def gaps(self) -> np.ndarray:
        return self.premiums - self.reference

    @property
    def residuals(self) -> np.ndarray | None:
        if self.expansion_terms is None:
            return None
        return self.gaps - self.expansion_terms

    def ratios(self) -> dict[int, float]:
        """r(n) / r(2n) for every n whose double is also on the grid."""
        res = self.residuals
        if res is None:
            return {}
        pos = {n: k for k, n in enumerate(self.grid)}
        return {n: float(res[k] / res[pos[2 * n]]) for n, k in pos.items() if 2 * n in pos and res[pos[2 * n]] != 0}

    def slope(self) -> float:
        """Least-squares slope of log(gap) against log(grid); nan when any gap is nonpositive."""
        gaps = self.gaps
        if len(self.grid) < 2 or np.any(gaps <= 0):
            return math.nan
        return float(np.polyfit(np.log(self.grid), np.log(gaps), 1)[0])

    def is_monotone(self, strict: bool = False) -> bool:
        d = np.diff(self.premiums)
        return bool(np.all(d < 0) if strict else np.all(d <= 1e-12 * np.maximum(1.0, np.abs(self.premiums[1:]))))

    def rows(self) -> list[tuple[int, float, float, float, float]]:
        exp = self.expansion_terms if self.expansion_terms is not None else np.full(len(self.grid), math.nan)
        res = self.residuals if self.residuals is not None else np.full(len(self.grid), math.nan)
        return [(n, float(h), float(r), float(e), float(q)) for n, h, r, e, q in zip(self.grid, self.premiums, self.reference, exp, res)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for n, *vals in self.rows():
            w.writerow([n, *map(_fmt, vals)])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        clean = lambda x: None if not math.isfinite(x) else float(_fmt(x))  # noqa: E731
        out: dict[str, Any] = {
            "kind": self.kind,
            "rows": [dict(zip(CSV_COLUMNS, (n, *map(clean, vals)))) for n, *vals in self.rows()],
            "slope": clean(self.slope()),
            "ratios": {str(n): clean(r) for n, r in self.ratios().items()},
        }
        if self.note:
            out["note"] = self.note
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _check_grid(grid: Sequence[int]) -> list[int]:
    grid = [int(n) for n in grid]
    if not grid:
        raise ValueError("empty parameter grid")
    if any(n < 1 for n in grid):
        raise ValueError("grid values must be positive integers")
    return grid


def expansion_term(tree: ScenarioTree, z, beta: Sequence[float]) -> float:
    """1/2 sum_{t>=1} beta_t E[(dZ_t)^2] with dZ the martingale differences of Z."""
    dz = martingale_differences(tree, np.asarray(z, dtype=float))
    return 0.5 * sum(float(beta[t]) * tree.expectation(dz.at(t) ** 2, t) for t in range(1, tree.horizon + 1))


def large_n_sweep(tree: ScenarioTree, z, base_alpha: float, n_grid: Sequence[int]) -> SweepReport:
    """Premium with n identical agents of risk aversion ``base_alpha`` for each n."""
    grid = _check_grid(n_grid)
    z = np.asarray(z, dtype=float)
    mean = tree.expectation(z)

    def point(n: int) -> tuple[float, float]:
        sch = homogeneous_schedule(base_alpha, n, tree.horizon)
        return premium(tree, z, sch), expansion_term(tree, z, sch.beta)

    vals = _parallel_map(point, grid)
    return SweepReport(
        "large_n",
        grid,
        np.array([v[0] for v in vals]),
        np.full(len(grid), mean),
        np.array([v[1] for v in vals]),
    )


def expansion_check(tree: ScenarioTree, z, base_alpha: float, n_grid: Sequence[int]) -> SweepReport:
    """Same sweep as :func:`large_n_sweep`, reported for the residual ratios r(n)/r(2n)."""
    rep = large_n_sweep(tree, z, base_alpha, n_grid)
    rep.kind = "expansion"
    rep.extra["ratios_note"] = "r(n) = H_n - E[Z] - 1/2 sum_t beta_t E[dZ_t^2]; a ratio near 4 means O(n^-2) decay"
    return rep


def time_refinement_sweep(generator: Generator, m_grid: Sequence[int], alpha: float, n_agents: int = 1) -> SweepReport:
    """Premium of ``generator(m)`` on m slots, each slot with risk aversion ``alpha``."""
    grid = _check_grid(m_grid)

    def point(m: int) -> tuple[float, float]:
        tree, z = generator(m)
        if tree.horizon != m:
            raise ValueError(f"generator returned horizon {tree.horizon} for m={m}")
        return premium(tree, z, homogeneous_schedule(alpha, n_agents, m)), tree.expectation(np.asarray(z, dtype=float))

    vals = _parallel_map(point, grid)
    return SweepReport(
        "time_refinement",
        grid,
        np.array([v[0] for v in vals]),
        np.array([v[1] for v in vals]),
        note="discrete refinement of a fixed-law payoff; a finite analogue of the continuous-time limit",
    )


# -- payoff generators -----------------------------------------------------------------


def coin_flip_payoff(m: int, p: float = 0.5, high: float = 1.0, low: float = 0.0, reveal_at: float = 0.0, max_nodes: int = 100_000):
    """A single coin flip on an m-step tree, revealed at step max(1, ceil(reveal_at * m)).

    Every other step is a single-branch transition, so the payoff law is the
    same for every m.
    """
    if m < 1:
        raise ValueError("need at least one step")
    if 2 * m + 1 > max_nodes:
        raise ValueError(f"tree-size budget exceeded for m={m}")
    k = max(1, math.ceil(reveal_at * m))
    k = min(k, m)
    nodes = [Node("c", 0, None, 1.0)]
    branches = ["c"]
    for t in range(1, m + 1):
        nxt = []
        for pid in branches:
            if t == k:
                for tag, q in (("L", 1.0 - p), ("H", p)):
                    nodes.append(Node(pid + tag, t, pid, q))
                    nxt.append(pid + tag)
            else:
                nodes.append(Node(pid + ".", t, pid, 1.0))
                nxt.append(pid + ".")
        branches = nxt
    tree = build_tree(nodes, m)
    z = np.array([high if "H" in leaf else low for leaf in tree.leaves])
    return tree, z


def constant_payoff(m: int, value: float = 1.0):
    nodes = [Node("k" + "." * t, t, None if t == 0 else "k" + "." * (t - 1), 1.0) for t in range(m + 1)]
    tree = build_tree(nodes, m)
    return tree, np.array([value])


GENERATORS: dict[str, Callable[..., Any]] = {"coin": coin_flip_payoff, "constant": constant_payoff}
