"""Finite scenario trees: the filtered probability space behind every valuation.

A tree stores *conditional* one-step transition probabilities.  Nodes are kept
in slices by time; inside a slice they are ordered lexicographically by id, and
every random variable measurable at time ``t`` is a plain ``numpy`` array
aligned with ``tree.ids_at(t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

PROB_SUM_TOL = 1e-12


class TreeError(ValueError):
    """Raised for malformed tree descriptions; carries the offending node id."""

    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message if node_id is None else f"node {node_id!r}: {message}")
        self.node_id = node_id


@dataclass(frozen=True)
class Node:
    id: str
    time: int
    parent: str | None
    prob: float = 1.0


class ScenarioTree:
    """Immutable rooted tree with strictly positive transition probabilities.

    Build instances with :func:`build_tree`; the constructor assumes validated
    input.
    """

    def __init__(self, horizon: int, nodes: Sequence[Node]):
        self.horizon = horizon
        order = sorted(nodes, key=lambda nd: (nd.time, nd.id))
        self.ids: tuple[str, ...] = tuple(nd.id for nd in order)
        self._index = {nid: k for k, nid in enumerate(self.ids)}
        self.time = np.array([nd.time for nd in order], dtype=int)
        self.prob = np.array([nd.prob for nd in order], dtype=float)
        self.parent = np.array(
            [-1 if nd.parent is None else self._index[nd.parent] for nd in order], dtype=int
        )
        self.offsets = np.searchsorted(self.time, np.arange(horizon + 2))
        self.path_prob = np.empty(len(order))
        self.path_prob[0] = 1.0
        for k in range(1, len(order)):
            self.path_prob[k] = self.path_prob[self.parent[k]] * self.prob[k]
        # parent position inside the previous slice, per slice
        self._parent_local = [np.empty(0, dtype=int)] + [
            self.parent[self.slice(t)] - self.offsets[t - 1] for t in range(1, horizon + 1)
        ]
        self._prob_slices = [self.prob[self.slice(t)] for t in range(horizon + 1)]
        self._weight_sums = [np.ones(1)] + [
            np.bincount(self._parent_local[t], weights=self._prob_slices[t], minlength=self.size(t - 1))
            for t in range(1, horizon + 1)
        ]

    # -- structure -------------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self) -> str:
        return f"ScenarioTree(horizon={self.horizon}, nodes={len(self)}, leaves={self.size(self.horizon)})"

    def slice(self, t: int) -> slice:
        return slice(int(self.offsets[t]), int(self.offsets[t + 1]))

    def size(self, t: int) -> int:
        return int(self.offsets[t + 1] - self.offsets[t])

    def ids_at(self, t: int) -> tuple[str, ...]:
        return self.ids[self.slice(t)]

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.ids_at(self.horizon)

    def index(self, node_id: str) -> int:
        return self._index[node_id]

    def parent_local(self, t: int) -> np.ndarray:
        """Position of each time-``t`` node's parent inside slice ``t - 1``."""
        return self._parent_local[t]

    def probs_at(self, t: int) -> np.ndarray:
        """Conditional transition probabilities of the time-``t`` nodes."""
        return self._prob_slices[t]

    def weight_sums(self, t: int) -> np.ndarray:
        """Sum of children's transition probabilities for each time-``(t - 1)`` node."""
        return self._weight_sums[t]

    def path_probs_at(self, t: int) -> np.ndarray:
        return self.path_prob[self.slice(t)]

    def ancestors(self, t: int, r: int) -> np.ndarray:
        """For every time-``r`` node, the slice position of its time-``t`` ancestor."""
        if t > r:
            raise ValueError(f"ancestor time {t} is after node time {r}")
        pos = np.arange(self.size(r))
        for s in range(r, t, -1):
            pos = self._parent_local[s][pos]
        return pos

    def children_counts(self, t: int) -> np.ndarray:
        return np.bincount(self._parent_local[t + 1], minlength=self.size(t))

    # -- random variables ------------------------------------------------------------
    def rv(self, values: Mapping[str, float], t: int | None = None) -> np.ndarray:
        """Array aligned with slice ``t`` (default: leaves) from an id -> value mapping."""
        t = self.horizon if t is None else t
        ids = self.ids_at(t)
        missing = [nid for nid in ids if nid not in values]
        if missing:
            raise KeyError(f"random variable undefined at nodes {missing[:5]}")
        out = np.array([float(values[nid]) for nid in ids])
        if not np.all(np.isfinite(out)):
            raise ValueError("random variable values must be finite")
        return out

    def lift(self, x: np.ndarray, t: int, r: int | None = None) -> np.ndarray:
        """View a time-``t`` variable as a time-``r`` variable (default: leaves)."""
        r = self.horizon if r is None else r
        return np.asarray(x, dtype=float)[self.ancestors(t, r)]

    def step_back(self, x: np.ndarray, r: int) -> np.ndarray:
        """One-step conditional expectation from slice ``r`` to slice ``r - 1``."""
        s = np.bincount(self._parent_local[r], weights=self._prob_slices[r] * x, minlength=self.size(r - 1))
        return s / self._weight_sums[r]

    def expectation(self, x: np.ndarray, r: int | None = None) -> float:
        return float(condexp(self, x, 0, r)[0])

    def to_dict(self, rvs: Mapping[str, Mapping[str, float]] | None = None) -> dict[str, Any]:
        nodes = [
            {
                "id": nid,
                "time": int(self.time[k]),
                "parent": None if self.parent[k] < 0 else self.ids[self.parent[k]],
                "prob": float(self.prob[k]),
            }
            for k, nid in enumerate(self.ids)
        ]
        return {"horizon": self.horizon, "nodes": nodes, "rvs": {k: dict(v) for k, v in (rvs or {}).items()}}


def build_tree(spec: Mapping[str, Any] | Iterable[Node | Mapping[str, Any]], horizon: int | None = None) -> ScenarioTree:
    """Validate a tree description and return a :class:`ScenarioTree`.

    ``spec`` is either the JSON-style mapping ``{"horizon": T, "nodes": [...]}``
    or an iterable of nodes.  When the horizon is omitted it is taken as the
    largest node time.
    """
    if isinstance(spec, Mapping):
        horizon = spec.get("horizon", horizon)
        raw_nodes = spec["nodes"]
    else:
        raw_nodes = spec
    nodes = [_as_node(nd) for nd in raw_nodes]
    if not nodes:
        raise TreeError("tree has no nodes")
    if horizon is None:
        horizon = max(nd.time for nd in nodes)
    horizon = int(horizon)
    if horizon < 0:
        raise TreeError(f"horizon must be nonnegative, got {horizon}")

    by_id: dict[str, Node] = {}
    for nd in nodes:
        if nd.id in by_id:
            raise TreeError("duplicate node id", nd.id)
        by_id[nd.id] = nd
    roots = [nd for nd in nodes if nd.parent is None]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root, found {len(roots)}")
    if roots[0].time != 0:
        raise TreeError(f"root must sit at time 0, not {roots[0].time}", roots[0].id)

    child_sum: dict[str, float] = {}
    for nd in nodes:
        if not np.isfinite(nd.prob) or nd.prob <= 0.0 or nd.prob > 1.0:
            raise TreeError(f"transition probability {nd.prob} outside (0, 1]", nd.id)
        if nd.time > horizon:
            raise TreeError(f"time {nd.time} beyond horizon {horizon}", nd.id)
        if nd.parent is None:
            continue
        parent = by_id.get(nd.parent)
        if parent is None:
            raise TreeError(f"dangling parent {nd.parent!r}", nd.id)
        if nd.time != parent.time + 1:
            raise TreeError(f"time gap: node at {nd.time}, parent {nd.parent!r} at {parent.time}", nd.id)
        child_sum[nd.parent] = child_sum.get(nd.parent, 0.0) + nd.prob

    for nd in nodes:
        total = child_sum.get(nd.id)
        if total is None:
            if nd.time != horizon:
                raise TreeError(f"leaf at time {nd.time} before horizon {horizon}", nd.id)
        elif abs(total - 1.0) > PROB_SUM_TOL:
            raise TreeError(f"probability sum {total:.12g} ≠ 1", nd.id)
    return ScenarioTree(horizon, nodes)


def _as_node(nd: Node | Mapping[str, Any]) -> Node:
    if isinstance(nd, Node):
        return nd
    try:
        parent = nd.get("parent")
        return Node(
            id=str(nd["id"]),
            time=int(nd["time"]),
            parent=None if parent is None else str(parent),
            prob=float(nd.get("prob", 1.0)),
        )
    except KeyError as exc:
        raise TreeError(f"node description {dict(nd)!r} lacks field {exc}") from None


def load_tree(path: str | Path) -> tuple[ScenarioTree, dict[str, np.ndarray]]:
    """Read the JSON tree format and return the tree plus its leaf random variables."""
    data = json.loads(Path(path).read_text())
    tree = build_tree(data)
    rvs = {name: tree.rv(vals) for name, vals in data.get("rvs", {}).items()}
    return tree, rvs


# -- conditional expectation and martingales ------------------------------------------


def condexp(tree: ScenarioTree, x: np.ndarray, t: int, r: int | None = None) -> np.ndarray:
    """E[X | F_t] for a variable ``x`` measurable at time ``r`` (default: the horizon)."""
    r = tree.horizon if r is None else r
    if t > r:
        raise ValueError(f"cannot condition a time-{r} variable on F_{t} with {t} > {r}")
    x = np.asarray(x, dtype=float)
    if x.shape != (tree.size(r),):
        raise ValueError(f"expected {tree.size(r)} values at time {r}, got shape {x.shape}")
    for s in range(r, t, -1):
        x = tree.step_back(x, s)
    return x


@dataclass
class AdaptedProcess:
    """One array per time slice ``start..T``; ``values[k]`` lives on slice ``start + k``."""

    tree: ScenarioTree
    start: int
    values: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        expected = self.tree.horizon - self.start + 1
        if len(self.values) != expected:
            raise ValueError(f"process on [{self.start}, {self.tree.horizon}] needs {expected} slices")
        for k, v in enumerate(self.values):
            if np.shape(v) != (self.tree.size(self.start + k),):
                raise ValueError(f"slice {self.start + k} has wrong shape {np.shape(v)}")

    @property
    def times(self) -> range:
        return range(self.start, self.tree.horizon + 1)

    def at(self, s: int) -> np.ndarray:
        if not self.start <= s <= self.tree.horizon:
            raise IndexError(f"time {s} outside [{self.start}, {self.tree.horizon}]")
        return self.values[s - self.start]

    def pathwise(self) -> np.ndarray:
        """Matrix of shape (number of slices, number of leaves) of values along each path."""
        T = self.tree.horizon
        return np.stack([self.tree.lift(self.at(s), s, T) for s in self.times])

    def path_sum(self) -> np.ndarray:
        return self.pathwise().sum(axis=0)

    def map(self, fn) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, self.start, [np.asarray(fn(v), dtype=float) for v in self.values])

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {
            str(s): dict(zip(self.tree.ids_at(s), map(float, self.at(s))))
            for s in self.times
        }

    @classmethod
    def from_fn(cls, tree: ScenarioTree, start: int, fn) -> "AdaptedProcess":
        return cls(tree, start, [np.asarray(fn(s), dtype=float) for s in range(start, tree.horizon + 1)])


def conditional_process(tree: ScenarioTree, z: np.ndarray, start: int = 0) -> AdaptedProcess:
    """The martingale E[Z | F_s], s = start..T."""
    T = tree.horizon
    vals = [np.asarray(z, dtype=float)]
    for s in range(T, start, -1):
        vals.append(tree.step_back(vals[-1], s))
    return AdaptedProcess(tree, start, vals[::-1])


def is_martingale(tree: ScenarioTree, m: AdaptedProcess, tol: float = 1e-9) -> tuple[bool, float]:
    """Return ``(ok, residual)`` with residual = max |M_s - E[M_{s+1} | F_s]|."""
    residual = 0.0
    for s in range(m.start, tree.horizon):
        diff = np.abs(m.at(s) - tree.step_back(m.at(s + 1), s + 1))
        if diff.size:
            residual = max(residual, float(diff.max()))
    return residual <= tol, residual


def martingale_differences(tree: ScenarioTree, z: np.ndarray) -> AdaptedProcess:
    """Increments E[Z|F_t] - E[Z|F_{t-1}] for t = 1..T."""
    if tree.horizon < 1:
        raise ValueError("martingale differences need a horizon of at least one period")
    mart = conditional_process(tree, z)
    return AdaptedProcess(
        tree,
        1,
        [mart.at(t) - mart.at(t - 1)[tree.parent_local(t)] for t in range(1, tree.horizon + 1)],
    )


# -- constructors used by demos, sweeps and tests ---------------------------------------


def binomial_tree(horizon: int, p_up: float = 0.5) -> ScenarioTree:
    """Non-recombining binomial tree; ids spell the path, e.g. ``"r.du"``."""
    if not 0.0 < p_up < 1.0:
        raise TreeError(f"up probability {p_up} outside (0, 1)")
    nodes = [Node("r", 0, None, 1.0)]
    frontier = ["r"]
    for t in range(1, horizon + 1):
        nxt = []
        for pid in frontier:
            base = pid if t > 1 else "r."
            for move, p in (("d", 1.0 - p_up), ("u", p_up)):
                nid = base + move
                nodes.append(Node(nid, t, pid, p))
                nxt.append(nid)
        frontier = nxt
    return build_tree(nodes, horizon)


def up_moves(tree: ScenarioTree, t: int | None = None) -> np.ndarray:
    """Number of ``u`` moves in each binomial-tree node id of slice ``t``."""
    t = tree.horizon if t is None else t
    return np.array([nid.split(".", 1)[-1].count("u") if "." in nid else 0 for nid in tree.ids_at(t)], dtype=float)


def random_tree(
    rng: np.random.Generator,
    horizon: int,
    max_leaves: int = 16,
    max_branch: int = 3,
    min_prob: float = 0.02,
) -> ScenarioTree:
    """Random tree with every leaf at ``horizon`` and at most ``max_leaves`` leaves."""
    nodes = [Node("n", 0, None, 1.0)]
    frontier = ["n"]
    for t in range(1, horizon + 1):
        budget = max_leaves
        nxt = []
        for k, pid in enumerate(frontier):
            remaining = len(frontier) - k - 1
            cap = max(1, min(max_branch, budget - remaining))
            nb = int(rng.integers(1, cap + 1))
            budget -= nb
            w = rng.dirichlet(np.ones(nb))
            w = min_prob + (1.0 - nb * min_prob) * w
            w[-1] = 1.0 - w[:-1].sum()
            for j in range(nb):
                nid = f"{pid}{j}"
                nodes.append(Node(nid, t, pid, float(w[j])))
                nxt.append(nid)
        frontier = nxt
    return build_tree(nodes, horizon)


def dump_tree(path: str | Path, tree: ScenarioTree, rvs: Mapping[str, np.ndarray] | None = None) -> None:
    payload = tree.to_dict({k: dict(zip(tree.leaves, map(float, v))) for k, v in (rvs or {}).items()})
    Path(path).write_text(json.dumps(payload, indent=2))
