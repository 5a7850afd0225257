"""Command-line front end.

Every subcommand writes one report (JSON by default, CSV where a table makes
sense) to stdout or ``--out``.  Exit status: 0 on success, 1 on bad input,
2 when ``--strict`` is set and a diagnostic breaches its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import asymptotics, insurance, oracle
from .preferences import schedule_from_config, sup_convolution, utility_from_config
from .tree import ScenarioTree, TreeError, binomial_tree, build_tree, up_moves
from .valuation import premium_process, valuate

logger = logging.getLogger("divprem")

DIGITS = 12
TOLERANCES = {
    "martingale_residual": 1e-9,
    "allocation_residual": 1e-9,
    "duality_gap": 1e-8,
    "marginal_gap": 1e-10,
}


class InputError(Exception):
    """User-facing input problem; printed without a traceback."""


def _num(x: float) -> float | None:
    x = float(x)
    if not np.isfinite(x):
        return None
    # + 0.0 folds negative zero
    return float(f"{x:.{DIGITS}g}") + 0.0


def _round(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


# -- input parsing ---------------------------------------------------------------------


def _read_json(source: str, what: str) -> Any:
    """Parse ``source`` as a JSON file path, or as inline JSON when it is not a file."""
    path = Path(source)
    if path.is_file():
        text, label = path.read_text(), str(path)
    else:
        text, label = source, f"<inline {what}>"
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        if not path.is_file() and not source.lstrip().startswith(("{", "[")):
            raise InputError(f"{what} file not found: {source}") from None
        raise InputError(f"{label}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _load_tree(source: str) -> tuple[ScenarioTree, dict[str, dict[str, float]]]:
    spec = _read_json(source, "tree")
    try:
        tree = build_tree(spec)
    except (TreeError, KeyError, TypeError) as exc:
        raise InputError(f"{source}: {exc}") from None
    return tree, spec.get("rvs", {}) if isinstance(spec, dict) else {}


def _payoff(tree: ScenarioTree, rvs: dict[str, dict[str, float]], name: str, source: str) -> np.ndarray:
    if name not in rvs:
        raise InputError(f"{source}: random variable {name!r} not found in 'rvs' (have: {sorted(rvs) or 'none'})")
    try:
        return tree.rv(rvs[name])
    except (KeyError, ValueError, TreeError) as exc:
        raise InputError(f"{source}: random variable {name!r}: {exc}") from None


def _schedule(source: str | None, horizon: int):
    cfg = {"alpha": 1.0} if source is None else _read_json(source, "schedule")
    try:
        return schedule_from_config(cfg, horizon)
    except ValueError as exc:
        raise InputError(f"schedule: {exc}") from None


def _int_grid(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"grid must be a comma-separated list of integers, got {text!r}") from None


def _float_grid(text: str) -> list[float]:
    """``lo:hi:step`` or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise InputError("grid step must be positive")
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return [lo + k * step for k in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse grid {text!r}") from None


# -- subcommands -----------------------------------------------------------------------


def _breaches(diag: dict[str, float]) -> list[str]:
    return [k for k, tol in TOLERANCES.items() if k in diag and abs(diag[k]) > tol]


def _process_rows(tree: ScenarioTree, columns: dict[str, Any], start: int = 0) -> tuple[list[str], list[list[Any]]]:
    header = ["time", "node", *columns]
    rows = []
    for s in range(start, tree.horizon + 1):
        for k, nid in enumerate(tree.ids_at(s)):
            rows.append([s, nid, *(proc.at(s)[k] for proc in columns.values())])
    return header, rows


def cmd_premium(args) -> tuple[Any, list[str]]:
    tree, rvs = _load_tree(args.tree)
    z = _payoff(tree, rvs, args.rv, args.tree)
    sch = _schedule(args.schedule, tree.horizon)
    if not 0 <= args.t <= tree.horizon:
        raise InputError(f"--t {args.t} outside [0, {tree.horizon}]")
    h = premium_process(tree, z, sch)
    if args.format == "csv":
        return _process_rows(tree, {"H": h}), []
    t = args.t
    return {"premium": float(h.at(0)[0]), "t": t, "H_t": dict(zip(tree.ids_at(t), h.at(t))), "H": h.to_dict()}, []


def cmd_allocate(args):
    tree, rvs = _load_tree(args.tree)
    z = _payoff(tree, rvs, args.rv, args.tree)
    sch = _schedule(args.schedule, tree.horizon)
    if not 0 <= args.t <= tree.horizon:
        raise InputError(f"--t {args.t} outside [0, {tree.horizon}]")
    res = valuate(tree, z, sch, args.t)
    if args.format == "csv":
        cols = {"H": res.premium, "V": res.value, "X": res.allocation.total, "M": res.allocation.martingale}
        cols.update({f"X_agent{i}": a for i, a in enumerate(res.allocation.agents)})
        return _process_rows(tree, cols, args.t), _breaches(res.diagnostics)
    return res.to_dict(DIGITS), _breaches(res.diagnostics)


def cmd_convolve(args):
    cfg = _read_json(args.utilities, "utilities")
    if not isinstance(cfg, list) or not cfg:
        raise InputError("utilities must be a nonempty JSON list of utility configs")
    try:
        us = [utility_from_config(c) for c in cfg]
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"utilities: {exc}") from None
    xs = _float_grid(args.grid or "-2:2:0.5")
    rows, worst = [], 0.0
    for x in xs:
        sc = sup_convolution(us, x)
        worst = max(worst, sc.marginal_gap, abs(sum(sc.split) - x))
        rows.append([x, sc.value, sc.multiplier, *sc.split])
    header = ["x", "value", "multiplier", *(f"x{i}" for i in range(len(us)))]
    breaches = ["marginal_gap"] if worst > 1e-10 else []
    if args.format == "csv":
        return (header, rows), breaches
    return {"table": [dict(zip(header, r)) for r in rows], "max_constraint_gap": worst}, breaches


def cmd_insure(args):
    src = args.portfolio
    cfg = _read_json(src, "portfolio")
    try:
        pf = insurance.portfolio_from_dict(cfg)
    except (ValueError, TypeError) as exc:
        raise InputError(f"{src}: {exc}") from None
    if args.t != 0:
        raise InputError("insure reports the time-0 premium; survival states are not taken from the command line")
    table = insurance.h_recursion(pf)
    prem = insurance.premium_closed_form(pf, 0, table=table)
    mean = insurance.expected_claims(pf)
    if args.format == "csv":
        header = ["contract", *(f"h_{t}" for t in range(1, pf.horizon + 2))]
        return (header, [[cid, *row] for cid, row in table.to_dict().items()]), []
    return {"premium": prem, "expected_claims": mean, "risk_loading": prem - mean, "h": table.to_dict()}, []


def cmd_sweep_n(args):
    tree, rvs = _load_tree(args.tree)
    z = _payoff(tree, rvs, args.rv, args.tree)
    grid = _int_grid(args.grid or ",".join(str(2**k) for k in range(11)))
    try:
        rep = asymptotics.expansion_check(tree, z, args.alpha, grid)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    breaches = [] if rep.is_monotone() else ["monotonicity"]
    return rep, breaches


def cmd_sweep_m(args):
    gen = asymptotics.GENERATORS[args.generator]
    grid = _int_grid(args.grid or "1,2,3,4,6,8,12")
    try:
        rep = asymptotics.time_refinement_sweep(gen, grid, args.alpha)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return rep, []


def cmd_oracle_check(args):
    if args.tree:
        tree, rvs = _load_tree(args.tree)
        z = _payoff(tree, rvs, args.rv, args.tree)
    else:
        tree = binomial_tree(2, 0.5)
        z = up_moves(tree) - 1.0
    sch = _schedule(args.schedule, tree.horizon)
    try:
        report = oracle.oracle_check(tree, z, sch, step=args.step, rng=np.random.default_rng(args.seed))
    except (oracle.BudgetError, ValueError) as exc:
        raise InputError(str(exc)) from None
    return report, [] if report["pass"] else ["oracle"]


# -- plumbing --------------------------------------------------------------------------


def _render(result: Any, fmt: str) -> str:
    if isinstance(result, asymptotics.SweepReport):
        return result.to_csv() if fmt == "csv" else json.dumps(_round(result.to_dict()), indent=2) + "\n"
    if isinstance(result, tuple):
        header, rows = result
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{float(v) + 0.0:.{DIGITS}g}" if isinstance(v, (float, np.floating)) else v for v in row])
        return buf.getvalue()
    return json.dumps(_round(result), indent=2) + "\n"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divprem", description="Dynamic indifference premiums and optimal risk diversification on scenario trees.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, tree=True, fmt=("json", "csv")):
        if tree:
            sp.add_argument("--tree", required=True, help="tree JSON file (nodes plus an 'rvs' block)")
            sp.add_argument("--rv", default="Z", help="name of the payoff in the tree's rvs block (default Z)")
        sp.add_argument("--out", help="write the report here instead of stdout")
        sp.add_argument("--format", choices=fmt, default="json")
        sp.add_argument("--strict", action="store_true", help="exit 2 when a diagnostic breaches its tolerance")
        sp.add_argument("--seed", type=int, default=0, help="seed for randomised checks")

    sp = sub.add_parser("premium", help="premium process H_t for a payoff")
    common(sp)
    sp.add_argument("--schedule", help="schedule JSON file or inline JSON, e.g. '{\"alpha\": 1}'")
    sp.add_argument("--t", type=int, default=0)
    sp.set_defaults(fn=cmd_premium)

    sp = sub.add_parser("allocate", help="optimal allocation, dual martingale and diagnostics")
    common(sp)
    sp.add_argument("--schedule")
    sp.add_argument("--t", type=int, default=0)
    sp.set_defaults(fn=cmd_allocate)

    sp = sub.add_parser("convolve", help="sup-convolution table of several utilities")
    common(sp, tree=False)
    sp.add_argument("--utilities", required=True, help='JSON list, e.g. \'[{"kind": "exp", "alpha": 2}, {"kind": "exp", "alpha": 2}]\'')
    sp.add_argument("--grid", help="x values as lo:hi:step or a comma list (default -2:2:0.5)")
    sp.set_defaults(fn=cmd_convolve)

    sp = sub.add_parser("insure", help="closed-form premium of an insurance portfolio")
    common(sp, tree=False)
    sp.add_argument("--portfolio", required=True)
    sp.add_argument("--t", type=int, default=0)
    sp.set_defaults(fn=cmd_insure)

    sp = sub.add_parser("sweep-n", help="premium against the number of agents")
    common(sp)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--grid", help="comma-separated agent counts (default 1,2,4,...,1024)")
    sp.set_defaults(fn=cmd_sweep_n)

    sp = sub.add_parser("sweep-m", help="premium against the number of time slots")
    common(sp, tree=False)
    sp.add_argument("--generator", choices=sorted(asymptotics.GENERATORS), default="coin")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--grid", help="comma-separated slot counts (default 1,2,3,4,6,8,12)")
    sp.set_defaults(fn=cmd_sweep_m)

    sp = sub.add_parser("oracle-check", help="brute-force verification on a tiny instance")
    common(sp, tree=False, fmt=("json",))
    sp.add_argument("--tree", help="tree JSON (default: two-period binomial)")
    sp.add_argument("--rv", default="Z")
    sp.add_argument("--schedule")
    sp.add_argument("--step", type=float, default=1e-3, help="grid step")
    sp.set_defaults(fn=cmd_oracle_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result, breaches = args.fn(args)
    except InputError as exc:
        print(f"divprem: error: {exc}", file=sys.stderr)
        return 1
    text = _render(result, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if breaches:
        if args.strict:
            print(f"divprem: error: tolerance breached: {', '.join(breaches)}", file=sys.stderr)
            return 2
        logger.warning("tolerance breached: %s", ", ".join(breaches))
    return 0


if __name__ == "__main__":
    sys.exit(main())
