"""Vectorised inversion of strictly decreasing scalar maps.

Bracket by exponential expansion around a guess, then run Newton steps that
fall back to bisection whenever they leave the bracket.  Every inverse-marginal
and sup-convolution multiplier in the package goes through here.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Array = np.ndarray


class BracketError(RuntimeError):
    """No sign change found while expanding the search bracket."""


def invert_decreasing(
    fn: Callable[[Array], Array],
    dfn: Callable[[Array], Array] | None,
    target,
    x0=0.0,
    atol: float = 1e-12,
    max_expand: int = 80,
    max_iter: int = 200,
) -> Array:
    """Solve ``fn(x) = target`` elementwise for strictly decreasing ``fn``.

    ``dfn`` is the derivative of ``fn``; pass ``None`` for pure bisection.
    Converged entries satisfy ``|fn(x) - target| <= atol`` or sit in a bracket
    narrower than a few ulps.
    """
    target = np.asarray(target, dtype=float)
    shape = target.shape
    tgt = target.ravel()
    x = np.broadcast_to(np.asarray(x0, dtype=float), shape).ravel().copy()
    lo = x - 1.0
    hi = x + 1.0
    width = np.ones_like(x)

    # fn(lo) >= target >= fn(hi) once bracketed
    f_lo = fn(lo) - tgt
    f_hi = fn(hi) - tgt
    for _ in range(max_expand):
        bad_lo = f_lo < 0
        bad_hi = f_hi > 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = np.where(bad_lo | bad_hi, 2.0 * width, width)
        lo = np.where(bad_lo, lo - width, lo)
        hi = np.where(bad_hi, hi + width, hi)
        if bad_lo.any():
            f_lo[bad_lo] = fn(lo[bad_lo]) - tgt[bad_lo]
        if bad_hi.any():
            f_hi[bad_hi] = fn(hi[bad_hi]) - tgt[bad_hi]
    else:
        raise BracketError(f"could not bracket a root after {max_expand} expansions")

    x = np.clip(x, lo, hi)
    fx = fn(x) - tgt
    for _ in range(max_iter):
        done = (np.abs(fx) <= atol) | (hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x)))
        if done.all():
            break
        lo = np.where(fx > 0, x, lo)
        hi = np.where(fx < 0, x, hi)
        mid = 0.5 * (lo + hi)
        if dfn is not None:
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                step = x - fx / dfn(x)
            ok = np.isfinite(step) & (step > lo) & (step < hi)
            cand = np.where(ok, step, mid)
        else:
            cand = mid
        x = np.where(done, x, cand)
        fx = np.where(done, fx, fn(x) - tgt)
    return x.reshape(shape)


def invert_scalar(fn, dfn, target: float, x0: float = 0.0, atol: float = 1e-12) -> float:
    """Scalar convenience wrapper around :func:`invert_decreasing`."""
    vf = lambda v: np.array([fn(float(e)) for e in v])  # noqa: E731
    vd = None if dfn is None else (lambda v: np.array([dfn(float(e)) for e in v]))
    return float(invert_decreasing(vf, vd, np.array([target]), x0, atol=atol)[0])
