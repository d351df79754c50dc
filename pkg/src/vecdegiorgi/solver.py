"""Monotone first-order minimization for smooth convex energies.

Nonlinear conjugate gradients (Polak-Ribiere+, restarted to steepest
descent whenever the direction stops being a descent direction) with a
line search on the directional derivative.  Every accepted step decreases
the energy: either the Armijo test holds, or the directional derivative at
the new point is still non-positive, which for a convex energy certifies a
decrease even when it falls below floating-point resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SolveTrace", "SolverStagnation", "minimize"]

ARMIJO_C1 = 1e-4
CURVATURE_C2 = 0.1
MIN_STEP = 1e-16
STALL_LIMIT = 50        # accepted steps allowed without a new energy or residual record
ROUNDING = 4 * np.finfo(float).eps


@dataclass
class SolveTrace:
    energies: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {"energies": self.energies, "residuals": self.residuals, "steps": self.steps,
                "iterations": self.iterations, "converged": self.converged,
                "message": self.message}


class SolverStagnation(RuntimeError):
    def __init__(self, msg: str, trace: SolveTrace):
        super().__init__(msg)
        self.trace = trace


def _line_search(fun, grad, x, d, e0, slope0, alpha0):
    """Return (alpha, x_new, g_new, e_new) or None when no decrease is found."""
    target = CURVATURE_C2 * abs(slope0)
    lo, dlo = 0.0, slope0
    best = None            # last trial with non-positive slope: a certified decrease
    hi = dhi = None

    a = alpha0
    for _ in range(80):
        xa = x + a * d
        ga = grad(xa)
        da = float(np.dot(ga, d))
        if da >= 0:
            hi, dhi = a, da
            break
        lo, dlo = a, da
        best = (a, xa, ga)
        if -da <= target:
            return a, xa, ga, fun(xa)
        a *= 4.0
    else:
        return None

    for _ in range(60):
        if dhi - dlo > 0:
            a = lo - dlo * (hi - lo) / (dhi - dlo)
        else:
            a = 0.5 * (lo + hi)
        width = hi - lo
        if not (lo + 1e-3 * width < a < hi - 1e-3 * width):
            a = 0.5 * (lo + hi)
        if a - lo <= 1e-14 * max(a, 1e-300):
            break
        xa = x + a * d
        ga = grad(xa)
        da = float(np.dot(ga, d))
        if abs(da) <= target:
            if da <= 0:
                return a, xa, ga, fun(xa)
            ea = fun(xa)
            if ea <= e0 + ARMIJO_C1 * a * slope0:
                return a, xa, ga, ea
        if da < 0:
            lo, dlo = a, da
            best = (a, xa, ga)
        else:
            hi, dhi = a, da

    if best is not None:
        a, xa, ga = best
        return a, xa, ga, fun(xa)
    # Everything sampled lies past the minimum along d: backtrack on energy.
    a = hi
    while a >= MIN_STEP:
        xa = x + a * d
        ea = fun(xa)
        if ea <= e0 + ARMIJO_C1 * a * slope0:
            return a, xa, grad(xa), ea
        a *= 0.5
    return None


def minimize(fun, grad, x0, tol: float = 1e-8, max_iter: int = 100_000,
             method: str = "cg") -> tuple[np.ndarray, SolveTrace]:
    """Minimize a convex ``fun`` with gradient ``grad`` over flat vectors.

    Stops once ``max|grad| < tol * (1 + |fun|)``; the test runs before the
    first step, so an initial minimizer is returned untouched.
    """
    if method not in ("cg", "gd"):
        raise ValueError(f"unknown method {method!r}")
    x = np.array(x0, float)
    trace = SolveTrace()
    e = fun(x)
    g = grad(x)
    d = -g
    d_prev_slope = None
    alpha_prev = None
    stalled = 0
    best_e, best_res = e, np.inf
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(g))) if g.size else 0.0
        trace.energies.append(float(e))
        trace.residuals.append(res)
        if res < tol * (1.0 + abs(e)):
            trace.converged = True
            trace.message = "gradient below tolerance"
            break
        if it == max_iter:
            trace.message = "iteration limit"
            break
        slope = float(np.dot(g, d))
        if slope >= 0:
            d = -g
            slope = -float(np.dot(g, g))
        if alpha_prev is None:
            alpha0 = 1.0 / max(res, 1e-300)
        else:
            alpha0 = alpha_prev * d_prev_slope / slope
        step = _line_search(fun, grad, x, d, e, slope, alpha0)
        if step is None and not np.array_equal(d, -g):
            d = -g
            slope = -float(np.dot(g, g))
            step = _line_search(fun, grad, x, d, e, slope, 1.0 / max(res, 1e-300))
        if step is None or step[0] < MIN_STEP:
            trace.iterations = it
            trace.message = "line search stagnated"
            raise SolverStagnation(f"no descent step at iteration {it} (residual {res:.3e})", trace)
        alpha, x_new, g_new, e_new = step
        trace.steps.append(float(alpha))
        # Rounding noise keeps flipping the sign of e_new - e, so progress is
        # measured against the best values seen so far.
        res_new = float(np.max(np.abs(g_new))) if g_new.size else 0.0
        best_res = min(best_res, res)
        if e_new < best_e - ROUNDING * abs(best_e) or res_new < 0.9 * best_res:
            stalled = 0
        else:
            stalled += 1
        best_e = min(best_e, e_new)
        if stalled >= STALL_LIMIT:
            trace.iterations = it + 1
            trace.message = "energy stalled at rounding level"
            raise SolverStagnation(f"no progress in {STALL_LIMIT} steps "
                                   f"(residual {res:.3e})", trace)
        if method == "cg":
            y = g_new - g
            beta = max(0.0, float(np.dot(g_new, y)) / float(np.dot(g, g)))
            d = -g_new + beta * d
        else:
            d = -g_new
        x, g, e = x_new, g_new, e_new
        alpha_prev, d_prev_slope = alpha, slope
        trace.iterations = it + 1
    return x, trace
