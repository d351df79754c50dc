"""N-functions: evaluation, derivatives, conjugates and Simonenko indices.

Three families are supported:

* ``power``      phi(t) = t^p / p
* ``power_sum``  phi(t) = t^p / p + t^q / q
* ``tabulated``  monotone cubic interpolation of log(phi) against log(t),
                 continued as a power law beyond the table.

All evaluation methods accept scalars or arrays and are vectorized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from .report import Check, CertificateReport

__all__ = [
    "DomainError",
    "CapabilityError",
    "NFunction",
    "legendre_numeric",
    "simonenko_indices",
    "verify_nfunc_inequalities",
]

BISECT_RTOL = 1e-12
BISECT_MAXITER = 200
INDEX_GRID_PER_DECADE = 401
INDEX_GRID_RANGE = (1e-8, 1e8)


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class CapabilityError(RuntimeError):
    """The requested operation is not available for this object."""


def _nonneg(x, what="t"):
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)) or np.any(x < 0):
        raise DomainError(f"{what} must be non-negative")
    return x


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _index_grid():
    lo, hi = INDEX_GRID_RANGE
    decades = round(math.log10(hi / lo))
    return np.logspace(math.log10(lo), math.log10(hi), decades * INDEX_GRID_PER_DECADE + 1)


@dataclass(frozen=True)
class NFunction:
    """An N-function from one of the supported families.

    Use the constructors :meth:`power`, :meth:`power_sum`, :meth:`tabulated`
    or :meth:`from_spec` rather than instantiating directly.
    """

    family: str
    p: float
    q: float
    points: tuple[tuple[float, float], ...] | None = None
    _interp: Any = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family == "power":
            if not (1 < self.p < math.inf):
                raise DomainError("power family needs 1 < p < inf")
            if self.q != self.p:
                raise DomainError("power family has q == p")
        elif self.family == "power_sum":
            if not (1 < self.p <= self.q < math.inf):
                raise DomainError("power_sum family needs 1 < p <= q < inf")
        elif self.family == "tabulated":
            object.__setattr__(self, "_interp", _Tabulation(self.points))
        else:
            raise DomainError(f"unknown N-function family {self.family!r}")

    # -- constructors -------------------------------------------------------

    @classmethod
    def power(cls, p: float) -> "NFunction":
        return cls("power", float(p), float(p))

    @classmethod
    def power_sum(cls, p: float, q: float) -> "NFunction":
        return cls("power_sum", float(p), float(q))

    @classmethod
    def tabulated(cls, points) -> "NFunction":
        pts = tuple((float(t), float(f)) for t, f in points)
        tab = _Tabulation(pts)
        p, q = tab.index_bounds()
        return cls("tabulated", p, q, pts)

    @classmethod
    def from_spec(cls, spec: dict) -> "NFunction":
        fam = spec.get("family")
        if fam == "power":
            return cls.power(spec["p"])
        if fam == "power_sum":
            return cls.power_sum(spec["p"], spec["q"])
        if fam == "tabulated":
            return cls.tabulated(spec["points"])
        raise DomainError(f"unknown N-function family {fam!r}")

    def to_spec(self) -> dict:
        if self.family == "power":
            return {"family": "power", "p": self.p}
        if self.family == "power_sum":
            return {"family": "power_sum", "p": self.p, "q": self.q}
        return {"family": "tabulated", "points": [list(pt) for pt in self.points]}

    # -- evaluation ---------------------------------------------------------

    def __call__(self, t):
        return self.phi(t)

    def phi(self, t):
        t = _nonneg(t)
        if self.family == "power":
            return _out(t**self.p / self.p)
        if self.family == "power_sum":
            return _out(t**self.p / self.p + t**self.q / self.q)
        return _out(self._interp.phi(t))

    def deriv(self, t):
        """Right derivative phi'(t)."""
        t = _nonneg(t)
        if self.family == "power":
            return _out(t ** (self.p - 1))
        if self.family == "power_sum":
            return _out(t ** (self.p - 1) + t ** (self.q - 1))
        return _out(self._interp.deriv(t))

    def deriv_inv(self, y):
        """Inverse of phi', i.e. the t >= 0 with phi'(t) = y."""
        y = _nonneg(y, "y")
        if self.family == "power":
            return _out(y ** (1.0 / (self.p - 1)))
        with np.errstate(over="ignore"):
            return _out(self._bisect_deriv(y))

    def _bisect_deriv(self, y):
        shape = np.shape(y)
        y = np.atleast_1d(y).astype(float)
        if not np.all(np.isfinite(y)):
            raise CapabilityError("phi' cannot be inverted at infinity")
        out = np.zeros_like(y)
        pos = y > 0
        if not np.any(pos):
            return out.reshape(shape)
        yp = y[pos]
        # Expand a bracket around 1 by squaring, so any finite scale is reached quickly.
        lo = np.full_like(yp, 1.0)
        hi = np.full_like(yp, 1.0)
        for _ in range(BISECT_MAXITER):
            low_bad = self.deriv(lo) > yp
            high_bad = self.deriv(hi) < yp
            if not (low_bad.any() or high_bad.any()):
                break
            lo = np.where(low_bad, np.minimum(lo * 0.5, lo * lo), lo)
            hi = np.where(high_bad, np.maximum(hi * 2.0, hi * hi), hi)
            if not (np.all(np.isfinite(hi)) and np.all(lo > 0)):
                raise CapabilityError("phi' cannot be inverted at this magnitude")
        else:
            raise CapabilityError("phi' cannot be inverted on this range (no bracket found)")
        for _ in range(4 * BISECT_MAXITER):
            wide = hi > 4 * lo
            mid = np.where(wide, np.sqrt(lo) * np.sqrt(hi), 0.5 * (lo + hi))
            below = self.deriv(mid) < yp
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= BISECT_RTOL * hi):
                break
        out[pos] = 0.5 * (lo + hi)
        return out.reshape(shape)

    def conjugate(self, s):
        """Legendre conjugate phi*(s) = sup_t (s t - phi(t)).

        Closed form for the power family; otherwise the supremum is located
        at its stationary point t = (phi')^{-1}(s).
        """
        s = _nonneg(s, "s")
        if self.family == "power":
            pc = self.p / (self.p - 1)
            return _out(s**pc / pc)
        t = np.asarray(self.deriv_inv(s))
        val = s * t - np.asarray(self.phi(t))
        return _out(np.maximum(val, 0.0))

    def conjugate_deriv(self, s):
        """(phi*)'(s), equal to (phi')^{-1}(s)."""
        return self.deriv_inv(s)

    def indices(self) -> tuple[float, float]:
        return simonenko_indices(self)

    @property
    def delta2(self) -> float:
        """Doubling constant bound 2^q."""
        return 2.0**self.q

    @property
    def conjugate_exponent(self) -> float:
        """p' = p/(p-1) for the lower index p."""
        return self.p / (self.p - 1)


class _Tabulation:
    """log-log PCHIP interpolant with power-law continuation."""

    def __init__(self, points):
        if points is None or len(points) < 3:
            raise DomainError("tabulated N-function needs at least 3 points")
        arr = np.asarray(points, dtype=float)
        t, f = arr[:, 0], arr[:, 1]
        if np.any(t <= 0) or np.any(f <= 0):
            raise DomainError("tabulated points must have t > 0 and phi > 0")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(f) <= 0):
            raise DomainError("tabulated points must be strictly increasing")
        self.x = np.log(t)
        self.y = np.log(f)
        self.spline = PchipInterpolator(self.x, self.y, extrapolate=False)
        self.dspline = self.spline.derivative()
        self.k_lo = float(self.dspline(self.x[0]))
        self.k_hi = float(self.dspline(self.x[-1]))
        if self.k_lo <= 1 or self.k_hi <= 1:
            raise DomainError("tabulated phi violates phi(t)/t -> 0 or -> inf (boundary slope <= 1)")
        grid = np.exp(np.linspace(self.x[0] - 2, self.x[-1] + 2, 4001))
        d = self.deriv(grid)
        if np.any(np.diff(d) <= 0):
            raise DomainError("tabulated phi' is not strictly increasing (phi not strictly convex)")

    def _logphi_slope(self, x):
        y = np.empty_like(x)
        k = np.empty_like(x)
        lo = x < self.x[0]
        hi = x > self.x[-1]
        mid = ~(lo | hi)
        y[lo] = self.y[0] + self.k_lo * (x[lo] - self.x[0])
        k[lo] = self.k_lo
        y[hi] = self.y[-1] + self.k_hi * (x[hi] - self.x[-1])
        k[hi] = self.k_hi
        y[mid] = self.spline(x[mid])
        k[mid] = self.dspline(x[mid])
        return y, k

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        flat = t.ravel()
        out = np.zeros_like(flat)
        pos = flat > 0
        y, _ = self._logphi_slope(np.log(flat[pos]))
        out[pos] = np.exp(y)
        return out.reshape(t.shape)

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        flat = t.ravel()
        out = np.zeros_like(flat)
        pos = flat > 0
        y, k = self._logphi_slope(np.log(flat[pos]))
        out[pos] = np.exp(y) * k / flat[pos]
        return out.reshape(t.shape)

    def index_bounds(self):
        _, k = self._logphi_slope(np.log(_index_grid()))
        return float(k.min()), float(k.max())


def simonenko_indices(phi: NFunction) -> tuple[float, float]:
    """Lower and upper Simonenko indices inf/sup of t phi'(t) / phi(t).

    Exact for the closed-form families; sampled on a logarithmic grid over
    [1e-8, 1e8] for tabulated functions.
    """
    if phi.family in ("power", "power_sum"):
        return phi.p, phi.q
    t = _index_grid()
    ratio = t * phi.deriv(t) / phi.phi(t)
    return float(ratio.min()), float(ratio.max())


def legendre_numeric(f, s: float, span=(-40.0, 40.0)) -> float:
    """sup_{t >= 0} (s t - f(t)) by direct maximization.

    Independent of any derivative information: a coarse scan in log t
    followed by bounded Brent refinement.  ``f`` must be convex with
    superlinear growth.
    """
    if s < 0:
        raise DomainError("s must be non-negative")
    if s == 0:
        return 0.0
    u = np.arange(span[0], span[1] + 0.25, 0.25)
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.exp(u)
        vals = s * t - np.asarray(f(t), dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    a, b = u[max(i - 1, 0)], u[min(i + 1, len(u) - 1)]

    def neg(v):
        tt = math.exp(v)
        return -(s * tt - float(f(tt)))

    res = minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    return max(0.0, -res.fun, float(vals[i]))


def _rel_slack(lhs, rhs):
    """(rhs - lhs) / scale: non-negative iff lhs <= rhs."""
    scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1e-300)
    return (rhs - lhs) / scale


def verify_nfunc_inequalities(phi: NFunction, trials: int = 10_000, seed: int = 0,
                              tol: float = 1e-10, duality_points: int = 40) -> CertificateReport:
    """Random-sample check of the growth, conjugate, and Young inequalities.

    Samples (s, t, eps) log-uniformly in [1e-4, 1e4]^2 x [1e-3, 1] and
    reports the minimal relative slack of each inequality.  The constant of
    the derivative form of Young's inequality is ``C_eps = 2^q eps^(1-p')``.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    s = 10.0 ** rng.uniform(-4, 4, trials)
    t = 10.0 ** rng.uniform(-4, 4, trials)
    eps = 10.0 ** rng.uniform(-3, 0, trials)
    p, q = simonenko_indices(phi)
    pc = p / (p - 1)

    phs, pht = phi.phi(s), phi.phi(t)
    dphs = phi.deriv(s)
    cst = phi.conjugate(t)
    c_eps = 2.0**q * eps ** (1 - pc)

    slacks = {
        "growth_lower": _rel_slack(np.minimum(s**p, s**q) * pht, phi.phi(s * t)),
        "growth_upper": _rel_slack(phi.phi(s * t), np.maximum(s**p, s**q) * pht),
        "conjugate_lower": _rel_slack(2.0 ** (-pc) * phs, phi.conjugate(dphs)),
        "conjugate_upper": _rel_slack(phi.conjugate(dphs), 2.0**q * phs),
        "young_first": _rel_slack(s * t, eps * phs + eps ** (1 - pc) * cst),
        "young_second": _rel_slack(s * t, eps ** (1 - q) * phs + eps * cst),
        "young_derivative": _rel_slack(dphs * t, c_eps * phs + eps * pht),
        "delta2": _rel_slack(phi.phi(2 * t), 2.0**q * pht),
    }
    checks = []
    witness = {}
    for name, sl in slacks.items():
        k = int(np.argmin(sl))
        checks.append(Check(name, float(sl[k]), -tol, "ge"))
        if sl[k] < -tol:
            witness[name] = {"s": float(s[k]), "t": float(t[k]), "eps": float(eps[k])}

    # Conjugate duality and inverse-derivative identity on a log grid.
    grid = np.logspace(-3, 3, duality_points)
    dual_err = max(abs(legendre_numeric(phi.conjugate, float(x)) - float(phi.phi(x))) / float(phi.phi(x))
                   for x in grid)
    inv_err = float(np.max(np.abs(phi.conjugate_deriv(phi.deriv(grid)) - grid) / grid))
    checks.append(Check("conjugate_duality", dual_err, 1e-8, "le"))
    checks.append(Check("conjugate_derivative_inverse", inv_err, 1e-8, "le"))

    return CertificateReport(
        name=f"nfunc_inequalities[{phi.family}:{p:g},{q:g}]",
        checks=checks,
        measured={"p": p, "q": q, "c_eps_max": float(c_eps.max()), "trials": trials},
        inputs={"phi": phi.to_spec(), "trials": trials, "seed": seed},
        witness=witness or None,
    )
