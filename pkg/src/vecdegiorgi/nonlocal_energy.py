"""Discrete nonlocal Orlicz energy with complement data, and the tail functional.

Nodes are cell centres of a box grid.  Node pairs interact through the
weight ``w = h^(2n) / |x - y|^n``.  Data outside the box is described
analytically by a :class:`FarField` and integrated in polar coordinates
around each node: angular Gauss-Legendre on the arcs between box-corner
directions, and along each ray the substitution ``rho = rho_exit * e^tau``
followed by Gauss-Laguerre in ``tau``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid, VectorField
from .nfunc import DomainError, NFunction
from .report import digest
from .solver import SolveTrace, minimize

__all__ = ["FarField", "KernelTable", "NonlocalProblem", "scaled_difference", "symmetrization",
           "pair_energy", "nonlocal_energy", "nonlocal_energy_gradient", "solve_nonlocal",
           "el_residual_nonlocal", "tail", "polar_rules", "laguerre_rule"]

ANGULAR_POINTS = 8
RADIAL_POINTS = 24
TAIL_ANGULAR_POINTS = 24
TAIL_PANEL_POINTS = 4
REFINE = 4


# ---------------------------------------------------------------- far field

@dataclass(frozen=True)
class FarField:
    """Complement data outside the computational box.

    ``zero``; ``constant`` (value ``c``); ``power_decay``:
    ``g(y) = c * |y - center|^(-beta)``.
    """

    kind: str = "zero"
    c: tuple[float, ...] = ()
    beta: float = 0.0
    center: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "power_decay"):
            raise DomainError(f"unknown far-field kind {self.kind!r}")
        object.__setattr__(self, "c", tuple(float(x) for x in np.atleast_1d(self.c)))
        object.__setattr__(self, "center", tuple(float(x) for x in np.atleast_1d(self.center)))
        if self.kind != "zero" and not self.c:
            raise DomainError("far-field value c is required")
        if self.kind == "power_decay":
            if not (self.beta >= 0 and math.isfinite(self.beta)):
                raise DomainError("decay exponent must be finite and non-negative")
            if not self.center:
                raise DomainError("power_decay needs a center")

    @classmethod
    def from_spec(cls, spec: dict | None) -> "FarField":
        if not spec:
            return cls()
        return cls(spec.get("kind", "zero"), tuple(spec.get("c", ())), float(spec.get("beta", 0.0)),
                   tuple(spec.get("center", ())))

    def to_spec(self) -> dict:
        return {"kind": self.kind, "c": list(self.c), "beta": self.beta, "center": list(self.center)}

    def values(self, y: np.ndarray, N: int) -> np.ndarray:
        """Data at points ``y`` (shape ``(..., n)``), shape ``(..., N)``."""
        shape = y.shape[:-1] + (N,)
        if self.kind == "zero":
            return np.zeros(shape)
        c = self._c(N)
        if self.kind == "constant":
            return np.broadcast_to(c, shape)
        dist = np.linalg.norm(y - np.asarray(self.center), axis=-1)
        return (dist ** -self.beta)[..., None] * c

    def _c(self, N):
        c = np.asarray(self.c, float)
        if c.size == 1 and N > 1:
            c = np.full(N, c[0])
        if c.size != N:
            raise DomainError(f"far-field value has {c.size} components, expected {N}")
        return c

    def hull_points(self, grid: Grid, N: int) -> np.ndarray:
        """Finite point set whose hull contains every far-field value."""
        if self.kind == "zero":
            return np.zeros((1, N))
        c = self._c(N)
        if self.kind == "constant":
            return c[None, :]
        lo, hi = grid.box_bounds()
        x = np.asarray(self.center)
        gap = float(np.min(np.concatenate([x - lo, hi - x])))
        return np.stack([np.zeros(N), c * gap ** -self.beta])

    def sup_norm(self, grid: Grid, N: int) -> float:
        return float(np.max(np.linalg.norm(self.hull_points(grid, N), axis=1)))

    def rescaled(self, t: float, s: float) -> "FarField":
        """Descriptor of y -> t^(-s) g(t y)."""
        if self.kind == "zero":
            return self
        c = np.asarray(self.c)
        if self.kind == "constant":
            return FarField("constant", tuple(c * t ** -s))
        return FarField("power_decay", tuple(c * t ** (-s - self.beta)), self.beta,
                        tuple(np.asarray(self.center) / t))

    def check_inside(self, grid: Grid):
        if self.kind != "power_decay":
            return
        lo, hi = grid.box_bounds()
        x = np.asarray(self.center)
        if x.size != grid.n or np.any(x <= lo) or np.any(x >= hi):
            raise DomainError("power_decay center must lie inside the computational box")


# ------------------------------------------------------------- quadrature

def laguerre_rule(rate: float, npts: int = RADIAL_POINTS):
    """Nodes and weights for int_0^inf f(tau) dtau, exact when f = e^(-rate tau)."""
    u, w = np.polynomial.laguerre.laggauss(npts)
    return u / rate, w * np.exp(u) / rate


def _arcs(x: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    ang = np.sort(np.arctan2(corners[:, 1] - x[1], corners[:, 0] - x[0]))
    return np.append(ang, ang[0] + 2 * np.pi)


def _exit_distance(x, dirs, lo, hi):
    with np.errstate(divide="ignore"):
        t = np.full(dirs.shape, np.inf)
        pos = dirs > 0
        neg = dirs < 0
        t[pos] = ((hi - x)[None, :] / np.where(pos, dirs, 1))[pos]
        t[neg] = ((lo - x)[None, :] / np.where(neg, dirs, 1))[neg]
    return t.min(axis=1)


def polar_rules(x, grid: Grid, npts: int = ANGULAR_POINTS):
    """Directions, angular weights and exit distances from ``x`` to the box edge."""
    lo, hi = grid.box_bounds()
    x = np.asarray(x, float)
    if grid.n == 1:
        dirs = np.array([[1.0], [-1.0]])
        wts = np.ones(2)
        return dirs, wts, np.array([hi[0] - x[0], x[0] - lo[0]])
    edges = _arcs(x, lo, hi)
    gx, gw = np.polynomial.legendre.leggauss(npts)
    thetas, wts = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a <= 0:
            continue
        thetas.append(0.5 * (a + b) + 0.5 * (b - a) * gx)
        wts.append(0.5 * (b - a) * gw)
    th = np.concatenate(thetas)
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    return dirs, np.concatenate(wts), _exit_distance(x, dirs, lo, hi)


# ------------------------------------------------------------ kernel table

@dataclass
class KernelTable:
    """Unordered node pairs ``i < j`` with distance and weight.

    A pair may appear several times when subcell refinement splits it; each
    entry then carries its own sub-distance and sub-weight.
    """

    i: np.ndarray
    j: np.ndarray
    dist: np.ndarray
    weight: np.ndarray
    size: int

    def __post_init__(self):
        if not (np.all(self.weight > 0) and np.all(np.isfinite(self.weight))):
            raise DomainError("pair weights must be positive and finite")
        if np.any(self.i == self.j):
            raise DomainError("diagonal pairs are excluded")

    @classmethod
    def from_points(cls, pts, h: float) -> "KernelTable":
        """All pairs of an explicit point list with cell volume ``h^n``."""
        pts = np.asarray(pts, float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[1]
        i, j = np.triu_indices(len(pts), 1)
        d = np.linalg.norm(pts[i] - pts[j], axis=1)
        if np.any(d == 0):
            raise DomainError("coincident nodes")
        return cls(i.astype(np.int64), j.astype(np.int64), d, h ** (2 * n) / d ** n, len(pts))

    @classmethod
    def for_grid(cls, grid: Grid, refine: bool = False, cache_dir=None) -> "KernelTable":
        if cache_dir is not None:
            path = Path(cache_dir) / f"kernel-{grid.digest()}-{int(refine)}.npz"
            if path.exists():
                z = np.load(path)
                return cls(z["i"], z["j"], z["dist"], z["weight"], int(z["size"]))
        pts = grid.coords().reshape(-1, grid.n)
        table = cls.from_points(pts, grid.h)
        if refine:
            table = table._refined(grid, pts)
        if cache_dir is not None:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            np.savez(path, i=table.i, j=table.j, dist=table.dist, weight=table.weight,
                     size=table.size)
        return table

    def _refined(self, grid: Grid, pts) -> "KernelTable":
        """Split axis-neighbour pairs into REFINE^n x REFINE^n subcell pairs."""
        h, n = grid.h, grid.n
        near = np.abs(self.dist - h) <= 1e-9 * h
        sub = (np.arange(REFINE) + 0.5) / REFINE - 0.5
        offs = np.stack(np.meshgrid(*[sub] * n, indexing="ij"), -1).reshape(-1, n) * h
        unit = np.eye(n) * h
        extra = {}
        for ax in range(n):
            diff = offs[:, None, :] - (offs[None, :, :] + unit[ax])
            dsub = np.linalg.norm(diff, axis=-1).ravel()
            wsub = (h / REFINE) ** (2 * n) / dsub ** n
            key, inv = np.unique(np.round(dsub / h, 12), return_inverse=True)
            extra[ax] = (key * h, np.bincount(inv, wsub))
        ii, jj, dd, ww = [self.i[~near]], [self.j[~near]], [self.dist[~near]], [self.weight[~near]]
        ni, nj = self.i[near], self.j[near]
        axis = np.argmax(np.abs(pts[nj] - pts[ni]), axis=1)
        for ax in range(n):
            sel = axis == ax
            dsub, wsub = extra[ax]
            k = len(dsub)
            ii.append(np.repeat(ni[sel], k))
            jj.append(np.repeat(nj[sel], k))
            dd.append(np.tile(dsub, sel.sum()))
            ww.append(np.tile(wsub, sel.sum()))
        return KernelTable(np.concatenate(ii), np.concatenate(jj), np.concatenate(dd),
                           np.concatenate(ww), self.size)

    def subset(self, keep: np.ndarray) -> "KernelTable":
        return KernelTable(self.i[keep], self.j[keep], self.dist[keep], self.weight[keep], self.size)


# ------------------------------------------------------------ differences

def scaled_difference(vx, vy, x, y, s: float) -> np.ndarray:
    """(v(x) - v(y)) / |x - y|^s from the values and positions of two nodes."""
    d = float(np.linalg.norm(np.atleast_1d(np.asarray(x, float)) - np.atleast_1d(np.asarray(y, float))))
    if d == 0:
        raise DomainError("scaled difference needs x != y")
    return (np.atleast_1d(np.asarray(vx, float)) - np.atleast_1d(np.asarray(vy, float))) / d ** s


def symmetrization(vx, vy):
    return 0.5 * (np.asarray(vx, float) + np.asarray(vy, float))


def _row_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", a, a))


def _flux_rows(phi: NFunction, a: np.ndarray) -> np.ndarray:
    """A(a) = phi'(|a|) a/|a| row-wise, with A(0) = 0."""
    r = _row_norm(a)
    scale = np.zeros_like(r)
    nz = r > 0
    scale[nz] = phi.deriv(r[nz]) / r[nz]
    return scale[..., None] * a


def pair_energy(phi: NFunction, s: float, table: KernelTable, values, deterministic=False) -> float:
    """Sum over ordered pairs, i.e. twice the unordered sum."""
    vals = np.asarray(values, float).reshape(table.size, -1)
    delta = (vals[table.i] - vals[table.j]) / table.dist[:, None] ** s
    dens = 2.0 * table.weight * phi(_row_norm(delta))
    return math.fsum(dens.tolist()) if deterministic else float(np.sum(dens))


# --------------------------------------------------------------- problem

@dataclass
class NonlocalProblem:
    """Nonlocal minimization instance on a cell-centred box grid.

    ``data`` holds complement values on the box nodes outside ``omega``;
    its values on ``omega`` serve only as a default initial guess.
    """

    grid: Grid
    omega: np.ndarray
    s: float
    phi: NFunction
    data: VectorField
    far: FarField = field(default_factory=FarField)
    form: str = "renormalized"
    refine: bool = False
    tol: float = 1e-8
    max_iter: int = 100_000
    deterministic: bool = False
    method: str = "cg"
    cache_dir: str | None = None
    angular_points: int = ANGULAR_POINTS
    radial_points: int = RADIAL_POINTS

    def __post_init__(self):
        if not (0 < self.s < 1):
            raise DomainError("s must lie in (0, 1)")
        self.omega = np.asarray(self.omega, bool)
        if self.omega.shape != self.grid.shape:
            raise DomainError("omega mask does not match the grid")
        if not self.omega.any():
            raise DomainError("omega is empty")
        if np.any(self.omega & self.grid.boundary_mask()):
            raise DomainError("omega must lie strictly inside the computational box")
        if self.data.grid != self.grid:
            raise DomainError("complement data lives on a different grid")
        if self.form not in ("renormalized", "full"):
            raise DomainError(f"unknown energy form {self.form!r}")
        if not self.tol > 0:
            raise DomainError("tolerance must be positive")
        self.far.check_inside(self.grid)
        if self.far.kind != "zero":
            self.far._c(self.N)
        self._table = None
        self._farq = None
        self._moments = None

    @property
    def N(self) -> int:
        return self.data.N

    @property
    def coords(self) -> np.ndarray:
        return self.grid.coords().reshape(-1, self.grid.n)

    @property
    def table(self) -> KernelTable:
        """Pairs entering the chosen energy form."""
        if self._table is None:
            full = KernelTable.for_grid(self.grid, self.refine, self.cache_dir)
            if self.form == "renormalized":
                om = self.omega.ravel()
                full = full.subset(om[full.i] | om[full.j])
            self._table = full
        return self._table

    def far_nodes(self) -> np.ndarray:
        """Flat indices of nodes that interact with the far field."""
        if self.form == "renormalized":
            return np.flatnonzero(self.omega.ravel())
        return np.arange(self.grid.size)

    @property
    def far_quadrature(self):
        """Per-node (rho^-s, weights, data) arrays for the far-field term."""
        if self._farq is None:
            kappa = self.s * self.phi.indices()[0]
            tau, tw = laguerre_rule(kappa, self.radial_points)
            coords = self.coords
            inv, wts, gval = [], [], []
            for k in self.far_nodes():
                dirs, aw, rexit = polar_rules(coords[k], self.grid, self.angular_points)
                rho = rexit[:, None] * np.exp(tau)[None, :]
                y = coords[k] + rho[..., None] * dirs[:, None, :]
                inv.append((rho ** -self.s).ravel())
                wts.append((aw[:, None] * tw[None, :]).ravel())
                gval.append(self.far.values(y, self.N).reshape(-1, self.N))
            self._farq = (np.array(inv), np.array(wts), np.array(gval))
        return self._farq

    def check_field(self, v: VectorField):
        if v.grid != self.grid or v.N != self.N:
            raise DomainError("field does not conform to the problem grid")
        out = ~self.omega
        if not np.allclose(v.values[out], self.data.values[out], rtol=0, atol=1e-12):
            raise DomainError("field does not carry the complement data")

    def rescaled(self, t: float) -> "NonlocalProblem":
        """Problem for x -> t^(-s) u(t x) on the grid scaled by 1/t."""
        g = self.grid.scaled(t)
        return NonlocalProblem(g, self.omega.copy(), self.s, self.phi,
                               VectorField(g, self.data.values * t ** -self.s),
                               self.far.rescaled(t, self.s), self.form, self.refine, self.tol,
                               self.max_iter, self.deterministic, self.method, None,
                               self.angular_points, self.radial_points)


def _homogeneous_exponents(phi: NFunction):
    """Exponents e with phi(t) = sum t^e / e, or None for other families."""
    if phi.family == "power":
        return (phi.p,)
    if phi.family == "power_sum":
        return (phi.p, phi.q)
    return None


def _far_moments(P: NonlocalProblem):
    """Per-node radial moments sum_q W_q rho_q^(-s e) when the far term is homogeneous.

    With zero or constant far data and a power-type phi, the far-field term
    of node x is sum_e M_e |v(x) - c|^e / e, so the quadrature collapses to
    one moment per exponent.
    """
    exps = _homogeneous_exponents(P.phi)
    if exps is None or P.far.kind == "power_decay":
        return None
    if P._moments is None:
        inv, wts, _ = P.far_quadrature
        c = np.zeros(P.N) if P.far.kind == "zero" else P.far._c(P.N)
        P._moments = (c, [(e, np.sum(wts * inv ** e, axis=1)) for e in exps])
    return P._moments


def _far_energy(P: NonlocalProblem, flat: np.ndarray) -> np.ndarray:
    vol2 = 2.0 * P.grid.h ** P.grid.n
    vx = flat[P.far_nodes()]
    mom = _far_moments(P)
    if mom is not None:
        c, parts = mom
        a = _row_norm(vx - c)
        return vol2 * sum(M * a ** e / e for e, M in parts)
    inv, wts, gval = P.far_quadrature
    diff = _row_norm(vx[:, None, :] - gval) * inv
    return vol2 * (wts * P.phi(diff))


def _far_gradient(P: NonlocalProblem, flat: np.ndarray) -> np.ndarray:
    vol2 = 2.0 * P.grid.h ** P.grid.n
    vx = flat[P.far_nodes()]
    mom = _far_moments(P)
    if mom is not None:
        c, parts = mom
        d = vx - c
        a = _row_norm(d)
        nz = a > 0
        scale = np.zeros_like(a)
        for e, M in parts:
            scale[nz] += M[nz] * a[nz] ** (e - 2)
        return vol2 * scale[:, None] * d
    inv, wts, gval = P.far_quadrature
    a = (vx[:, None, :] - gval) * inv[..., None]
    return vol2 * np.einsum("kq,kq,kqc->kc", wts, inv, _flux_rows(P.phi, a))


def _energy_flat(P: NonlocalProblem, flat: np.ndarray) -> float:
    pairs = pair_energy(P.phi, P.s, P.table, flat, P.deterministic)
    far = _far_energy(P, flat)
    if P.deterministic:
        return math.fsum([pairs, math.fsum(far.ravel().tolist())])
    return pairs + float(np.sum(far))


def _gradient_flat(P: NonlocalProblem, flat: np.ndarray) -> np.ndarray:
    T = P.table
    ds = T.dist[:, None] ** P.s
    A = _flux_rows(P.phi, (flat[T.i] - flat[T.j]) / ds)
    contrib = 2.0 * T.weight[:, None] * A / ds
    g = np.empty_like(flat)
    for c in range(flat.shape[1]):
        g[:, c] = (np.bincount(T.i, contrib[:, c], minlength=T.size)
                   - np.bincount(T.j, contrib[:, c], minlength=T.size))
    g[P.far_nodes()] += _far_gradient(P, flat)
    g[~P.omega.ravel()] = 0.0
    return g


def nonlocal_energy(P: NonlocalProblem, v: VectorField) -> float:
    P.check_field(v)
    return _energy_flat(P, v.flat())


def nonlocal_energy_gradient(P: NonlocalProblem, v: VectorField) -> VectorField:
    """Exact gradient in the values on omega nodes; zero elsewhere."""
    P.check_field(v)
    return VectorField(P.grid, _gradient_flat(P, v.flat()).reshape(v.values.shape))


def el_residual_nonlocal(P: NonlocalProblem, v: VectorField) -> float:
    g = nonlocal_energy_gradient(P, v).values
    return float(np.max(np.abs(g)))


def solve_nonlocal(P: NonlocalProblem, init: VectorField | None = None) -> tuple[VectorField, SolveTrace]:
    if init is None:
        init = P.data
    P.check_field(init)
    om = P.omega.ravel()
    base = init.flat().copy()

    def unpack(x):
        flat = base.copy()
        flat[om] = x.reshape(-1, P.N)
        return flat

    def fun(x):
        return _energy_flat(P, unpack(x))

    def grad(x):
        return _gradient_flat(P, unpack(x))[om].ravel()

    x, trace = minimize(fun, grad, base[om].ravel(), P.tol, P.max_iter, P.method)
    return VectorField(P.grid, unpack(x).reshape(init.values.shape)), trace


# ------------------------------------------------------------------ tail

def _nearest_values(grid: Grid, values: np.ndarray, y: np.ndarray) -> np.ndarray:
    idx = np.rint((y - np.asarray(grid.origin)) / grid.h).astype(int)
    idx = np.clip(idx, 0, np.asarray(grid.shape) - 1)
    return values[tuple(idx[..., k] for k in range(grid.n))]


def tail(P: NonlocalProblem, u: VectorField, center, r: float,
         angular_points: int = TAIL_ANGULAR_POINTS) -> float:
    """r^s (phi')^-1( r^s int_{B^c} phi'(|u(y)| / rho^s) rho^-(n+s) dy ), rho = |y - center|.

    Inside the box ``u`` is read as constant on each node's cell and the
    radial integral uses Gauss-Legendre panels no longer than h/2; outside
    the box the far-field descriptor is integrated along the same rays.
    """
    g, s, phi = P.grid, P.s, P.phi
    if u.grid != g:
        raise DomainError("field does not conform to the problem grid")
    x = np.atleast_1d(np.asarray(center, float))
    lo, hi = g.box_bounds()
    if not (r > 0) or np.any(x - r <= lo) or np.any(x + r >= hi):
        raise DomainError("ball must lie inside the computational box")
    dirs, aw, rexit = polar_rules(x, g, angular_points)
    gx, gw = np.polynomial.legendre.leggauss(TAIL_PANEL_POINTS)

    inner = 0.0
    for d, a, re in zip(dirs, aw, rexit):
        panels = max(1, int(math.ceil((re - r) / (0.5 * g.h))))
        edges = np.linspace(r, re, panels + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        rho = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        wq = (half[:, None] * gw[None, :]).ravel()
        vals = _nearest_values(g, u.values, x + rho[:, None] * d[None, :])
        mag = np.linalg.norm(vals, axis=-1)
        # dy / rho^(n+s) = rho^(n-1) drho dtheta / rho^(n+s)
        inner += a * float(np.sum(wq * phi.deriv(mag * rho ** -s) * rho ** (-1 - s)))

    kappa = s * phi.indices()[0]
    tau, tw = laguerre_rule(kappa, P.radial_points)
    rho = rexit[:, None] * np.exp(tau)[None, :]
    y = x + rho[..., None] * dirs[:, None, :]
    mag = np.linalg.norm(P.far.values(y, u.N), axis=-1)
    outer = float(np.sum(aw[:, None] * tw[None, :] * phi.deriv(mag * rho ** -s) * rho ** -s))

    total = inner + outer
    return float(r ** s * phi.deriv_inv(r ** s * total))
