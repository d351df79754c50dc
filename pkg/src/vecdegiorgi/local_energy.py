"""Discrete local Orlicz energy with Dirichlet data.

Each grid cell carries the forward-difference Jacobian taken at its lower
corner node; the energy is the cell sum of phi(|Q|) h^n with the Frobenius
norm on n x N matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Grid, VectorField
from .nfunc import DomainError, NFunction
from .solver import SolveTrace, minimize

__all__ = ["LocalProblem", "cell_jacobians", "local_energy", "local_energy_gradient",
           "solve_local", "el_residual_local", "flux"]


@dataclass
class LocalProblem:
    grid: Grid
    phi: NFunction
    boundary: VectorField
    tol: float = 1e-8
    max_iter: int = 100_000
    eps_A: float = 0.0
    deterministic: bool = False
    method: str = "cg"

    def __post_init__(self):
        if self.boundary.grid != self.grid:
            raise DomainError("boundary data lives on a different grid")
        if self.eps_A < 0:
            raise DomainError("eps_A must be non-negative")
        if not self.tol > 0:
            raise DomainError("tolerance must be positive")

    @property
    def N(self) -> int:
        return self.boundary.N

    @property
    def interior(self) -> np.ndarray:
        return ~self.grid.boundary_mask()

    def _check(self, v: VectorField):
        if v.grid != self.grid or v.N != self.N:
            raise DomainError("field does not conform to the problem grid")


def cell_jacobians(v: np.ndarray, h: float) -> np.ndarray:
    """Forward-difference Jacobians, shape ``cells + (n, N)``; row i is d/dx_i."""
    n = v.ndim - 1
    if n == 1:
        return ((v[1:] - v[:-1]) / h)[:, None, :]
    base = v[:-1, :-1]
    d0 = (v[1:, :-1] - base) / h
    d1 = (v[:-1, 1:] - base) / h
    return np.stack([d0, d1], axis=-2)


def _rho(Q, eps):
    sq = np.einsum("...ij,...ij->...", Q, Q)
    return np.sqrt(sq + eps * eps)


def flux(phi: NFunction, Q: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """A(Q) = phi'(rho) Q / rho with rho = sqrt(|Q|^2 + eps^2), and A(0) = 0."""
    rho = _rho(Q, eps)
    scale = np.zeros_like(rho)
    nz = rho > 0
    scale[nz] = phi.deriv(rho[nz]) / rho[nz]
    return scale[..., None, None] * Q


def local_energy(P: LocalProblem, v: VectorField) -> float:
    P._check(v)
    return _energy_values(P, v.values)


def _energy_values(P: LocalProblem, vals: np.ndarray) -> float:
    h = P.grid.h
    dens = P.phi(_rho(cell_jacobians(vals, h), P.eps_A))
    w = h ** P.grid.n
    if P.deterministic:
        return math.fsum(dens.ravel().tolist()) * w
    return float(np.sum(dens)) * w


def _gradient_values(P: LocalProblem, vals: np.ndarray) -> np.ndarray:
    h = P.grid.h
    n = P.grid.n
    A = flux(P.phi, cell_jacobians(vals, h), P.eps_A) * h ** (n - 1)
    g = np.zeros_like(vals)
    if n == 1:
        a = A[:, 0, :]
        g[1:] += a
        g[:-1] -= a
    else:
        a0, a1 = A[..., 0, :], A[..., 1, :]
        g[1:, :-1] += a0
        g[:-1, 1:] += a1
        g[:-1, :-1] -= a0 + a1
    g[P.grid.boundary_mask()] = 0.0
    return g


def local_energy_gradient(P: LocalProblem, v: VectorField) -> VectorField:
    """Exact gradient of the discrete energy in the interior node values."""
    P._check(v)
    return VectorField(P.grid, _gradient_values(P, v.values))


def el_residual_local(P: LocalProblem, v: VectorField) -> float:
    g = local_energy_gradient(P, v).values
    return float(np.max(np.abs(g))) if g.size else 0.0


def solve_local(P: LocalProblem, init: VectorField | None = None) -> tuple[VectorField, SolveTrace]:
    """Minimize the energy over interior values with the boundary held fixed."""
    if init is None:
        init = P.boundary
    P._check(init)
    bmask = P.grid.boundary_mask()
    if not np.array_equal(init.values[bmask], P.boundary.values[bmask]):
        raise DomainError("initial field does not carry the boundary data")
    inner = ~bmask
    base = init.values.copy()

    def unpack(x):
        vals = base.copy()
        vals[inner] = x.reshape(-1, P.N)
        return vals

    def fun(x):
        return _energy_values(P, unpack(x))

    def grad(x):
        return _gradient_values(P, unpack(x))[inner].ravel()

    x, trace = minimize(fun, grad, base[inner].ravel(), P.tol, P.max_iter, P.method)
    return VectorField(P.grid, unpack(x)), trace
