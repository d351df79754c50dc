"""Pointwise vectorial operators: truncation, shortening and convex projection.

Vectors live on the last axis, so every operator also acts on whole
fields of shape ``(..., N)``.  Jacobians use the standing-gradient
convention ``G[i, j] = d_i v_j`` (shape ``(..., n, N)``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nfunc import DomainError
from .report import Check, CertificateReport

__all__ = [
    "truncate", "shorten", "truncate_ratio", "shorten_ratio",
    "Ball", "Hull", "ConvexTarget", "project", "min_norm_point", "hull_distance",
    "PointJacobianPair", "truncate_jacobian", "shorten_jacobian",
    "verify_pointwise_inequalities", "verify_jacobian_inequalities",
]

HULL_TOL = 1e-10


def _check_level(lam):
    if not np.all(np.asarray(lam) > 0):
        raise DomainError("level lambda must be positive")


def _norm(a):
    return np.linalg.norm(a, axis=-1, keepdims=True)


def truncate(lam: float, a):
    """T_lambda a = min(|a|, lambda) a/|a|."""
    _check_level(lam)
    a = np.asarray(a, dtype=float)
    r = _norm(a)
    factor = np.where(r > lam, lam / np.where(r > 0, r, 1.0), 1.0)
    return a * factor


def shorten(lam: float, a):
    """S_lambda a = (|a| - lambda)_+ a/|a|, i.e. a - T_lambda a."""
    _check_level(lam)
    a = np.asarray(a, dtype=float)
    r = _norm(a)
    factor = np.where(r > lam, (r - lam) / np.where(r > 0, r, 1.0), 0.0)
    return a * factor


def truncate_ratio(lam, a):
    """|T_lambda a| / |a|, continued by 1 at a = 0."""
    r = np.linalg.norm(np.asarray(a, dtype=float), axis=-1)
    return np.where(r > lam, lam / np.where(r > 0, r, 1.0), 1.0)


def shorten_ratio(lam, a):
    """|S_lambda a| / |a|, continued by 0 at a = 0."""
    r = np.linalg.norm(np.asarray(a, dtype=float), axis=-1)
    return np.where(r > lam, (r - lam) / np.where(r > 0, r, 1.0), 0.0)


# -- convex targets ---------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("ball radius must be positive")


class Hull:
    """Closed convex hull of a finite, non-empty point set (rows of ``points``)."""

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.size == 0:
            raise DomainError("hull needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DomainError("hull points must be finite")
        self.points = pts

    def __repr__(self):
        return f"Hull({len(self.points)} points in R^{self.points.shape[1]})"


ConvexTarget = Ball | Hull


def min_norm_point(P, tol: float = 1e-12, max_iter: int = 1000):
    """Wolfe's algorithm: the point of conv(P) closest to the origin.

    Returns ``(x, weights)`` with ``x = weights @ P``.  The active set is
    kept affinely independent; each minor cycle solves the affine
    min-norm problem over the active vertices by a bordered linear system.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m = len(P)
    scale = max(float(np.max(np.abs(P))), 1e-300)
    sq = np.einsum("ij,ij->i", P, P)
    S = [int(np.argmin(sq))]
    w = np.array([1.0])
    x = P[S[0]].copy()
    for _ in range(max_iter):
        xx = x @ x
        if np.sqrt(xx) <= tol * scale:
            break
        dots = P @ x
        j = int(np.argmin(dots))
        if xx - dots[j] <= tol * scale * np.sqrt(xx) or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            Q = P[S]
            k = len(S)
            M = np.zeros((k + 1, k + 1))
            M[:k, :k] = Q @ Q.T
            M[:k, k] = 1.0
            M[k, :k] = 1.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            v = np.linalg.lstsq(M, rhs, rcond=None)[0][:k]
            if np.all(v > 1e-14):
                w = v
                x = v @ Q
                break
            neg = v <= 1e-14
            theta = np.min(w[neg] / (w[neg] - v[neg]))
            w = w + theta * (v - w)
            keep = w > 1e-14
            keep[np.argmax(w)] = True
            S = [s for s, kp in zip(S, keep) if kp]
            w = w[keep]
            w = w / w.sum()
            x = w @ P[S]
    weights = np.zeros(m)
    weights[S] = w
    return x, weights


def project(K: ConvexTarget, a):
    """Closest point of the closed convex set ``K`` to ``a``."""
    a = np.asarray(a, dtype=float)
    if isinstance(K, Ball):
        c = np.asarray(K.center, dtype=float)
        return c + truncate(K.radius, a - c)
    if isinstance(K, Hull):
        if a.ndim > 1:
            return np.stack([project(K, ai) for ai in a.reshape(-1, a.shape[-1])]).reshape(a.shape)
        x, _ = min_norm_point(K.points - a)
        return a + x
    raise DomainError(f"unsupported convex target {type(K).__name__}")


def hull_distance(points, a) -> float:
    """Distance from ``a`` to the closed convex hull of ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise DomainError("empty point list")
    x, _ = min_norm_point(pts - np.asarray(a, dtype=float))
    return float(np.linalg.norm(x))


def hull_vertices(points):
    """Reduce a point cloud to (a superset of) its hull vertices."""
    pts = np.unique(np.atleast_2d(np.asarray(points, dtype=float)), axis=0)
    N = pts.shape[1]
    if N == 1:
        return np.array([[pts.min()], [pts.max()]])
    if len(pts) <= N + 1:
        return pts
    from scipy.spatial import ConvexHull, QhullError
    try:
        return pts[ConvexHull(pts).vertices]
    except QhullError:
        return pts


# -- Jacobians --------------------------------------------------------------

@dataclass
class PointJacobianPair:
    """A value ``a`` in R^N with the Jacobian ``G`` (n x N) of the field at that point."""

    value: np.ndarray
    jacobian: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.jacobian = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
        if self.jacobian.shape[-1] != self.value.shape[-1]:
            raise DomainError("jacobian must be n x N with N = len(value)")


def _jacobians(a, G, lam):
    """Batched (grad T_lambda v, grad S_lambda v, interface flag)."""
    _check_level(lam)
    a = np.asarray(a, dtype=float)
    G = np.asarray(G, dtype=float)
    r = np.linalg.norm(a, axis=-1)
    outside = r > lam
    safe = np.where(r > 0, r, 1.0)
    ahat = a / safe[..., None]
    Ga = np.einsum("...ij,...j->...i", G, ahat)
    Gaa = Ga[..., :, None] * ahat[..., None, :]
    coef = np.where(outside, lam / safe, 0.0)[..., None, None]
    proj_part = coef * (G - Gaa)
    JT = np.where(outside[..., None, None], proj_part, G)
    JS = np.where(outside[..., None, None], G - proj_part, 0.0)
    return JT, JS, r == lam


def truncate_jacobian(pair: PointJacobianPair, lam: float):
    """Jacobian of T_lambda v.  Returns ``(matrix, on_interface)``.

    On |a| = lambda the inside branch is returned and the flag is set.
    """
    JT, _, flag = _jacobians(pair.value, pair.jacobian, lam)
    return JT, bool(np.any(flag))


def shorten_jacobian(pair: PointJacobianPair, lam: float):
    """Jacobian of S_lambda v.  Returns ``(matrix, on_interface)``."""
    _, JS, flag = _jacobians(pair.value, pair.jacobian, lam)
    return JS, bool(np.any(flag))


# -- randomized verification ------------------------------------------------

def _sample_pairs(rng, trials, N):
    lam = 10.0 ** rng.uniform(-2, 2, trials)
    def vec():
        d = rng.standard_normal((trials, N))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        return d * (lam * 10.0 ** rng.uniform(-1.5, 1.5, trials))[:, None]
    a, b = vec(), vec()
    kind = rng.integers(0, 10, trials)
    a[kind == 0] = 0.0                                   # origin
    b[kind == 1] = a[kind == 1]                          # a = b
    on = kind == 2                                       # |a| = lambda exactly
    a[on] *= (lam[on] / np.maximum(np.linalg.norm(a[on], axis=1), 1e-300))[:, None]
    b[kind == 3] = -a[kind == 3]                         # antipodal
    return lam, a, b


def verify_pointwise_inequalities(N: int, trials: int = 100_000, seed: int = 0,
                                  tol: float = 1e-12) -> CertificateReport:
    """Random check of the contraction chains and the refined T/S estimates.

    Inputs are normalized by ``max(|a|, |b|, lambda)`` first, so all slacks
    are absolute on the unit scale.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    lam, a, b = _sample_pairs(rng, trials, N)
    sc = np.maximum.reduce([np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1), lam])
    a, b, lam = a / sc[:, None], b / sc[:, None], lam / sc

    lv = lam[:, None]
    Ta, Tb = _rowwise(truncate, lv, a), _rowwise(truncate, lv, b)
    Sa, Sb = _rowwise(shorten, lv, a), _rowwise(shorten, lv, b)
    d = a - b
    dd = np.einsum("ij,ij->i", d, d)
    dT, dS = Ta - Tb, Sa - Sb
    pT = np.einsum("ij,ij->i", d, dT)
    pS = np.einsum("ij,ij->i", d, dS)
    ra, rb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    tra = np.where(ra > lam, lam / np.where(ra > 0, ra, 1), 1.0)
    trb = np.where(rb > lam, lam / np.where(rb > 0, rb, 1), 1.0)
    sra = np.where(ra > lam, (ra - lam) / np.where(ra > 0, ra, 1), 0.0)
    srb = np.where(rb > lam, (rb - lam) / np.where(rb > 0, rb, 1), 0.0)

    # gamma-comparison on separately drawn a with |a| >= gamma > lambda
    gam = lam * (1 + 10.0 ** rng.uniform(-3, 2, trials))
    dirs = rng.standard_normal((trials, N))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    ag = dirs * (gam * (1 + 10.0 ** rng.uniform(-4, 1, trials)))[:, None]
    ag[::7] = dirs[::7] * gam[::7, None]                 # |a| = gamma exactly
    rg = np.linalg.norm(ag, axis=1)
    Sg = np.linalg.norm(_rowwise(shorten, lv, ag), axis=1)
    gscale = np.maximum(rg, 1e-300)

    slacks = {
        "T_contraction_lower": pT - np.einsum("ij,ij->i", dT, dT),
        "T_contraction_upper": dd - pT,
        "S_contraction_lower": pS - np.einsum("ij,ij->i", dS, dS),
        "S_contraction_upper": dd - pS,
        "T_refined_upper": 0.5 * (tra + trb) * dd - pT,
        "S_refined_lower": pS - 0.5 * (sra + srb) * dd,
        "S_plus_T_identity": -np.max(np.abs(Sa + Ta - a), axis=1),
        "S_norm_identity": -np.abs(np.linalg.norm(Sa, axis=1) - np.maximum(ra - lam, 0)),
        "gamma_comparison": (gam / (gam - lam) * Sg - rg) / gscale,
    }
    checks, witness = [], {}
    for name, sl in slacks.items():
        k = int(np.argmin(sl))
        checks.append(Check(name, float(sl[k]), -tol, "ge"))
        if sl[k] < -tol:
            witness[name] = {"a": a[k].tolist(), "b": b[k].tolist(), "lambda": float(lam[k])}
    return CertificateReport(
        name=f"pointwise_inequalities[N={N}]",
        checks=checks,
        measured={"trials": trials},
        inputs={"N": N, "trials": trials, "seed": seed},
        witness=witness or None,
    )


def _rowwise(op, lam_col, a):
    # lam varies per row: evaluate the radial factor directly.
    r = np.linalg.norm(a, axis=1, keepdims=True)
    safe = np.where(r > 0, r, 1.0)
    if op is truncate:
        return a * np.where(r > lam_col, lam_col / safe, 1.0)
    return a * np.where(r > lam_col, (r - lam_col) / safe, 0.0)


def verify_jacobian_inequalities(n: int, N: int, trials: int = 10_000, seed: int = 0,
                                 tol: float = 1e-10, fd_tol: float = 1e-6,
                                 fd_trials: int = 200) -> CertificateReport:
    """Random check of the gradient identities and inequalities for T and S.

    Also compares the shortening Jacobian with central differences of
    ``x -> S_lambda(a + x G)`` at x = 0.
    """
    rng = np.random.default_rng(seed)
    lam = 10.0 ** rng.uniform(-2, 2, trials)
    a = rng.standard_normal((trials, N))
    a *= (lam * 10.0 ** rng.uniform(-1, 1, trials) / np.linalg.norm(a, axis=1))[:, None]
    G = rng.standard_normal((trials, n, N)) * 10.0 ** rng.uniform(-2, 2, trials)[:, None, None]
    # normalize so |G| = 1, |a| scaled with lambda
    G /= np.linalg.norm(G, axis=(1, 2))[:, None, None]
    sc = np.maximum(np.linalg.norm(a, axis=1), lam)
    a, lam = a / sc[:, None], lam / sc

    JT, JS, _ = _jacobians(a, G, lam)
    r = np.linalg.norm(a, axis=1)
    out = r > lam
    ahat = a / r[:, None]
    G2 = np.einsum("kij,kij->k", G, G)
    Ga = np.einsum("kij,kj->ki", G, ahat)          # gradient of |v|
    grad_abs2 = np.einsum("ki,ki->k", Ga, Ga)
    GT = np.einsum("kij,kij->k", G, JT)
    GS = np.einsum("kij,kij->k", G, JS)
    T2 = np.einsum("kij,kij->k", JT, JT)
    S2 = np.einsum("kij,kij->k", JS, JS)
    lr = np.where(out, lam / r, 1.0)
    sr = np.where(out, (r - lam) / r, 0.0)

    slacks = {
        "T_inner_identity": -np.abs(GT - np.where(out, lr * (G2 - grad_abs2), G2)),
        "T_norm_identity": -np.abs(T2 - np.where(out, lr**2 * (G2 - grad_abs2), G2)),
        "T_sandwich_lower": GT - T2,
        "T_sandwich_upper": G2 - GT,
        "S_inner_identity": -np.abs(GS - np.where(out, sr * G2 + lr * grad_abs2, 0.0)),
        "S_norm_identity": -np.abs(S2 - np.where(out, sr**2 * G2 + (1 - sr**2) * grad_abs2, 0.0)),
        "S_sandwich_lower": GS - S2,
        "S_sandwich_upper": G2 - GS,
        "S_norm_lower": np.sqrt(S2) - sr * np.sqrt(G2),
        "S_norm_upper": np.sqrt(G2) - np.sqrt(S2),
        "S_key_estimate": GS - sr * G2,
        "S_plus_T_identity": -np.max(np.abs(JT + JS - G), axis=(1, 2)),
    }
    checks, witness = [], {}
    for name, sl in slacks.items():
        k = int(np.argmin(sl))
        checks.append(Check(name, float(sl[k]), -tol, "ge"))
        if sl[k] < -tol:
            witness[name] = {"a": a[k].tolist(), "G": G[k].tolist(), "lambda": float(lam[k])}

    fd_err = 0.0
    for k in range(min(fd_trials, trials)):
        if abs(r[k] - lam[k]) < 1e-3 * lam[k]:
            continue
        step = 1e-6 * max(r[k], lam[k])
        fd = np.empty((n, N))
        for i in range(n):
            fd[i] = (shorten(lam[k], a[k] + step * G[k, i]) - shorten(lam[k], a[k] - step * G[k, i])) / (2 * step)
        fd_err = max(fd_err, float(np.linalg.norm(fd - JS[k]) / max(np.linalg.norm(JS[k]), 1.0)))
    checks.append(Check("finite_difference", fd_err, fd_tol, "le"))
    return CertificateReport(
        name=f"jacobian_inequalities[n={n},N={N}]",
        checks=checks,
        measured={"trials": trials},
        inputs={"n": n, "N": N, "trials": trials, "seed": seed},
        witness=witness or None,
    )
