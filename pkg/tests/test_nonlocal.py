import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from vecdegiorgi.grid import VectorField
from vecdegiorgi.nfunc import DomainError, NFunction
from vecdegiorgi.nonlocal_energy import (FarField, KernelTable, NonlocalProblem, _flux_rows,
                                         el_residual_nonlocal, nonlocal_energy,
                                         nonlocal_energy_gradient, pair_energy, scaled_difference,
                                         solve_nonlocal, symmetrization, tail)

from instances import box_grid, perturbed, random_nonlocal
from oracles import dense_quadratic_solve


# -- differences ---------------------------------------------------------

def test_scaled_difference_examples():
    assert scaled_difference(1.0, 0.0, 1.0, 0.0, 0.5) == pytest.approx(1.0)
    assert scaled_difference([2.0, 2.0], [2.0, 2.0], 0.3, 0.9, 0.5) == pytest.approx([0, 0])
    assert scaled_difference(4.0, 0.0, 2.0, 0.0, 0.5) == pytest.approx(4 / 2 ** 0.5, rel=1e-15)
    assert scaled_difference(4.0, 0.0, 2.0, 0.0, 0.5)[0] == pytest.approx(2.8284, abs=1e-4)
    np.testing.assert_allclose(symmetrization([1, 2], [3, 4]), [2, 3])


def test_scaled_difference_rejects_coincident_nodes():
    with pytest.raises(DomainError):
        scaled_difference(1.0, 2.0, (0.5, 0.5), (0.5, 0.5), 0.3)


# -- energy -------------------------------------------------------------------

def test_two_node_toy_energy():
    table = KernelTable.from_points([0.0, 1.0], 1.0)
    assert pair_energy(NFunction.power(2), 0.5, table, [[0.0], [1.0]]) == pytest.approx(1.0)


def test_constant_field_with_matching_far_field_has_zero_energy():
    g = box_grid(10)
    c = (0.4, -1.2)
    omega = np.max(np.abs(g.coords()), axis=-1) < 0.5
    for form in ("renormalized", "full"):
        P = NonlocalProblem(g, omega, 0.4, NFunction.power_sum(1.5, 3), VectorField.constant(g, c),
                            FarField("constant", c), form=form)
        assert nonlocal_energy(P, P.data) == 0.0
        assert np.all(nonlocal_energy_gradient(P, P.data).values == 0)


def test_energy_forms_differ_by_a_field_independent_constant():
    base = random_nonlocal(10, 2, NFunction.power(1.5), 0.6, seed=0)
    full = NonlocalProblem(base.grid, base.omega, base.s, base.phi, base.data, base.far, form="full")
    v, w = perturbed(base, 1), perturbed(base, 2)
    d_ren = nonlocal_energy(base, v) - nonlocal_energy(base, w)
    d_full = nonlocal_energy(full, v) - nonlocal_energy(full, w)
    assert d_ren == pytest.approx(d_full, abs=1e-10)


def test_complement_mismatch_rejected():
    P = random_nonlocal(8, 1, NFunction.power(2), 0.5, seed=0)
    v = P.data.copy()
    v.values[0, 0] += 1.0
    with pytest.raises(DomainError):
        nonlocal_energy(P, v)


@pytest.mark.parametrize("s", [0.0, 1.0, -0.2])
def test_fractional_order_must_lie_in_unit_interval(s):
    with pytest.raises(DomainError):
        random_nonlocal(8, 1, NFunction.power(2), s, seed=0)


def test_omega_must_stay_off_the_outer_layer():
    g = box_grid(8)
    omega = np.ones(g.shape, bool)
    with pytest.raises(DomainError):
        NonlocalProblem(g, omega, 0.5, NFunction.power(2), VectorField.constant(g, 0.0))


def test_far_field_validation():
    with pytest.raises(DomainError):
        FarField("power_decay", (1.0,), -1.0, (0.0, 0.0))
    with pytest.raises(DomainError):
        FarField("spiral", (1.0,))
    with pytest.raises(DomainError):
        random_nonlocal(8, 1, NFunction.power(2), 0.5, 0, far=FarField("power_decay", (1.0,), 1.0, (5.0, 0.0)))


# -- gradient -----------------------------------------------------------------

def _fd_check(P, seed):
    v = perturbed(P, seed)
    grad = nonlocal_energy_gradient(P, v).values
    om = P.omega
    eps = 1e-6
    fd = np.zeros_like(grad)
    for idx in zip(*np.nonzero(om)):
        for c in range(P.N):
            vp, vm = v.values.copy(), v.values.copy()
            vp[idx + (c,)] += eps
            vm[idx + (c,)] -= eps
            fd[idx + (c,)] = (nonlocal_energy(P, VectorField(P.grid, vp))
                              - nonlocal_energy(P, VectorField(P.grid, vm))) / (2 * eps)
    assert np.max(np.abs(grad - fd)) <= 1e-6 * max(np.max(np.abs(fd)), 1.0)
    assert np.all(grad[~om] == 0)


TABULATED = NFunction.tabulated([(t, t ** 2.2 / 2.2 + t ** 1.6 / 1.6) for t in np.logspace(-4, 4, 50)])


@pytest.mark.parametrize("phi", [NFunction.power(1.5), NFunction.power(3),
                                 NFunction.power_sum(1.5, 3), TABULATED])
@pytest.mark.parametrize("form", ["renormalized", "full"])
def test_gradient_matches_finite_differences(phi, form):
    P = random_nonlocal(8, 2, phi, 0.4, seed=3, far=FarField("constant", (0.5, -0.5)), form=form)
    _fd_check(P, 4)


@pytest.mark.parametrize("refine", [False, True])
def test_gradient_with_decaying_far_field(refine):
    far = FarField("power_decay", (1.0, 2.0), 1.5, (0.1, -0.1))
    P = random_nonlocal(8, 2, NFunction.power(2), 0.7, seed=5, far=far, refine=refine)
    _fd_check(P, 6)


def test_gradient_is_odd():
    far = FarField("power_decay", (1.0, -2.0), 0.5, (0.0, 0.0))
    P = random_nonlocal(8, 2, NFunction.power_sum(1.5, 3), 0.5, seed=7, far=far)
    neg = NonlocalProblem(P.grid, P.omega, P.s, P.phi, VectorField(P.grid, -P.data.values),
                          FarField("power_decay", (-1.0, 2.0), 0.5, (0.0, 0.0)))
    v = perturbed(P, 8)
    g_pos = nonlocal_energy_gradient(P, v).values
    g_neg = nonlocal_energy_gradient(neg, VectorField(P.grid, -v.values)).values
    np.testing.assert_array_equal(g_neg, -g_pos)


# -- solver -----------------------------------------------------------------

def test_constant_complement_gives_constant_solution():
    g = box_grid(10)
    omega = np.max(np.abs(g.coords()), axis=-1) < 0.5
    P = NonlocalProblem(g, omega, 0.5, NFunction.power(3), VectorField.constant(g, (0.3, 0.1)),
                        FarField("constant", (0.3, 0.1)), tol=1e-12)
    u, trace = solve_nonlocal(P, perturbed(P, 0, 0.3))
    assert trace.converged
    np.testing.assert_allclose(u.values, P.data.values, atol=1e-6)


def test_quadratic_solution_matches_dense_linear_solve():
    P = random_nonlocal(16, 2, NFunction.power(2), 0.5, seed=9, tol=1e-12)
    u, trace = solve_nonlocal(P)
    assert trace.converged
    assert np.max(np.abs(u.values - dense_quadratic_solve(P))) <= 1e-8


@pytest.mark.parametrize("p,s", [(1.5, 0.3), (3.0, 0.7)])
def test_solution_is_bounded_by_complement_data(p, s):
    P = random_nonlocal(12, 3, NFunction.power(p), s, seed=11, tol=1e-9)
    vals = P.data.values
    vals /= np.maximum(np.linalg.norm(vals, axis=-1, keepdims=True), 1.0)
    P = NonlocalProblem(P.grid, P.omega, s, P.phi, VectorField(P.grid, vals), tol=1e-9)
    u, trace = solve_nonlocal(P)
    assert trace.converged
    assert el_residual_nonlocal(P, u) < P.tol * (1 + nonlocal_energy(P, u))
    assert u.sup_norm() <= 1 + 1e-8


def test_minimizers_map_to_minimizers_under_rescaling():
    t = 2.0
    P = random_nonlocal(10, 2, NFunction.power(1.5), 0.4, seed=12,
                        far=FarField("power_decay", (1.0, 0.5), 1.0, (0.05, 0.0)), tol=1e-11)
    u, _ = solve_nonlocal(P)
    Pb = P.rescaled(t)
    ub = VectorField(Pb.grid, u.values * t ** -P.s)
    g = nonlocal_energy_gradient(P, u).values
    gb = nonlocal_energy_gradient(Pb, ub).values
    scale = np.max(np.abs(nonlocal_energy_gradient(P, perturbed(P, 1)).values))
    assert np.max(np.abs(gb - t ** (P.s - 2) * g)) <= 1e-8 * t ** (P.s - 2) * scale
    assert el_residual_nonlocal(Pb, ub) <= t ** (P.s - 2) * (el_residual_nonlocal(P, u) + 1e-8 * scale)


# -- tail -----------------------------------------------------------------------

def test_tail_vanishes_for_zero_outside_data():
    P = random_nonlocal(16, 2, NFunction.power(2), 0.5, seed=0)
    u = VectorField.constant(P.grid, (0.0, 0.0))
    inside = np.linalg.norm(P.grid.coords(), axis=-1) < 0.3
    u.values[inside] = 5.0
    assert tail(P, u, (0.0, 0.0), 0.4) == 0.0


def _constant_problem(c, p, s):
    g = box_grid(16)
    omega = np.max(np.abs(g.coords()), axis=-1) < 0.5
    return NonlocalProblem(g, omega, s, NFunction.power(p), VectorField.constant(g, c),
                           FarField("constant", c))


def test_tail_of_unit_constant_is_two_pi():
    P = _constant_problem((1.0, 0.0), 2.0, 0.5)
    r, sp = 0.4, 1.0
    radial, _ = quad(lambda rho: rho ** (-sp - 1), r, np.inf, epsrel=1e-13)
    expected = r ** 0.5 * (r ** 0.5 * 2 * math.pi * radial)
    assert expected == pytest.approx(2 * math.pi, rel=1e-12)
    assert tail(P, P.data, (0.0, 0.0), 0.4) == pytest.approx(2 * math.pi, rel=1e-8)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("s", [0.3, 0.5, 0.7])
def test_tail_of_constant_matches_closed_form(p, s):
    c = np.array([0.6, -0.8, 0.5])
    P = _constant_problem(tuple(c), p, s)
    expected = np.linalg.norm(c) * (2 * math.pi / (s * p)) ** (1 / (p - 1))
    assert tail(P, P.data, (0.1, -0.05), 0.3) == pytest.approx(expected, rel=1e-8)


def test_tail_doubles_with_data_for_quadratic_phi():
    P1 = _constant_problem((1.0, 0.5), 2.0, 0.6)
    P2 = _constant_problem((2.0, 1.0), 2.0, 0.6)
    assert tail(P2, P2.data, (0, 0), 0.35) == pytest.approx(2 * tail(P1, P1.data, (0, 0), 0.35),
                                                            rel=1e-12)


def test_tail_rejects_ball_leaving_the_box():
    P = _constant_problem((1.0,), 2.0, 0.5)
    with pytest.raises(DomainError):
        tail(P, P.data, (0.8, 0.0), 0.3)


# -- kernel table -----------------------------------------------------------

def test_kernel_table_weights_and_symmetry():
    g = box_grid(6)
    T = KernelTable.for_grid(g)
    assert len(T.i) == 36 * 35 // 2
    assert np.all(T.i < T.j) and np.all(T.weight > 0)
    np.testing.assert_allclose(T.weight, g.h ** 4 / T.dist ** 2)


def test_refined_table_preserves_far_pairs():
    g = box_grid(6)
    T, R = KernelTable.for_grid(g), KernelTable.for_grid(g, refine=True)
    far = T.dist > 1.5 * g.h
    assert np.sum(R.weight[R.dist > 1.5 * g.h]) >= np.sum(T.weight[far])
    assert len(R.i) > len(T.i)


def test_kernel_table_cache_round_trip(tmp_path):
    g = box_grid(6)
    a = KernelTable.for_grid(g, refine=True, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("kernel-*.npz"))) == 1
    b = KernelTable.for_grid(g, refine=True, cache_dir=tmp_path)
    for name in ("i", "j", "dist", "weight"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_energy_is_symmetric_under_pair_relabeling():
    P = random_nonlocal(8, 2, NFunction.power_sum(1.5, 3), 0.5, seed=1)
    v = perturbed(P, 2)
    T = P.table
    swapped = KernelTable(T.j, T.i, T.dist, T.weight, T.size)
    assert pair_energy(P.phi, P.s, swapped, v.flat()) == pytest.approx(
        pair_energy(P.phi, P.s, T, v.flat()), rel=1e-14)


def test_deterministic_mode_is_order_independent():
    P = random_nonlocal(8, 2, NFunction.power(1.5), 0.5, seed=1)
    P.deterministic = True
    v = perturbed(P, 3)
    T = P.table
    perm = np.random.default_rng(0).permutation(len(T.i))
    shuffled = KernelTable(T.i[perm], T.j[perm], T.dist[perm], T.weight[perm], T.size)
    assert pair_energy(P.phi, P.s, shuffled, v.flat(), True) == pair_energy(P.phi, P.s, T, v.flat(), True)


# -- properties -------------------------------------------------------------

def test_flux_is_monotone_on_random_pairs():
    rng = np.random.default_rng(0)
    for phi in (NFunction.power(1.5), NFunction.power(3), NFunction.power_sum(1.5, 3)):
        a = rng.standard_normal((100_000, 3)) * 10.0 ** rng.uniform(-3, 3, (100_000, 1))
        b = rng.standard_normal((100_000, 3)) * 10.0 ** rng.uniform(-3, 3, (100_000, 1))
        inner = np.einsum("ij,ij->i", _flux_rows(phi, a) - _flux_rows(phi, b), a - b)
        scale = np.einsum("ij,ij->i", np.abs(_flux_rows(phi, a)) + np.abs(_flux_rows(phi, b)),
                          np.abs(a) + np.abs(b))
        assert np.all(inner >= -1e-12 * scale)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([NFunction.power(1.5), NFunction.power_sum(2, 4)]),
       st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_energy_is_convex(phi, seed, theta):
    P = random_nonlocal(8, 2, phi, 0.5, seed=0, far=FarField("constant", (0.2, 0.1)))
    v, w = perturbed(P, seed), perturbed(P, seed + 1)
    mix = VectorField(P.grid, theta * v.values + (1 - theta) * w.values)
    ev, ew = nonlocal_energy(P, v), nonlocal_energy(P, w)
    assert nonlocal_energy(P, mix) <= theta * ev + (1 - theta) * ew + 1e-12 * max(ev, ew, 1.0)
