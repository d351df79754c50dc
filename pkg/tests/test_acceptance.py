"""Acceptance criteria 1 to 12, each reported as one pass/fail line at the end of the run."""
import math
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from vecdegiorgi.cli import EXIT_OK, main
from vecdegiorgi.degiorgi import (boundedness_certificate, convex_hull_certificate,
                                  fit_level_constant, iteration_lemma, level_decay_certificate,
                                  poincare_ratio_local, poincare_ratio_nonlocal,
                                  scale_invariance_check)
from vecdegiorgi.grid import Grid, VectorField
from vecdegiorgi.local_energy import (LocalProblem, local_energy, local_energy_gradient,
                                      solve_local)
from vecdegiorgi.nfunc import DomainError, NFunction, verify_nfunc_inequalities
from vecdegiorgi.nonlocal_energy import (FarField, NonlocalProblem, nonlocal_energy,
                                         nonlocal_energy_gradient, solve_nonlocal, tail)
from vecdegiorgi.vecops import verify_jacobian_inequalities, verify_pointwise_inequalities

from instances import (SWEEP_P, SWEEP_S, box_grid, random_boundary_local, random_nonlocal,
                       smooth_local, smooth_nonlocal)
from oracles import dense_quadratic_solve, laplace_solve

FAMILIES = [NFunction.power(1.5), NFunction.power(2), NFunction.power(3),
            NFunction.power_sum(1.5, 3)]
SWEEP_SIZE = 20
REFINE_SPOTS = [(1.5, 0.3, 0), (2.0, 0.5, 1), (3.0, 0.7, 2)]
NONLOCAL_R, LOCAL_R = 0.3, 0.4
C_HAT_CAP = 1e3


def _fd_gradient(energy, P, v, free, eps=1e-6):
    out = np.zeros_like(v.values)
    for idx in zip(*np.nonzero(free)):
        for j in range(v.N):
            plus, minus = v.values.copy(), v.values.copy()
            plus[idx + (j,)] += eps
            minus[idx + (j,)] -= eps
            out[idx + (j,)] = (energy(P, VectorField(P.grid, plus))
                               - energy(P, VectorField(P.grid, minus))) / (2 * eps)
    return out


def _relative_gap(a, b):
    return float(np.max(np.abs(a - b))) / max(float(np.max(np.abs(b))), 1.0)


# -- shared sweep ---------------------------------------------------------------

@pytest.fixture(scope="session")
def sweep():
    """Solved instances of the boundedness sweep with their measured c_hat."""
    runs = []
    for p in SWEEP_P:
        for s in SWEEP_S:
            for seed in range(SWEEP_SIZE):
                P = smooth_nonlocal(p, s, seed)
                u, trace = solve_nonlocal(P)
                rep = boundedness_certificate(P, u, (0, 0), NONLOCAL_R, cap=C_HAT_CAP)
                runs.append({"cell": (p, s), "P": P, "u": u, "r": NONLOCAL_R, "trace": trace,
                             "report": rep})
        for seed in range(SWEEP_SIZE):
            P = smooth_local(p, seed)
            u, trace = solve_local(P)
            rep = boundedness_certificate(P, u, (0, 0), LOCAL_R, cap=C_HAT_CAP)
            runs.append({"cell": (p, None), "P": P, "u": u, "r": LOCAL_R, "trace": trace,
                         "report": rep})
    return runs


# -- criteria -------------------------------------------------------------------

def test_criterion_01_operator_suite(acceptance_line):
    reps = {N: verify_pointwise_inequalities(N, trials=100_000, seed=N) for N in (1, 2, 3, 5)}
    worst = min(min(c.value for c in r.checks) for r in reps.values())
    ok = all(r.passed for r in reps.values())
    acceptance_line(1, "pointwise operator inequalities, 1e5 trials x N in {1,2,3,5}", ok,
                    f"(smallest slack {worst:.3e})")
    assert ok, [r.summary_line() for r in reps.values() if not r.passed]


def test_criterion_02_jacobian_suite(acceptance_line):
    reps = [verify_jacobian_inequalities(n, N, trials=10_000, seed=7 * n + N)
            for n, N in ((1, 2), (2, 2), (2, 3), (3, 2))]
    fd = max(r.check("finite_difference").value for r in reps)
    ok = all(r.passed for r in reps)
    acceptance_line(2, "Jacobian identities and inequalities, 1e4 trials", ok,
                    f"(worst finite-difference gap {fd:.3e})")
    assert ok, [r.summary_line() for r in reps if not r.passed]


def test_criterion_03_nfunc_suite(acceptance_line):
    reps = [verify_nfunc_inequalities(phi, trials=10_000, seed=k) for k, phi in enumerate(FAMILIES)]
    dual = max(r.check("conjugate_duality").value for r in reps)
    ok = all(r.passed for r in reps)
    acceptance_line(3, "N-function growth, conjugate and Young inequalities, 4 families", ok,
                    f"(worst duality error {dual:.3e})")
    assert ok, [r.summary_line() for r in reps if not r.passed]


def test_criterion_04_iteration_lemma(acceptance_line):
    rng = np.random.default_rng(4)
    worst_steps, failures = 0, []
    for _ in range(1000):
        a = math.exp(rng.uniform(0, math.log(10)))
        b = math.exp(rng.uniform(0, math.log(10)))
        alpha = rng.uniform(0.2, 2.0)
        probe = iteration_lemma(a, b, alpha, 0.0, 0)
        res = iteration_lemma(a, b, alpha, 0.9 * probe.threshold, 10_000, eps=1e-8)
        if not (res.converged and res.guaranteed):
            failures.append((a, b, alpha))
        worst_steps = max(worst_steps, res.steps)
    ok = not failures
    acceptance_line(4, "iteration lemma at 90% of threshold, 1e3 cases", ok,
                    f"(most steps {worst_steps})")
    assert ok, failures[:5]


def test_criterion_05_solver_oracles(acceptance_line):
    Pl = random_boundary_local(64, 1, NFunction.power(2), seed=1, tol=1e-13)
    ul, tl = solve_local(Pl)
    local_gap = float(np.max(np.abs(ul.values[..., 0] - laplace_solve(Pl))))
    Pn = random_nonlocal(32, 2, NFunction.power(2), 0.5, seed=9, tol=1e-12)
    un, tn = solve_nonlocal(Pn)
    nonlocal_gap = float(np.max(np.abs(un.values - dense_quadratic_solve(Pn))))

    rng = np.random.default_rng(5)
    fd_local, fd_nonlocal = 0.0, 0.0
    for k in range(10):
        phi = FAMILIES[k % 4]
        n, N = (1, 3) if k % 2 else (2, 2)
        g = Grid.from_extents([0.0] * n, [1.0] * n, 5)
        v = VectorField(g, rng.uniform(-1, 1, g.shape + (N,)))
        P = LocalProblem(g, phi, v)
        fd = _fd_gradient(local_energy, P, v, ~g.boundary_mask())
        fd_local = max(fd_local, _relative_gap(local_energy_gradient(P, v).values, fd))
    for k in range(10):
        P = random_nonlocal(6, 2, FAMILIES[k % 4], SWEEP_S[k % 3], seed=k,
                            far=FarField("constant", (0.4, -0.2)), form=("renormalized", "full")[k % 2])
        v = VectorField(P.grid, P.data.values.copy())
        v.values[P.omega] = rng.uniform(-1, 1, (P.omega.sum(), 2))
        fd = _fd_gradient(nonlocal_energy, P, v, P.omega)
        fd_nonlocal = max(fd_nonlocal, _relative_gap(nonlocal_energy_gradient(P, v).values, fd))

    ok = (tl.converged and tn.converged and local_gap <= 1e-8 and nonlocal_gap <= 1e-8
          and fd_local <= 1e-6 and fd_nonlocal <= 1e-6)
    acceptance_line(5, "solvers match direct linear solves and finite differences", ok,
                    f"(local {local_gap:.2e}, nonlocal {nonlocal_gap:.2e}, "
                    f"fd {max(fd_local, fd_nonlocal):.2e})")
    assert ok


def test_criterion_06_convex_hull(acceptance_line):
    cases = [(NFunction.power(2), 2, 1e-8), (NFunction.power(2), 3, 1e-8)]
    cases += [(NFunction.power(p), N, 1e-3) for p in (1.5, 3.0) for N in (2, 3)]
    worst, sup_excess, reps = 0.0, -math.inf, []
    for k, (phi, N, cap) in enumerate(cases):
        problems = [random_boundary_local(32, N, phi, seed=k, tol=1e-10),
                    random_nonlocal(32, N, phi, 0.5, seed=k, tol=1e-10)]
        for P in problems:
            u, trace = (solve_nonlocal if isinstance(P, NonlocalProblem) else solve_local)(P)
            rep = convex_hull_certificate(P, u, cap=cap)
            reps.append(rep)
            worst = max(worst, rep.check("hull_distance").value)
            free = P.omega if isinstance(P, NonlocalProblem) else ~P.grid.boundary_mask()
            fixed = P.data if isinstance(P, NonlocalProblem) else P.boundary
            data_sup = float(np.max(np.linalg.norm(fixed.values[~free], axis=-1)))
            if isinstance(P, NonlocalProblem):
                data_sup = max(data_sup, P.far.sup_norm(P.grid, N))
            sup_excess = max(sup_excess,
                             float(np.max(np.linalg.norm(u.values[free], axis=-1))) - data_sup)
    ok = all(r.passed for r in reps) and sup_excess <= 1e-8
    acceptance_line(6, "convex hull certificates and sup-norm bound", ok,
                    f"(worst hull distance {worst:.2e}, sup excess {sup_excess:.2e})")
    assert ok, [r.summary_line() for r in reps if not r.passed]


def test_criterion_07_boundedness_sweep(sweep, acceptance_line):
    counts, c_max = {}, 0.0
    for run in sweep:
        if run["cell"][1] is not None:
            counts[run["cell"]] = counts.get(run["cell"], 0) + 1
        c_max = max(c_max, run["report"].measured["c_hat"])
    all_pass = all(run["report"].passed and run["trace"].converged for run in sweep)
    full = len(counts) == 9 and min(counts.values()) >= 20

    ratios = []
    for p, s, seed in REFINE_SPOTS:
        c = []
        for m in (12, 24):
            P = smooth_nonlocal(p, s, seed, m=m)
            u, _ = solve_nonlocal(P)
            c.append(boundedness_certificate(P, u, (0, 0), NONLOCAL_R).measured["c_hat"])
        ratios.append(c[1] / c[0])
    stable = all(0.5 <= q <= 2.0 for q in ratios)
    ok = all_pass and full and math.isfinite(c_max) and c_max <= C_HAT_CAP and stable
    acceptance_line(7, f"boundedness sweep over {len(sweep)} solved instances", ok,
                    f"(max c_hat {c_max:.3g}, refinement ratios "
                    f"{', '.join(f'{q:.3f}' for q in ratios)})")
    assert ok


def test_criterion_08_tail_closed_form(acceptance_line):
    c = np.array([0.6, -0.8, 0.5])
    g = box_grid(16)
    omega = np.max(np.abs(g.coords()), axis=-1) < 0.5
    worst = 0.0
    for s in SWEEP_S:
        for p in SWEEP_P:
            P = NonlocalProblem(g, omega, s, NFunction.power(p), VectorField.constant(g, tuple(c)),
                                FarField("constant", tuple(c)))
            expected = np.linalg.norm(c) * (2 * math.pi / (s * p)) ** (1 / (p - 1))
            worst = max(worst, abs(tail(P, P.data, (0.1, -0.05), 0.3) / expected - 1))
    unit = NonlocalProblem(g, omega, 0.5, NFunction.power(2), VectorField.constant(g, 1.0),
                           FarField("constant", (1.0,)))
    two_pi = abs(tail(unit, unit.data, (0, 0), 0.4) / (2 * math.pi) - 1)
    ok = worst <= 1e-3 and two_pi <= 1e-3
    acceptance_line(8, "tail of constant data matches the closed form, 9 (s, p) cells", ok,
                    f"(worst relative error {max(worst, two_pi):.2e})")
    assert ok


def test_criterion_09_scale_invariance(acceptance_line):
    reps = []
    for p, s, seed in REFINE_SPOTS:
        P = smooth_nonlocal(p, s, seed)
        u, _ = solve_nonlocal(P)
        reps.append(scale_invariance_check(P, u, (0, 0), NONLOCAL_R, 2.0, tol=1e-8))
    worst = max(c.value for r in reps for c in r.checks)
    ok = all(r.passed for r in reps)
    acceptance_line(9, "t = 2 rescaling on 3 instances", ok, f"(worst check {worst:.2e})")
    assert ok, [r.summary_line() for r in reps if not r.passed]


def test_criterion_10_poincare(acceptance_line):
    rng = np.random.default_rng(10)
    g = Grid.from_extents([-1, -1], [1, 1], 17)
    ratios, reps = [], []
    for k in range(50):
        v = VectorField(g, rng.uniform(-1, 1, g.shape + (2,)))
        reps.append(poincare_ratio_local(v, FAMILIES[k % 4], (0, 0), 0.5))
    gn = Grid.from_extents([-1, -1], [1, 1], 13)
    for s in SWEEP_S:
        for alpha in (0.0, s / 2, 0.9 * s):
            for k in range(50):
                v = VectorField(gn, rng.uniform(-1, 1, gn.shape + (2,)))
                reps.append(poincare_ratio_nonlocal(v, FAMILIES[k % 4], (0, 0), 0.5, s, alpha))
    ratios = [r.measured["ratio"] for r in reps]
    rejected = 0
    for s in SWEEP_S:
        try:
            poincare_ratio_nonlocal(VectorField(gn, rng.uniform(-1, 1, gn.shape)), FAMILIES[0],
                                    (0, 0), 0.5, s, s)
        except DomainError:
            rejected += 1
    const = [poincare_ratio_local(VectorField.constant(g, [1.0, -2.0]), FAMILIES[1], (0, 0), 0.5),
             poincare_ratio_nonlocal(VectorField.constant(gn, [3.0]), FAMILIES[2], (0, 0), 0.5,
                                     0.5, 0.25)]
    ok = (all(r.passed for r in reps) and all(0 < q < math.inf for q in ratios)
          and rejected == len(SWEEP_S) and all(r.status == "degenerate pass" for r in const))
    acceptance_line(10, f"Poincare ratios finite on {len(reps)} fields", ok,
                    f"(largest ratio {max(ratios):.3g}, alpha = s rejected {rejected}/3)")
    assert ok


def test_criterion_11_level_decay(sweep, acceptance_line):
    eps_hat = fit_level_constant(run["report"].measured["c_hat"] for run in sweep)
    worst, last_nonzero, reps = 0.0, 0, []
    for run in sweep:
        rep = level_decay_certificate(run["P"], run["u"], (0, 0), run["r"], eps_hat, K=20)
        U = rep.measured["U"]
        reps.append(rep)
        if U[0] > 0:
            worst = max(worst, U[20] / U[0])
        last_nonzero = max(last_nonzero, max(k for k, x in enumerate(U) if x > 0 or k == 0))
    ok = all(r.passed for r in reps)
    acceptance_line(11, f"level sequence decay on {len(reps)} instances", ok,
                    f"(eps_hat {eps_hat:.3g}, worst U_20/U_0 {worst:.2e}, "
                    f"last nonzero U_k at k = {last_nonzero})")
    assert ok, [r.summary_line() for r in reps if not r.passed][:5]


def test_criterion_12_determinism(tmp_path, acceptance_line):
    names = ("nonlocal_power_decay.json", "local_cubic_vector.json")
    files = ("report.json", "summary.csv", "solution.odgf", "solution.csv", "trace.csv")
    same = True
    for name in names:
        path = Path(str(resources.files("vecdegiorgi").joinpath("scenarios", name)))
        for tag in ("a", "b"):
            assert main(["run", str(path), "--out", str(tmp_path / name / tag), "--deterministic",
                         "--seed", "12"]) == EXIT_OK
        same &= all((tmp_path / name / "a" / f).read_bytes() == (tmp_path / name / "b" / f).read_bytes()
                    for f in files)
    acceptance_line(12, "deterministic runs give byte-identical outputs", same,
                    f"({len(names)} scenarios x {len(files)} files)")
    assert same
