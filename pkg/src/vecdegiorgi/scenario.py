"""Scenario files: validation, problem construction and certificate runs."""
from __future__ import annotations

import ast
import json
import math
import operator
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import degiorgi as dg
from .grid import Grid, VectorField, write_field_binary, write_field_csv
from .local_energy import LocalProblem, el_residual_local, local_energy, solve_local
from .nfunc import DomainError, NFunction, verify_nfunc_inequalities
from .nonlocal_energy import (FarField, NonlocalProblem, el_residual_nonlocal, nonlocal_energy,
                              solve_nonlocal)
from .report import CertificateReport, Check, emit_report
from .solver import SolveTrace
from .vecops import verify_jacobian_inequalities, verify_pointwise_inequalities

__all__ = ["ScenarioError", "Scenario", "load_scenario", "run_scenario", "evaluate_expression",
           "schema"]


class ScenarioError(ValueError):
    """Invalid scenario; ``where`` names the offending field, ``line`` its source line."""

    def __init__(self, msg: str, where: str = "", line: int | None = None):
        super().__init__(msg)
        self.where = where
        self.line = line

    def __str__(self):
        loc = self.where or "<root>"
        if self.line is not None:
            loc += f" (line {self.line})"
        return f"{loc}: {self.args[0]}"


def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("scenario.schema.json").read_text())


# ----------------------------------------------------------- expressions

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
          "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh}
_CONSTS = {"pi": math.pi, "e": math.e}


def evaluate_expression(expr: str, coords: np.ndarray) -> np.ndarray:
    """Evaluate an arithmetic expression in x (and y) over node coordinates."""
    names = dict(_CONSTS)
    names["x"] = coords[..., 0]
    if coords.shape[-1] > 1:
        names["y"] = coords[..., 1]
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ScenarioError(f"cannot parse expression {expr!r}") from exc

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id in names:
            return names[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand))
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ScenarioError(f"unsupported element in expression {expr!r}")

    with np.errstate(all="ignore"):
        out = np.broadcast_to(np.asarray(ev(tree), float), coords.shape[:-1]).copy()
    if not np.all(np.isfinite(out)):
        raise ScenarioError(f"expression {expr!r} is not finite on the grid")
    return out


# ----------------------------------------------------------- loading

def _line_of(text: str, path) -> int | None:
    """Best-effort source line of a JSON path: the first line naming its last key."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    needle = f'"{keys[-1]}"'
    for k, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return k
    return None


def _dotted(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


@dataclass
class Scenario:
    config: dict
    source: str = ""
    path: Path | None = None

    @property
    def name(self) -> str:
        return self.config["name"]

    @property
    def problem(self) -> dict:
        return self.config["problem"]

    @property
    def certificates(self) -> list[dict]:
        return self.config.get("certificates", [])


def load_scenario(path) -> Scenario:
    """Read and validate a scenario; raises ScenarioError or OSError."""
    text = Path(path).read_text()
    return parse_scenario(text, Path(path))


def parse_scenario(text: str, path: Path | None = None) -> Scenario:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, "<json>", exc.lineno) from exc
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ScenarioError(err.message, _dotted(err.absolute_path), _line_of(text, err.absolute_path))
    sc = Scenario(cfg, text, path)
    _semantic_checks(sc)
    return sc


def _semantic_checks(sc: Scenario):
    """Cross-field rules the schema cannot express."""
    prob = sc.problem
    text = sc.source

    def fail(msg, path):
        raise ScenarioError(msg, _dotted(path), _line_of(text, path))

    g = prob["grid"]
    if not (len(g["lower"]) == len(g["upper"])):
        fail("lower and upper must have the same length", ["problem", "grid", "upper"])
    if any(u <= l for l, u in zip(g["lower"], g["upper"])):
        fail("upper must exceed lower on every axis", ["problem", "grid", "upper"])
    try:
        NFunction.from_spec(prob["phi"])
    except (DomainError, KeyError, TypeError) as exc:
        fail(f"invalid N-function: {exc}", ["problem", "phi"])
    if prob["kind"] == "nonlocal" and "s" not in prob:
        fail("nonlocal problems need s", ["problem", "s"])
    s = prob.get("s")
    for k, cert in enumerate(sc.certificates):
        where = ["certificates", k]
        name = cert["name"]
        if name == "poincare" and prob["kind"] == "nonlocal":
            alpha = cert.get("alpha", 0.0)
            if not alpha < s:
                fail(f"alpha = {alpha} must be smaller than s = {s}", where + ["alpha"])
        if name == "caccioppoli":
            for key in ("center", "lam", "Lam", "r", "R"):
                if key not in cert:
                    fail(f"caccioppoli needs {key}", where)
            if not cert["lam"] < cert["Lam"]:
                fail("need lam < Lam", where + ["Lam"])
            if not cert["r"] < cert["R"]:
                fail("need r < R", where + ["R"])
        if name in ("boundedness", "level_sequence", "level_decay", "poincare",
                    "scale_invariance") and ("center" not in cert or "r" not in cert):
            fail(f"{name} needs center and r", where)
        if name == "level_sequence" and "lam_inf" not in cert:
            fail("level_sequence needs lam_inf", where)
        if name == "scale_invariance" and prob["kind"] != "nonlocal":
            fail("scale_invariance applies to nonlocal problems", where)
        if name == "iteration_lemma" and "alpha" in cert and not cert["alpha"] > 0:
            fail("alpha must be positive", where + ["alpha"])


# ----------------------------------------------------------- construction

def _grid(prob: dict) -> Grid:
    g = prob["grid"]
    lower, upper, m = np.asarray(g["lower"], float), np.asarray(g["upper"], float), g["nodes"]
    if prob["kind"] == "local":
        return Grid.from_extents(lower, upper, m)
    hs = (upper - lower) / m
    if not np.allclose(hs, hs[0], rtol=1e-12, atol=0):
        raise ScenarioError("box must have equal side lengths", "problem.grid")
    return Grid((m,) * len(lower), float(hs[0]), tuple(lower + hs[0] / 2))


def _data_values(prob: dict, grid: Grid, rng) -> np.ndarray:
    d = prob["data"]
    N = prob.get("N", len(d.get("value", d.get("components", [0.0]))))
    shape = grid.shape + (N,)
    if d["kind"] == "constant":
        c = np.asarray(d.get("value", [0.0] * N), float)
        if c.size != N:
            raise ScenarioError("constant value has the wrong length", "problem.data.value")
        return np.broadcast_to(c, shape).copy()
    if d["kind"] == "random":
        return rng.uniform(d.get("low", -1.0), d.get("high", 1.0), size=shape)
    comps = d["components"]
    if len(comps) != N:
        raise ScenarioError("number of expressions differs from N", "problem.data.components")
    coords = grid.coords()
    return np.stack([evaluate_expression(c, coords) for c in comps], axis=-1)


def _omega(prob: dict, grid: Grid) -> np.ndarray:
    lo, hi = np.asarray(prob["grid"]["lower"], float), np.asarray(prob["grid"]["upper"], float)
    spec = prob.get("omega", {"shape": "box"})
    center = np.asarray(spec.get("center", (lo + hi) / 2), float)
    size = spec.get("size", float(np.min(hi - lo)) / 4)
    x = grid.coords() - center
    if spec["shape"] == "box":
        return np.max(np.abs(x), axis=-1) < size
    return np.linalg.norm(x, axis=-1) < size


def build_problem(sc: Scenario, seed: int, deterministic: bool):
    prob = sc.problem
    grid = _grid(prob)
    phi = NFunction.from_spec(prob["phi"])
    rng = np.random.default_rng(seed)
    vals = _data_values(prob, grid, rng)
    solver = prob.get("solver", {})
    opts = dict(tol=solver.get("tol", 1e-8), max_iter=solver.get("max_iter", 100_000),
                deterministic=deterministic, method=solver.get("method", "cg"))
    try:
        if prob["kind"] == "local":
            return LocalProblem(grid, phi, VectorField(grid, vals), eps_A=solver.get("eps_A", 0.0),
                                **opts)
        far = FarField.from_spec(prob.get("far_field"))
        return NonlocalProblem(grid, _omega(prob, grid), prob["s"], phi, VectorField(grid, vals), far,
                               form=prob.get("form", "renormalized"),
                               refine=prob.get("refine", False), **opts)
    except DomainError as exc:
        raise ScenarioError(str(exc), "problem") from exc


def solve(P):
    if isinstance(P, LocalProblem):
        return solve_local(P)
    return solve_nonlocal(P)


# ----------------------------------------------------------- certificates

def _el_residual_report(P, u) -> CertificateReport:
    if isinstance(P, LocalProblem):
        res, energy = el_residual_local(P, u), local_energy(P, u)
    else:
        res, energy = el_residual_nonlocal(P, u), nonlocal_energy(P, u)
    cap = P.tol * (1 + abs(energy))
    return CertificateReport("el_residual", [Check("residual", res, cap)],
                             {"residual": res, "energy": energy}, {"tol": P.tol})


def _iteration_report(cert: dict) -> CertificateReport:
    a, b, alpha = cert.get("a", 1.0), cert.get("b", 2.0), cert.get("alpha", 1.0)
    thr = math.exp(-math.log(a) / alpha - math.log(b) * (1 / alpha + 1 / alpha ** 2))
    W0 = cert.get("W0_fraction", 0.9) * thr
    res = dg.iteration_lemma(a, b, alpha, W0, cert.get("maxk", 10_000), eps=1e-8)
    broken = 1.0 if (res.guaranteed and not res.converged) else 0.0
    return CertificateReport("iteration_lemma", [Check("guarantee_violation", broken, 0.0)],
                             {"converged": res.converged, "guaranteed": res.guaranteed,
                              "threshold": thr, "steps": res.steps,
                              "trajectory_head": res.trajectory[:10]},
                             {"a": a, "b": b, "alpha": alpha, "W0": W0})


def run_certificate(cert: dict, P, u, seed: int) -> tuple[CertificateReport, dict]:
    """Return the report and a mapping of plot-data name -> rows."""
    name = cert["name"]
    plots = {}
    s = getattr(P, "s", None)
    cap = cert.get("cap")
    kw = {} if cap is None else {"cap": cap}
    if name == "convex_hull":
        rep = dg.convex_hull_certificate(P, u, **kw)
    elif name == "boundedness":
        rep = dg.boundedness_certificate(P, u, cert["center"], cert["r"], **kw)
    elif name == "caccioppoli":
        fn = dg.caccioppoli_ratio_local if isinstance(P, LocalProblem) else dg.caccioppoli_ratio_nonlocal
        rep = fn(P, u, cert["center"], cert["lam"], cert["Lam"], cert["r"], cert["R"], **kw)
    elif name == "level_sequence":
        sched = dg.LevelSchedule(tuple(cert["center"]), cert["r"], cert["lam_inf"], cert.get("K", 20))
        rep = dg.level_sequence_certificate(u, sched, P.phi, s)
        plots["level_sequence"] = [("k", "U_k")] + list(enumerate(rep.measured["U"].tolist()))
    elif name == "level_decay":
        rep = dg.level_decay_certificate(P, u, cert["center"], cert["r"], cert.get("eps_hat", 0.5),
                                         cert.get("K", 20))
        U = np.asarray(rep.measured["U"]).tolist()
        plots["level_decay"] = [("k", "U_k")] + list(enumerate(U))
    elif name == "poincare":
        if isinstance(P, LocalProblem):
            rep = dg.poincare_ratio_local(u, P.phi, cert["center"], cert["r"])
        else:
            rep = dg.poincare_ratio_nonlocal(u, P.phi, cert["center"], cert["r"], s,
                                             cert.get("alpha", 0.0))
    elif name == "scale_invariance":
        rep = dg.scale_invariance_check(P, u, cert["center"], cert["r"], cert.get("t", 2.0))
    elif name == "pointwise_ops":
        rep = verify_pointwise_inequalities(cert.get("N", 3), cert.get("trials", 100_000), seed)
    elif name == "jacobian_ops":
        rep = verify_jacobian_inequalities(cert.get("n", 2), cert.get("N", 3),
                                           cert.get("trials", 10_000), seed)
    elif name == "nfunc_inequalities":
        rep = verify_nfunc_inequalities(P.phi, cert.get("trials", 10_000), seed)
    elif name == "iteration_lemma":
        rep = _iteration_report(cert)
    elif name == "el_residual":
        rep = _el_residual_report(P, u)
    else:  # pragma: no cover - the schema enumerates names
        raise ScenarioError(f"unknown certificate {name!r}", "certificates")
    return rep, plots


# ----------------------------------------------------------- run

@dataclass
class RunResult:
    reports: list[CertificateReport]
    field: VectorField | None
    trace: SolveTrace | None
    files: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def _write_rows(path: Path, rows):
    lines = [",".join(str(c) if isinstance(c, str) else repr(float(c)) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_trace(trace: SolveTrace, out: Path) -> Path:
    rows = [("iteration", "energy", "residual")]
    rows += [(float(k), e, r) for k, (e, r) in enumerate(zip(trace.energies, trace.residuals))]
    return _write_rows(out / "trace.csv", rows)


def run_scenario(sc: Scenario, out_dir, seed: int | None = None,
                 deterministic: bool | None = None) -> RunResult:
    """Solve, certify and write every artifact into ``out_dir``."""
    seed = sc.config.get("seed", 0) if seed is None else seed
    if deterministic is None:
        deterministic = sc.config.get("deterministic", False)
    P = build_problem(sc, seed, deterministic)
    u, trace = solve(P)
    reports, plots = [], {}
    for cert in sc.certificates:
        try:
            rep, extra = run_certificate(cert, P, u, seed)
        except DomainError as exc:
            raise ScenarioError(str(exc), f"certificates ({cert['name']})") from exc
        reports.append(rep)
        plots.update(extra)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"scenario": sc.name, "seed": seed, "deterministic": deterministic,
            "solver": {"iterations": trace.iterations, "converged": trace.converged,
                       "message": trace.message,
                       "final_residual": trace.residuals[-1] if trace.residuals else None}}
    files = emit_report(reports, out, extra=meta)
    files.append(write_field_binary(u, out / "solution.odgf"))
    files.append(write_field_csv(u, out / "solution.csv"))
    files.append(write_trace(trace, out))
    for name, rows in sorted(plots.items()):
        files.append(_write_rows(out / f"{name}.csv", rows))
    return RunResult(reports, u, trace, files)
