"""Certificate reports and their on-disk formats (report.json, summary.csv)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = ["Check", "CertificateReport", "emit_report", "load_reports", "merge_reports", "digest"]


@dataclass
class Check:
    """One measured quantity compared against a cap.

    ``sense`` is ``"le"`` (value <= cap) or ``"ge"`` (value >= cap).
    """

    name: str
    value: float
    cap: float
    sense: str = "le"

    @property
    def ok(self) -> bool:
        if math.isnan(self.value):
            return False
        return bool(self.value <= self.cap if self.sense == "le" else self.value >= self.cap)

    def margin(self) -> float:
        """Signed distance to the cap, positive when satisfied."""
        if math.isnan(self.value):
            return -math.inf
        d = self.cap - self.value if self.sense == "le" else self.value - self.cap
        return d / max(abs(self.cap), abs(self.value), 1e-300)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": _clean(self.value), "cap": _clean(self.cap),
                "sense": self.sense, "pass": self.ok}


@dataclass
class CertificateReport:
    name: str
    checks: list[Check] = field(default_factory=list)
    measured: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, Any] = field(default_factory=dict)
    witness: dict[str, Any] | None = None
    degenerate: bool = False

    @property
    def passed(self) -> bool:
        return bool(all(c.ok for c in self.checks))

    @property
    def status(self) -> str:
        if not self.passed:
            return "fail"
        return "degenerate pass" if self.degenerate else "pass"

    def binding(self) -> Check | None:
        """The check closest to (or furthest beyond) its cap."""
        if not self.checks:
            return None
        return min(self.checks, key=lambda c: c.margin())

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs_digest": digest(self.inputs),
            "inputs": _clean(self.inputs),
            "measured": _clean(self.measured),
            "checks": [c.to_dict() for c in self.checks],
            "witness": _clean(self.witness),
            "status": self.status,
            "pass": self.passed,
        }

    def summary_line(self) -> str:
        b = self.binding()
        if b is None:
            return f"{self.name}: {self.status}"
        op = "<=" if b.sense == "le" else ">="
        return f"{self.name}: {self.status.upper()} ({b.name} = {b.value:.6g} {op} {b.cap:.6g})"


def _clean(obj):
    """Make an object JSON-serializable with deterministic content."""
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    return str(obj)


def digest(obj) -> str:
    blob = json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _summary_rows(reports):
    rows = []
    for r in reports:
        b = r.binding()
        rows.append([r.name,
                     "" if b is None else repr(float(b.value)),
                     "" if b is None else repr(float(b.cap)),
                     "true" if r.passed else "false"])
    return rows


def render_report(reports: list[CertificateReport], extra: dict | None = None) -> str:
    doc = {"certificates": [r.to_dict() for r in reports],
           "pass": all(r.passed for r in reports)}
    if extra:
        doc.update(_clean(extra))
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def render_summary(reports: list[CertificateReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "cap", "pass"])
    w.writerows(_summary_rows(reports))
    return buf.getvalue()


def emit_report(reports: list[CertificateReport], out_dir, extra: dict | None = None) -> list[Path]:
    """Write report.json and summary.csv into ``out_dir``.

    Output is a pure function of the reports, so identical inputs give
    byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rp = out / "report.json"
    sp = out / "summary.csv"
    rp.write_text(render_report(reports, extra))
    sp.write_text(render_summary(reports))
    return [rp, sp]


def load_reports(path) -> list[CertificateReport]:
    """Rebuild reports from a report.json file."""
    doc = json.loads(Path(path).read_text())
    out = []
    for c in doc.get("certificates", []):
        checks = [Check(k["name"], _num(k["value"]), _num(k["cap"]), k["sense"]) for k in c["checks"]]
        out.append(CertificateReport(name=c["name"], checks=checks, measured=c.get("measured", {}),
                                     inputs=c.get("inputs", {}), witness=c.get("witness"),
                                     degenerate=c.get("status") == "degenerate pass"))
    return out


def _num(v):
    return float(v)


def merge_reports(dirs, out_dir) -> list[Path]:
    reports = []
    for d in dirs:
        reports.extend(load_reports(Path(d) / "report.json"))
    return emit_report(reports, out_dir)
