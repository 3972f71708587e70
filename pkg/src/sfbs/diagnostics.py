"""Run traces, Fejér and summability monitors, and trace export.

A :class:`RunTrace` holds one scalar record per iteration plus thinned
state snapshots. Column conventions used by the engines:

``n, lambda, gamma``
    iteration index and the parameters used by the step taken from ``x_n``.
``residual``
    fixed-point residual ``||x - J(x - gamma B x)||`` with the exact ``B``.
``grad_error``
    ``||u_n - B x_n||`` (NaN on the final row, where no step is taken).
``dist_z{k}``
    distance from ``x_n`` to the k-th reference solution.
``s1_z{k}``, ``s2_z{k}``
    summands ``lambda_n ||B x_n - B z||^2`` and
    ``lambda_n ||x_n - gamma_n B x_n - J(x_n - gamma_n B x_n) + gamma_n B z||^2``.
``relax_term``
    ``lambda_n (1 - lambda_n) ||t_n - x_n||^2``, a one-path surrogate for the
    conditional quantity (labelled as such in reports).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MissingAuditError, StructuralError

__all__ = [
    "RunTrace",
    "FejerReport",
    "SeriesReport",
    "SummabilityReport",
    "fejer_monitor",
    "fejer_from_distances",
    "realized_error_budget",
    "summability_report",
    "tail_fraction",
    "export_trace",
    "import_trace",
    "TRACE_HEADER",
]

TRACE_HEADER = "# sfbs-trace v1"
TAIL_LIMIT = 0.1


class RunTrace:
    """Per-iteration scalar records plus thinned snapshots of the state."""

    def __init__(self, columns, seed=None, config_digest=None, z_refs=None, meta=None):
        columns = list(columns)
        if not columns or columns[0] != "n":
            columns = ["n"] + [c for c in columns if c != "n"]
        self.columns = columns
        self.data = {c: [] for c in columns}
        self.snapshots: dict[int, np.ndarray] = {}
        self.seed = seed
        self.config_digest = config_digest
        self.z_refs = [np.asarray(z, dtype=float) for z in (z_refs or [])]
        self.meta = dict(meta or {})
        self.verdicts: dict = {}

    def __len__(self):
        return len(self.data["n"])

    def append(self, n, **values):
        if self.data["n"] and n <= self.data["n"][-1]:
            raise StructuralError(f"records must be strictly increasing in n (got {n})")
        unknown = set(values) - set(self.columns)
        if unknown:
            raise StructuralError(f"unknown trace columns {sorted(unknown)}")
        self.data["n"].append(int(n))
        for c in self.columns[1:]:
            self.data[c].append(float(values.get(c, math.nan)))

    def set_last(self, **values):
        for c, v in values.items():
            self.data[c][-1] = float(v)

    def snapshot(self, n, x):
        self.snapshots[int(n)] = np.array(x, dtype=float, copy=True)

    def series(self, name) -> np.ndarray:
        if name not in self.data:
            raise MissingAuditError(name)
        return np.asarray(self.data[name], dtype=float if name != "n" else int)

    @property
    def last_n(self):
        return self.data["n"][-1] if self.data["n"] else None

    def final_state(self):
        return self.snapshots[max(self.snapshots)] if self.snapshots else None

    def z_index(self, z_ref) -> int:
        if isinstance(z_ref, (int, np.integer)):
            if not 0 <= z_ref < len(self.z_refs):
                raise MissingAuditError(f"no reference solution #{z_ref}")
            return int(z_ref)
        z = np.asarray(z_ref, dtype=float)
        for k, zk in enumerate(self.z_refs):
            if zk.shape != z.shape:
                raise StructuralError(f"z_ref of shape {z.shape} does not match the trace's {zk.shape}")
            if np.array_equal(zk, z):
                return k
        raise MissingAuditError("reference solution was not audited in this run")


# ---------------------------------------------------------------------------
# Fejér monitor
# ---------------------------------------------------------------------------

@dataclass
class FejerReport:
    z_index: int
    max_increase: float
    cumulative_increase: float
    budget: float
    tolerance: float
    roundoff_steps: int
    passed: bool

    def __str__(self):
        v = "pass" if self.passed else "FAIL"
        return (f"{v}: cumulative increase {self.cumulative_increase:.3e} vs budget "
                f"{self.budget:.3e} (+tol {self.tolerance:.1e}); max step {self.max_increase:.3e}")


def fejer_from_distances(distances, budget=0.0, tolerance=1e-12, z_index=0) -> FejerReport:
    """Audit a distance series ``d_n = ||x_n - z||``.

    Single-step increases no larger than ``tolerance`` are treated as
    rounding; the remaining increases must sum to at most
    ``budget + tolerance``.
    """
    d = np.asarray(distances, dtype=float)
    inc = np.diff(d) if d.size > 1 else np.zeros(0)
    inc = np.where(np.isnan(inc), np.inf, inc)
    positive = inc[inc > 0]
    significant = positive[positive > tolerance]
    cum = float(significant.sum()) if significant.size else 0.0
    mx = float(inc.max()) if inc.size else 0.0
    return FejerReport(z_index, max(mx, 0.0), cum, float(budget), float(tolerance),
                       int(positive.size - significant.size), cum <= budget + tolerance)


def fejer_monitor(trace: RunTrace, z_ref, budget: float = 0.0,
                  tolerance: Optional[float] = None) -> FejerReport:
    """Check that distances to ``z_ref`` only grow within a summable budget.

    ``tolerance`` defaults to ``1e-12 (1 + ||x_0||)``.
    """
    k = trace.z_index(z_ref)
    col = f"dist_z{k}"
    if col not in trace.data:
        raise MissingAuditError(f"trace has no {col} column")
    if tolerance is None:
        x0 = trace.snapshots.get(0)
        tolerance = 1e-12 * (1.0 + (float(np.linalg.norm(x0)) if x0 is not None else 0.0))
    return fejer_from_distances(trace.series(col), budget, tolerance, k)


def realized_error_budget(trace: RunTrace) -> float:
    """Path-wise Fejér budget ``sum_n lambda_n (gamma_n ||u_n - B x_n|| + ||a_n||)``.

    The exact relaxed forward-backward map is nonexpansive and fixes every
    solution, so along one path ``||x_{n+1} - z|| <= ||x_n - z||`` plus the
    n-th term. Valid for Euclidean-distance traces of the forward-backward
    engine. Traces carrying ``step_error`` (the primal-dual runner) use
    ``sum_n lambda_n step_error_n`` instead, the same bound in the ``V`` norm.
    """
    lam = trace.series("lambda")
    if "step_error" in trace.data:
        total = 0.0
        for t in lam * np.nan_to_num(trace.series("step_error"), nan=0.0):
            total += float(t)
        return total
    gam = trace.series("gamma")
    err = np.nan_to_num(trace.series("grad_error"), nan=0.0)
    a = np.nan_to_num(trace.series("perturb_norm"), nan=0.0) if "perturb_norm" in trace.data \
        else np.zeros_like(lam)
    total = 0.0
    for t in lam * (gam * err + a):
        total += float(t)
    return total


# ---------------------------------------------------------------------------
# Summability
# ---------------------------------------------------------------------------

def tail_fraction(terms) -> Optional[float]:
    """Share of ``sum terms`` carried by indices beyond half the length.

    ``None`` when fewer than two terms are available.
    """
    t = np.asarray(terms, dtype=float)
    t = t[~np.isnan(t)]
    if t.size < 2:
        return None
    total = float(t.sum())
    if total == 0.0:
        return 0.0
    half = (t.size - 1) // 2
    return float(t[half + 1:].sum()) / total


@dataclass
class SeriesReport:
    name: str
    total: float
    tail_fraction: Optional[float]
    applicable: bool
    summable: Optional[bool]


@dataclass
class SummabilityReport:
    z_index: int
    series: list = field(default_factory=list)

    @property
    def passed(self) -> Optional[bool]:
        vals = [s.summable for s in self.series if s.applicable]
        if not vals:
            return None
        return all(vals)

    def __str__(self):
        parts = []
        for s in self.series:
            if not s.applicable:
                parts.append(f"{s.name}: n/a")
            else:
                parts.append(f"{s.name}: total {s.total:.3e}, tail {s.tail_fraction:.3f}"
                             f" ({'summable' if s.summable else 'NON-SUMMABLE trend'})")
        return "; ".join(parts)


def summability_report(trace: RunTrace, z_ref, limit: float = TAIL_LIMIT) -> SummabilityReport:
    """Partial sums of the two audited series and their tail fractions."""
    k = trace.z_index(z_ref)
    report = SummabilityReport(k)
    for label, col in (("sum lambda ||Bx - Bz||^2", f"s1_z{k}"),
                       ("sum lambda ||x - gBx - J(x - gBx) + gBz||^2", f"s2_z{k}")):
        if col not in trace.data:
            raise MissingAuditError(
                f"trace has no {col} column; enable exact-field auditing (run.audit = true)")
        terms = trace.series(col)
        frac = tail_fraction(terms)
        total = float(np.nansum(terms))
        if frac is None:
            report.series.append(SeriesReport(label, total, None, False, None))
        else:
            report.series.append(SeriesReport(label, total, frac, True, frac <= limit))
    return report


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def _fmt(v):
    return "%.17g" % v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def export_trace(trace: RunTrace, path, verdicts=None) -> tuple[Path, Path]:
    """Write ``path`` (CSV) and a JSON sidecar next to it.

    Floats are written with 17 significant digits so that
    :func:`import_trace` restores every scalar bit for bit.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(TRACE_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace.columns)
        cols = [trace.data[c] for c in trace.columns]
        for i in range(len(trace)):
            w.writerow([str(cols[0][i])] + [_fmt(col[i]) for col in cols[1:]])
    side = path.with_suffix(".json")
    payload = {
        "schema": TRACE_HEADER[2:],
        "seed": trace.seed,
        "config_digest": trace.config_digest,
        "columns": trace.columns,
        "z_refs": trace.z_refs,
        "meta": trace.meta,
        "verdicts": verdicts if verdicts is not None else trace.verdicts,
        "snapshots": {str(n): x for n, x in sorted(trace.snapshots.items())},
    }
    side.write_text(json.dumps(_jsonable(payload), indent=1, sort_keys=True) + "\n")
    return path, side


def _unjson_float(v):
    return float(v) if isinstance(v, str) else v


def import_trace(path) -> RunTrace:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline().rstrip("\n")
        if first != TRACE_HEADER:
            raise StructuralError(f"{path}: not a trace file (header {first!r})")
        rows = list(csv.reader(fh))
    columns = rows[0]
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    trace = RunTrace(columns, seed=meta.get("seed"), config_digest=meta.get("config_digest"),
                     z_refs=[[_unjson_float(v) for v in z] for z in meta.get("z_refs", [])],
                     meta=meta.get("meta"))
    trace.verdicts = meta.get("verdicts", {})
    for row in rows[1:]:
        trace.data["n"].append(int(row[0]))
        for c, v in zip(columns[1:], row[1:]):
            trace.data[c].append(float(v))
    for n, x in meta.get("snapshots", {}).items():
        trace.snapshots[int(n)] = np.array([_unjson_float(v) for v in x], dtype=float)
    return trace
