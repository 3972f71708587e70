"""Seeded runs, seed sweeps and summaries for configured experiments."""

from __future__ import annotations

import datetime as _dt
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import Experiment, build_experiment
from .diagnostics import (RunTrace, _jsonable, export_trace, fejer_monitor, realized_error_budget,
                          summability_report)
from .engine import run
from .errors import ConditionViolation, DivergenceError
from .primal_dual import check_pd_conditions, pd_run
from .stochastic import Certificate, Clause, admissibility_certificate

__all__ = ["certify", "run_seed", "run_experiment", "EXIT_OK", "EXIT_NOT_CONVERGED",
           "EXIT_CERTIFICATE", "EXIT_DIVERGENCE", "EXIT_CONFIG"]

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_CERTIFICATE = 2
EXIT_DIVERGENCE = 3
EXIT_CONFIG = 4


def certify(exp: Experiment) -> Certificate:
    """Pre-run hypothesis checks for an experiment."""
    if exp.kind == "pd":
        cert = check_pd_conditions(exp.model, exp.schedule, n_check=exp.n_check)
        cert.clauses.extend(_pd_error_clauses(exp))
        return cert
    cert = admissibility_certificate(exp.schedule, exp.problem.theta, exp.oracle,
                                     exp.perturbation, exp.n_check)
    if exp.family is not None:
        g = exp.schedule.gamma(0)
        rep = exp.family.check_drift(gamma=g)
        cert.clauses.append(Clause(
            "drift", "||J_{gamma A_n} x - J_{gamma A} x|| <= alpha_n ||x|| + beta_n (sampled)",
            rep.passed, f"worst margin {rep.worst_margin:.3e} over {rep.samples} points",
            rep.worst_n))
    return cert


def _pd_error_clauses(exp: Experiment) -> list:
    """Summability of perturbations (b), oracle biases (c, d) and variances (e)
    for the primal-dual oracles, reusing the per-oracle forward-backward logic."""
    o = exp.oracles
    out = []
    relabel = {"c": "c", "d": "e"}
    named = [("u", o.u, "c")] + [(f"s_{k + 1}", sk, "d") for k, sk in enumerate(o.s)]
    for name, oracle, bias_clause in named:
        sub = admissibility_certificate(exp.schedule, math.inf, oracle, None, exp.n_check)
        for cl in sub.clauses:
            if cl.clause in relabel:
                label = bias_clause if cl.clause == "c" else relabel[cl.clause]
                out.append(Clause(label, f"[{name}] {cl.name}", cl.passed, cl.detail, cl.witness,
                                  cl.checked_up_to))
    sources = [("b", o.b)] + [(f"c_{k + 1}", ck) for k, ck in enumerate(o.c)]
    for name, src in sources:
        sub = admissibility_certificate(exp.schedule, math.inf, None, src, exp.n_check)
        for cl in sub.clauses:
            if cl.clause == "b":
                out.append(Clause("b", f"[{name}] {cl.name}", cl.passed, cl.detail, cl.witness,
                                  cl.checked_up_to))
    return out


def run_seed(exp: Experiment, seed: int, certificate: Optional[Certificate] = None) -> RunTrace:
    meta = {"name": exp.name, "config": exp.path.name}
    if exp.kind == "fb":
        return run(exp.problem, exp.oracle, exp.perturbation, exp.schedule, exp.stop, seed=seed,
                   x0=exp.x0, family=exp.family, audit=exp.audit, force=True,
                   config_digest=exp.digest, meta=meta, certificate=certificate)
    return pd_run(exp.model, exp.oracles, exp.schedule, exp.stop, seed=seed, x0=exp.x0,
                  v0=exp.v0, z_ref=exp.z_ref, audit=exp.audit, force=True,
                  config_digest=exp.digest, meta=meta, certificate=certificate)


def _verdicts(exp: Experiment, trace: RunTrace) -> dict:
    out = {"final_n": trace.meta["final_n"], "final_residual": trace.meta["final_residual"],
           "convergence_claim": trace.meta["convergence_claim"]}
    if exp.residual_tol is not None:
        out["converged"] = bool(trace.meta["final_residual"] <= exp.residual_tol)
    if trace.z_refs:
        budget = exp.fejer_budget
        if budget == "realized":
            budget = realized_error_budget(trace)
        fj = fejer_monitor(trace, 0, float(budget))
        out["fejer"] = _jsonable(fj)
        out["final_distance"] = float(trace.series("dist_z0")[-1])
        if exp.audit:
            sm = summability_report(trace, 0)
            out["summability"] = {"passed": sm.passed, "series": _jsonable(sm.series)}
    return out


def _seed_job(exp: Experiment, seed: int, certificate: Certificate) -> dict:
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = exp.output_dir / f"trace_seed{seed}.csv"
    try:
        trace = run_seed(exp, seed, certificate)
    except DivergenceError as exc:
        rec = {"seed": seed, "diverged": True, "error": str(exc), "n": exc.n}
        if exc.trace is not None:
            export_trace(exc.trace, csv_path, rec)
            rec["trace"] = csv_path.name
        return rec
    verdicts = _verdicts(exp, trace)
    export_trace(trace, csv_path, verdicts)
    return {"seed": seed, "diverged": False, "trace": csv_path.name, **verdicts}


def _worker(config_path: str, seed: int) -> dict:
    exp = build_experiment(config_path)
    return _seed_job(exp, seed, certify(exp))


def run_experiment(exp: Experiment, workers: Optional[int] = None,
                   timestamp: Optional[str] = None) -> tuple[int, dict]:
    """Run every seed of ``exp``, write traces and ``summary.json``.

    Returns ``(exit status, summary)``.
    """
    cert = certify(exp)
    summary = {"name": exp.name, "config": exp.path.name, "config_digest": exp.digest,
               "seeds": exp.seeds, "certificate": cert.to_dict(), "runs": []}
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    if not cert.passed:
        status = EXIT_CERTIFICATE
        summary["blocked"] = not exp.force
    if cert.passed or exp.force:
        workers = exp.workers if workers is None else workers
        if workers > 1 and len(exp.seeds) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_worker, str(exp.path), s) for s in exp.seeds]
                runs = [f.result() for f in futures]
        else:
            runs = [_seed_job(exp, s, cert) for s in exp.seeds]
        summary["runs"] = runs
        n = len(runs)
        ok_fejer = sum(1 for r in runs if r.get("fejer", {}).get("passed"))
        ok_sum = sum(1 for r in runs if r.get("summability", {}).get("passed"))
        conv = [r.get("converged") for r in runs if "converged" in r]
        summary["pass_rates"] = {
            "fejer": ok_fejer / n, "summability": ok_sum / n,
            "converged": (sum(conv) / len(conv)) if conv else None,
            "diverged": sum(1 for r in runs if r["diverged"]) / n}
        if any(r["diverged"] for r in runs):
            status = max(status, EXIT_DIVERGENCE)
        elif status == EXIT_OK and conv and not all(conv):
            status = EXIT_NOT_CONVERGED
    summary["exit_status"] = status
    summary["metadata"] = {
        "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "sfbs_version": __version__, "python": platform.python_version(),
        "numpy": np.__version__}
    write_json(exp.output_dir / "summary.json", summary)
    return status, summary


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=1, sort_keys=True) + "\n")
