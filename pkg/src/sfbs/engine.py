"""Relaxed, perturbed stochastic forward-backward iteration.

One step from ``x_n``::

    u_n     = oracle estimate of B x_n
    t_n     = J_{gamma_n A}(x_n - gamma_n u_n)
    y_n     = t_n + a_n
    x_{n+1} = x_n + lambda_n (y_n - x_n)

The gradient estimate is taken before the resolvent and ``B`` is never
re-evaluated at ``y_n``. A varying-resolvent run replaces ``A`` by ``A_n``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diagnostics import RunTrace
from .errors import ConditionViolation, DivergenceError, ParameterError
from .operators import (CocoerciveMap, DemiregularityFlag, ProxFunction, ResolventOperator,
                        resolvent)
from .spaces import SpdMetric
from .stochastic import (Constant, IterationSchedule, PerturbationSource, SampleLedger,
                         admissibility_certificate)

__all__ = [
    "FbProblem",
    "FbState",
    "VaryingResolventFamily",
    "DriftReport",
    "moreau_l1_family",
    "StoppingRule",
    "relax",
    "fb_step",
    "fb_step_varying",
    "residual",
    "run",
    "DIVERGENCE_BOUND",
]

DIVERGENCE_BOUND = 1e12


@dataclass(eq=False)
class FbProblem:
    """Find ``x`` with ``0 in A x + B x``.

    ``metric`` (optional) is the SPD operator whose norm is used for
    distances and audited series; the product-space embedding of the
    primal-dual method sets it to ``V``.
    """

    A: ResolventOperator
    B: CocoerciveMap
    z_ref: list = field(default_factory=list)
    demiregularity: DemiregularityFlag = field(default_factory=DemiregularityFlag)
    metric: Optional[SpdMetric] = None
    objective: Optional[Callable] = None
    name: str = "fb"

    def __post_init__(self):
        self.z_ref = [np.asarray(z, dtype=float) for z in self.z_ref]

    @property
    def dim(self):
        return self.B.dim

    @property
    def theta(self):
        return self.B.theta

    def norm(self, x) -> float:
        if self.metric is None:
            return float(np.linalg.norm(x))
        return float(math.sqrt(max(float(x @ self.metric.apply(x)), 0.0)))


@dataclass
class FbState:
    n: int
    x: np.ndarray
    last_y: Optional[np.ndarray] = None
    ledger: Optional[SampleLedger] = None


# ---------------------------------------------------------------------------
# Varying resolvents
# ---------------------------------------------------------------------------

@dataclass
class DriftReport:
    passed: bool
    samples: int
    worst_margin: float
    worst_n: Optional[int]


@dataclass(eq=False)
class VaryingResolventFamily:
    """``n -> A_n`` approximating ``base`` with
    ``||J_{gamma A_n} x - J_{gamma A} x|| <= alpha_n ||x|| + beta_n``."""

    rule: Callable
    base: ResolventOperator
    alpha: object = Constant(0.0)
    beta: object = Constant(0.0)

    def at(self, n) -> ResolventOperator:
        return self.rule(n)

    def check_drift(self, gamma=1.0, n_values=range(0, 30), samples=200, rng_seed=0,
                    scale=3.0, slack=1e-12) -> DriftReport:
        """Spot-check the declared drift bound on sampled points."""
        rng = np.random.default_rng(rng_seed)
        dim = self.base.dim
        worst, worst_n, count = math.inf, None, 0
        for n in n_values:
            A_n = self.at(n)
            for _ in range(samples):
                x = scale * rng.standard_normal(dim)
                d = np.linalg.norm(resolvent(A_n, x, gamma) - resolvent(self.base, x, gamma))
                margin = self.alpha(n) * np.linalg.norm(x) + self.beta(n) - d
                count += 1
                if margin < worst:
                    worst, worst_n = float(margin), n
        return DriftReport(worst >= -slack, count, worst, worst_n)


def moreau_l1_family(weight, rho, dim) -> VaryingResolventFamily:
    """``A_n`` = subdifferential of the Moreau envelope (parameter
    ``rho(n)``) of ``weight ||.||_1``, approximating ``A`` = subdifferential
    of ``weight ||.||_1``.

    Per coordinate the two proxes differ by at most
    ``weight rho gamma / (gamma + rho) <= weight rho``, hence
    ``alpha_n = 0`` and ``beta_n = sqrt(dim) weight rho(n)``.
    """
    base = ResolventOperator.subdifferential(ProxFunction.l1(weight), dim)

    def rule(n):
        return ResolventOperator.subdifferential(ProxFunction.smoothed_l1(weight, rho(n)), dim)

    scale = math.sqrt(dim) * weight
    beta = _scaled_rule(rho, scale)
    return VaryingResolventFamily(rule, base, Constant(0.0), beta)


def _scaled_rule(rule, c):
    from .stochastic import CustomRule, Geometric, Power
    if isinstance(rule, Geometric):
        return Geometric(c * rule.scale, rule.ratio)
    if isinstance(rule, Power):
        return Power(c * rule.scale, rule.exponent, rule.offset)
    if isinstance(rule, Constant):
        return Constant(c * rule.value)
    return CustomRule(lambda n: c * rule(n), name=f"{c:g}*rho")


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

@dataclass
class StoppingRule:
    max_iters: int = 1000
    residual_tol: float = 0.0
    thin: int = 1

    def __post_init__(self):
        if self.max_iters < 0:
            raise ParameterError("max_iters must be >= 0")
        if self.thin < 1:
            raise ParameterError("thinning interval must be >= 1")


def relax(x, y, lam):
    """``x + lam (y - x)``; returns ``y`` itself when ``lam == 1`` so that an
    unrelaxed step is exactly the inner point."""
    if lam == 1.0:
        return np.array(y, dtype=float, copy=True)
    return x + lam * (y - x)


def _guard(n, x, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite value at iteration {n}", n, np.array(x, copy=True))
    nx = float(np.linalg.norm(arrays[-1]))
    if nx > DIVERGENCE_BOUND:
        raise DivergenceError(f"||x|| = {nx:.3e} exceeds {DIVERGENCE_BOUND:g} at iteration {n}",
                              n, np.array(x, copy=True))


@dataclass
class _StepInfo:
    u: np.ndarray
    t: np.ndarray
    lam: float
    gamma: float
    a_norm: float = 0.0


def _step(state: FbState, A: ResolventOperator, oracle, perturb, sched) -> tuple:
    n, x = state.n, state.x
    lam, gam = sched.lam(n), sched.gamma(n)
    u = oracle.estimate(x, n, state.ledger)
    t = resolvent(A, x - gam * u, gam)
    if perturb is None or perturb.kind == "zero":
        y, a_norm = t, 0.0
    else:
        a = perturb.draw(n, x.size, state.ledger)
        y, a_norm = t + a, float(np.linalg.norm(a))
    x_new = relax(x, y, lam)
    _guard(n, x, u, y, x_new)
    return FbState(n + 1, x_new, y, state.ledger), _StepInfo(u, t, lam, gam, a_norm)


def fb_step(state: FbState, prob: FbProblem, oracle, perturb: Optional[PerturbationSource],
            sched: IterationSchedule) -> FbState:
    """One relaxed forward-backward step with resolvent of ``prob.A``."""
    return _step(state, prob.A, oracle, perturb, sched)[0]


def fb_step_varying(state: FbState, prob: FbProblem, family: VaryingResolventFamily, oracle,
                    perturb: Optional[PerturbationSource], sched: IterationSchedule) -> FbState:
    """As :func:`fb_step` with ``J_{gamma_n A_n}`` in place of ``J_{gamma_n A}``."""
    return _step(state, family.at(state.n), oracle, perturb, sched)[0]


def residual(prob: FbProblem, x, gamma: float) -> float:
    """Fixed-point residual ``||x - J_{gamma A}(x - gamma B x)||`` with the exact ``B``."""
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    x = np.asarray(x, dtype=float)
    return float(np.linalg.norm(x - resolvent(prob.A, x - gamma * prob.B(x), gamma)))


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def trace_columns(prob: FbProblem, audit: bool = True) -> list:
    cols = ["n", "lambda", "gamma", "residual", "grad_error", "perturb_norm", "relax_term"]
    if prob.objective is not None:
        cols.append("objective")
    for k in range(len(prob.z_ref)):
        cols.append(f"dist_z{k}")
        if audit:
            cols += [f"s1_z{k}", f"s2_z{k}"]
    return cols


def audit_row(prob: FbProblem, x, lam, gam, Bz, audit=True) -> dict:
    """Scalar audit quantities at ``x`` (exact ``B``, no randomness)."""
    Bx = prob.B(x)
    w = x - gam * Bx
    p = resolvent(prob.A, w, gam)
    row = {"lambda": lam, "gamma": gam, "residual": float(np.linalg.norm(x - p))}
    if prob.objective is not None:
        row["objective"] = float(prob.objective(x))
    for k, z in enumerate(prob.z_ref):
        row[f"dist_z{k}"] = prob.norm(x - z)
        if audit:
            row[f"s1_z{k}"] = lam * prob.norm(Bx - Bz[k]) ** 2
            row[f"s2_z{k}"] = lam * prob.norm(w - p + gam * Bz[k]) ** 2
    return row


def _record(trace, prob, x, n, lam, gam, Bz, audit):
    row = audit_row(prob, x, lam, gam, Bz, audit)
    trace.append(n, **row)
    return row["residual"]


def run(prob: FbProblem, oracle, perturb: Optional[PerturbationSource], sched: IterationSchedule,
        stop: StoppingRule, seed: int = 0, x0=None, family: Optional[VaryingResolventFamily] = None,
        ledger: Optional[SampleLedger] = None, audit: bool = True, force: bool = False,
        config_digest: Optional[str] = None, meta: Optional[dict] = None,
        certificate=None) -> RunTrace:
    """Iterate from ``x0`` until ``stop`` and return the audited trace.

    The admissibility certificate is evaluated first (pass ``certificate``
    to reuse one); a failing certificate raises
    :class:`~sfbs.errors.ConditionViolation` unless ``force`` is set.
    Each row ``n`` holds ``x_n``'s audit quantities and the parameters of the
    step taken from it; ``grad_error`` and ``relax_term`` are filled in once
    that step has been taken.
    """
    if certificate is None:
        s = sched
        if family is not None:
            s = dataclasses.replace(sched, alpha=family.alpha, beta=family.beta)
        certificate = admissibility_certificate(s, prob.theta, oracle, perturb)
    if not certificate.passed and not force:
        bad = certificate.failed()[0]
        raise ConditionViolation(f"admissibility clause ({bad.clause}) failed: {bad.name}; "
                                 f"{bad.detail}", bad.clause)
    x = np.zeros(prob.dim) if x0 is None else np.array(x0, dtype=float, copy=True)
    if ledger is None:
        ledger = SampleLedger(seed)
    trace = RunTrace(trace_columns(prob, audit), seed=seed, config_digest=config_digest,
                     z_refs=prob.z_ref, meta=meta)
    trace.meta.setdefault("certificate", certificate.to_dict())
    trace.meta.setdefault("relax_term", "single-path surrogate lambda(1-lambda)||t_n - x_n||^2")
    Bz = [prob.B(z) for z in prob.z_ref]
    state = FbState(0, x, None, ledger)
    trace.snapshot(0, x)
    res = _record(trace, prob, x, 0, sched.lam(0), sched.gamma(0), Bz, audit)
    try:
        while state.n < stop.max_iters and not res <= stop.residual_tol:
            A = prob.A if family is None else family.at(state.n)
            new, info = _step(state, A, oracle, perturb, sched)
            trace.set_last(
                grad_error=float(np.linalg.norm(info.u - oracle.exact(state.x))),
                perturb_norm=info.a_norm,
                relax_term=info.lam * (1.0 - info.lam) * prob.norm(info.t - state.x) ** 2)
            state = new
            n = state.n
            if n % stop.thin == 0:
                trace.snapshot(n, state.x)
            res = _record(trace, prob, state.x, n, sched.lam(n), sched.gamma(n), Bz, audit)
    except DivergenceError as exc:
        exc.trace = trace
        raise
    trace.snapshot(state.n, state.x)
    trace.meta["final_n"] = state.n
    trace.meta["final_residual"] = res
    trace.meta["converged"] = bool(res <= stop.residual_tol)
    trace.meta["convergence_claim"] = "strong" if prob.demiregularity.any else "weak"
    return trace
