"""Primal-dual splitting for

    minimize_x  f(x) + sum_k (g_k box j_k)(L_k x) + h(x)

with metrics ``W`` (primal) and ``U_k`` (dual), stochastic gradients of
``h`` and of ``j_k*``, and additive errors ``b_n``, ``c_{k,n}``. One sweep::

    y_n       = prox^{W^-1}_f(x_n - W(sum_k L_k^T v_{k,n} + u_n)) + b_n
    x_{n+1}   = x_n + lambda_n (y_n - x_n)
    w_{k,n}   = prox^{U_k^-1}_{g_k*}(v_{k,n} + U_k(L_k(2 y_n - x_n) - s_{k,n})) + c_{k,n}
    v_{k,n+1} = v_{k,n} + lambda_n (w_{k,n} - v_{k,n})

The same iteration is a forward-backward method with unit step on
``K = H + G_1 + ... + G_q`` in the metric ``V``; :func:`embed_as_fb`
builds that product-space problem and serves as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .diagnostics import RunTrace
from .engine import FbProblem, StoppingRule, VaryingResolventFamily, _guard, audit_row, relax
from .errors import ConditionViolation, DivergenceError, ParameterError, StructuralError
from .operators import (CocoerciveMap, DemiregularityFlag, ProxFunction, ResolventOperator,
                        conjugate_prox, metric_prox, prox, resolvent)
from .spaces import BlockVector, LinearMap, SpaceSpec, SpdMetric, operator_norm
from .stochastic import (Certificate, Clause, ExactOracle, IterationSchedule, PerturbationSource,
                         SampleLedger, series_summable)

__all__ = [
    "SmoothFunction",
    "DualBlock",
    "PdModel",
    "PdState",
    "PdOracleBundle",
    "Embedding",
    "coupling_norm",
    "cocoercivity_constant",
    "check_pd_conditions",
    "estimate_lipschitz",
    "pd_step",
    "embed_as_fb",
    "pd_run",
]

LIPSCHITZ_SAFETY = 1.1


# ---------------------------------------------------------------------------
# Smooth terms
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SmoothFunction:
    """Convex function with Lipschitz gradient.

    ``hessian`` is set for quadratic kinds and gives exact Lipschitz
    constants in any metric; ``custom`` functions rely on declarations or
    sampling.
    """

    kind: str
    grad_fn: Callable
    value_fn: Optional[Callable]
    dim: int
    hessian: Optional[np.ndarray] = None
    rho: Optional[float] = None

    def grad(self, x):
        return self.grad_fn(np.asarray(x, dtype=float))

    def __call__(self, x) -> float:
        if self.value_fn is None:
            return math.nan
        return float(self.value_fn(np.asarray(x, dtype=float)))

    @classmethod
    def quadratic(cls, K, z):
        """``1/2 ||K x - z||^2``."""
        K = np.asarray(K, dtype=float)
        z = np.asarray(z, dtype=float)
        KT = K.T

        def value(x):
            r = K @ x - z
            return 0.5 * float(r @ r)
        return cls("quadratic", lambda x: KT @ (K @ x - z), value, K.shape[1], KT @ K)

    @classmethod
    def expected_quadratic(cls, sampler):
        """``1/2 E||K x - z||^2`` for a sampler with analytic second moments."""
        EKK, EKz = sampler.second_moments()
        M = sampler.shape[0]
        c = 0.5 * (float(sampler.z_mean @ sampler.z_mean) + M * sampler.z_std ** 2)

        def value(x):
            return 0.5 * float(x @ (EKK @ x)) - float(EKz @ x) + c
        return cls("expected_quadratic", lambda x: EKK @ x - EKz, value, EKK.shape[0], EKK)

    @classmethod
    def zero(cls, dim):
        return cls("zero", lambda x: np.zeros(dim), lambda x: 0.0, dim, np.zeros((dim, dim)))

    @classmethod
    def scaled_norm(cls, rho, dim):
        """``(rho / 2) ||v||^2``, the conjugate of ``j = ||.||^2 / (2 rho)``."""
        if not rho > 0:
            raise ParameterError("rho must be positive")
        return cls("scaled_norm", lambda v: rho * v, lambda v: 0.5 * rho * float(v @ v), dim,
                   rho * np.eye(dim), rho)

    @classmethod
    def custom(cls, grad_fn, dim, value_fn=None):
        return cls("custom", grad_fn, value_fn, dim)

    def lipschitz_in_metric(self, M: SpdMetric) -> Optional[float]:
        """Lipschitz constant of the gradient of ``phi = self o M^{1/2}``,
        i.e. ``||M^{1/2} H M^{1/2}||`` for a quadratic with Hessian ``H``."""
        if self.hessian is None:
            return None
        S = M.sqrt_matrix
        G = S @ self.hessian @ S
        return float(max(np.linalg.eigvalsh(0.5 * (G + G.T))[-1], 0.0))


def estimate_lipschitz(fn: SmoothFunction, M: SpdMetric, samples=1000, rng_seed=0, scale=3.0):
    """Largest sampled difference quotient of ``grad (fn o M^{1/2})``."""
    rng = np.random.default_rng(rng_seed)
    S = M.sqrt_matrix
    worst = 0.0
    for _ in range(samples):
        a = scale * rng.standard_normal(M.dim)
        b = scale * rng.standard_normal(M.dim)
        ga = S @ fn.grad(S @ a)
        gb = S @ fn.grad(S @ b)
        d = np.linalg.norm(a - b)
        if d > 0:
            worst = max(worst, float(np.linalg.norm(ga - gb) / d))
    return worst


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DualBlock:
    """Dual block ``k``: ``g_k``, ``L_k``, ``U_k`` and the smooth ``j_k*``.

    ``jstar=None`` means no infimal convolution (``j_k`` the indicator of
    the origin, ``grad j_k* = 0``); ``nu`` must then be declared as a small
    positive constant.
    """

    g: ProxFunction
    L: LinearMap
    U: SpdMetric
    jstar: Optional[SmoothFunction] = None
    nu: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.L, LinearMap):
            self.L = LinearMap(self.L)
        if self.U.dim != self.L.codomain_dim:
            raise StructuralError("U_k does not conform to L_k's codomain")
        if self.jstar is None:
            self.jstar = SmoothFunction.zero(self.dim)
            if self.nu is None:
                raise ParameterError("a dual block without j_k needs an explicit nu > 0")
        if self.nu is None:
            self.nu = self.jstar.lipschitz_in_metric(self.U)
            if self.nu is None:
                self.nu = LIPSCHITZ_SAFETY * estimate_lipschitz(self.jstar, self.U)
        if not self.nu > 0:
            raise ParameterError(f"nu must be positive (got {self.nu}); declare a small constant")

    @property
    def dim(self):
        return self.L.codomain_dim

    def infconv_value(self, y) -> float:
        """``(g box j)(y)``; for ``j = ||.||^2/(2 rho)`` this is the Moreau envelope."""
        if self.jstar.kind == "zero":
            return self.g(y)
        if self.jstar.kind == "scaled_norm":
            r = self.jstar.rho
            p = prox(self.g, y, r)
            d = y - p
            return self.g(p) + float(d @ d) / (2 * r)
        return math.nan


@dataclass(eq=False)
class PdModel:
    f: ProxFunction
    h: SmoothFunction
    blocks: list
    W: SpdMetric
    mu: Optional[float] = None
    f_rule: Optional[Callable] = None
    demiregularity: DemiregularityFlag = field(default_factory=DemiregularityFlag)

    def __post_init__(self):
        if self.W.dim != self.h.dim:
            raise StructuralError("W does not conform to H")
        for k, b in enumerate(self.blocks):
            if b.L.domain_dim != self.h.dim:
                raise StructuralError(f"L_{k} does not act on H")
        if self.mu is None:
            self.mu = self.h.lipschitz_in_metric(self.W)
            if self.mu is None:
                self.mu = LIPSCHITZ_SAFETY * estimate_lipschitz(self.h, self.W)
        self.Winv = self.W.inverse()
        self.dual_space = SpaceSpec(tuple(b.dim for b in self.blocks))

    @property
    def dim(self):
        return self.h.dim

    @property
    def q(self):
        return len(self.blocks)

    def f_at(self, n) -> ProxFunction:
        return self.f if self.f_rule is None else self.f_rule(n)

    def adjoint_sum(self, v_blocks):
        out = np.zeros(self.dim)
        for b, v in zip(self.blocks, v_blocks):
            out = out + b.L.adjoint.apply(v)
        return out

    def objective(self, x) -> float:
        val = self.f(x) + self.h(x)
        for b in self.blocks:
            val += b.infconv_value(b.L.apply(x))
        return float(val)


@dataclass
class PdState:
    n: int
    x: np.ndarray
    v: BlockVector
    last_y: Optional[np.ndarray] = None
    last_w: Optional[list] = None
    ledger: Optional[SampleLedger] = None


@dataclass(eq=False)
class PdOracleBundle:
    u: object
    s: list
    b: PerturbationSource = field(default_factory=PerturbationSource.zero)
    c: list = field(default_factory=list)

    @classmethod
    def exact(cls, model: PdModel):
        return cls(ExactOracle(model.h.grad), [ExactOracle(b.jstar.grad) for b in model.blocks],
                   PerturbationSource.zero(), [PerturbationSource.zero() for _ in model.blocks])

    def __post_init__(self):
        if not self.c:
            self.c = [PerturbationSource.zero() for _ in self.s]
        if len(self.c) != len(self.s):
            raise StructuralError("need one dual perturbation source per dual block")


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------

def coupling_norm(model: PdModel, norm_tol: float = 1e-10) -> float:
    """``sqrt(sum_k ||U_k^{1/2} L_k W^{1/2}||^2)``."""
    Ws = model.W.sqrt_matrix
    total = 0.0
    for b in model.blocks:
        total += operator_norm(b.U.sqrt_matrix @ b.L.matrix @ Ws, tol=norm_tol) ** 2
    return math.sqrt(total)


def cocoercivity_constant(model: PdModel, norm_tol: float = 1e-10) -> float:
    """``theta = (1 - coupling_norm) min{1/mu, 1/nu_1, ..., 1/nu_q}``.

    The factor is accurate to about ``2 norm_tol``, so a factor within
    ``4 norm_tol`` of zero is treated as a violation.
    """
    factor = 1.0 - coupling_norm(model, norm_tol)
    if factor <= 4 * norm_tol:
        raise ConditionViolation(
            f"clause (f): 1 - sqrt(sum ||U^1/2 L W^1/2||^2) = {factor:.3g} is not positive", "f")
    consts = [model.mu] + [b.nu for b in model.blocks]
    return factor * min(1.0 / c if c > 0 else math.inf for c in consts)


def check_pd_conditions(model: PdModel, sched: IterationSchedule, samples: int = 1000,
                        rng_seed: int = 0, norm_tol: float = 1e-10, n_check: int = 10_000
                        ) -> Certificate:
    """Clause-by-clause check of the primal-dual convergence conditions."""
    cert = Certificate()
    c = coupling_norm(model, norm_tol)
    bound = 2.0 * (1.0 - c)
    worst = max([model.mu] + [b.nu for b in model.blocks])
    cert.clauses.append(Clause(
        "f", "max{mu, nu_k} < 2(1 - sqrt(sum ||U_k^1/2 L_k W^1/2||^2))", worst < bound,
        f"max = {worst:.17g} vs {bound:.17g}"))
    checks = [("mu", model.h, model.W, model.mu)]
    checks += [(f"nu_{k + 1}", b.jstar, b.U, b.nu) for k, b in enumerate(model.blocks)]
    for i, (name, fn, M, declared) in enumerate(checks):
        q = estimate_lipschitz(fn, M, samples, rng_seed + i)
        cert.clauses.append(Clause(
            "f", f"declared {name} bounds sampled gradient quotients", q <= declared * (1 + 1e-6),
            f"max quotient {q:.6g} vs declared {declared:.6g} ({samples} pairs)"))
    tau_ok, tau_sym, tau_d = series_summable([(sched.tau, 1.0)], n_check)
    cert.clauses.append(Clause("a-e", "sum tau_n < +inf", tau_ok, tau_d,
                               checked_up_to=None if tau_sym else n_check))
    lam_sum, lam_sym, lam_d = series_summable([(sched.lam, 1.0)], n_check)
    cert.clauses.append(Clause("a-e", "sum lambda_n = +inf", not lam_sum, lam_d,
                               checked_up_to=None if lam_sym else n_check))
    if any(b.jstar.kind == "zero" for b in model.blocks):
        cert.clauses.append(Clause(
            "note", "dual block without j_k uses a declared nu (extension)", True,
            "; ".join(f"nu_{k + 1} = {b.nu:g}" for k, b in enumerate(model.blocks)
                      if b.jstar.kind == "zero")))
    return cert


# ---------------------------------------------------------------------------
# Iteration
# ---------------------------------------------------------------------------

def _draw(p, n, dim, ledger):
    if p is None or p.kind == "zero":
        return None
    return p.draw(n, dim, ledger)


def _pd_step(state: PdState, model: PdModel, oracles: PdOracleBundle, sched: IterationSchedule):
    n, x, v = state.n, state.x, state.v.blocks
    led = state.ledger
    lam = sched.lam(n)
    u = oracles.u.estimate(x, n, led)
    t = metric_prox(model.f_at(n), x - model.W.apply(model.adjoint_sum(v) + u), model.Winv)
    b = _draw(oracles.b, n, x.size, led)
    y = t if b is None else t + b
    x_new = relax(x, y, lam)
    d = 2.0 * y - x
    ss, ts, ws, v_new = [], [], [], []
    for k, blk in enumerate(model.blocks):
        s = oracles.s[k].estimate(v[k], n, led)
        tk = conjugate_prox(blk.g, v[k] + blk.U.apply(blk.L.apply(d) - s), blk.U)
        c = _draw(oracles.c[k], n, blk.dim, led)
        w = tk if c is None else tk + c
        ss.append(s)
        ts.append(tk)
        ws.append(w)
        v_new.append(relax(v[k], w, lam))
    _guard(n, x, u, y, x_new)
    for w, vk in zip(ws, v_new):
        _guard(n, x, w, vk)
    new = PdState(n + 1, x_new, BlockVector(model.dual_space, v_new), y, ws, led)
    return new, (u, ss, t, ts, lam)


def pd_step(state: PdState, model: PdModel, oracles: PdOracleBundle,
            sched: IterationSchedule) -> PdState:
    """One primal-dual sweep; the dual update reads this sweep's ``y_n``."""
    return _pd_step(state, model, oracles, sched)[0]


# ---------------------------------------------------------------------------
# Product-space embedding
# ---------------------------------------------------------------------------

class _EmbeddedOracle:
    """``V^{-1}(u_n, s_n)`` from the primal-dual oracles."""

    def __init__(self, emb, oracles: PdOracleBundle):
        self.emb = emb
        self.oracles = oracles
        self.kind = "embedded"

    def _pack_grad(self, parts):
        return self.emb.V_solve(np.concatenate(parts))

    def estimate(self, z, n, ledger):
        x, v = self.emb.unpack(z)
        parts = [self.oracles.u.estimate(x, n, ledger)]
        parts += [o.estimate(vk, n, ledger) for o, vk in zip(self.oracles.s, v)]
        return self._pack_grad(parts)

    def exact(self, z):
        x, v = self.emb.unpack(z)
        return self._pack_grad([self.oracles.u.exact(x)] +
                               [o.exact(vk) for o, vk in zip(self.oracles.s, v)])

    def tau(self, n):
        return 0.0

    def bias_rate(self):
        rates = [getattr(o, "bias_rate", lambda: None)() for o in [self.oracles.u] + self.oracles.s]
        return None if any(r is None for r in rates) else min(rates)

    def zeta_rate(self):
        rates = [getattr(o, "zeta_rate", lambda: None)() for o in [self.oracles.u] + self.oracles.s]
        return None if any(r is None for r in rates) else min(rates)


@dataclass(eq=False)
class _EmbeddedPerturbation:
    sources: list
    dims: list

    @property
    def kind(self):
        return "zero" if all(p.kind == "zero" for p in self.sources) else "decaying"

    def draw(self, n, dim, ledger):
        return np.concatenate([p.draw(n, d, ledger) for p, d in zip(self.sources, self.dims)])


@dataclass(eq=False)
class Embedding:
    """Forward-backward form of a primal-dual model on ``K = H + G``."""

    model: PdModel
    space: SpaceSpec
    V: np.ndarray
    problem: FbProblem
    family: Optional[VaryingResolventFamily]
    _cho: tuple

    def pack(self, x, v) -> np.ndarray:
        blocks = v.blocks if isinstance(v, BlockVector) else v
        return np.concatenate([np.asarray(x, dtype=float)] + [np.asarray(b, dtype=float)
                                                              for b in blocks])

    def unpack(self, z):
        off = self.space.offsets
        return z[off[0]:off[1]], [z[off[k]:off[k + 1]] for k in range(1, len(off) - 1)]

    def V_apply(self, z):
        return self.V @ z

    def V_solve(self, z):
        return cho_solve(self._cho, z)

    def oracle(self, oracles: PdOracleBundle):
        return _EmbeddedOracle(self, oracles)

    def perturbation(self, oracles: PdOracleBundle):
        return _EmbeddedPerturbation([oracles.b] + list(oracles.c), list(self.space.dims))


def _product_resolvent(model: PdModel, f: ProxFunction, emb_ref: list):
    def rule(z, gamma):
        emb = emb_ref[0]
        x, v = emb.unpack(z)
        y = metric_prox(f, x - model.W.apply(model.adjoint_sum(v)), model.Winv)
        d = 2.0 * y - x
        ws = [conjugate_prox(b.g, vk + b.U.apply(b.L.apply(d)), b.U)
              for b, vk in zip(model.blocks, v)]
        return np.concatenate([y] + ws)
    return rule


def embed_as_fb(model: PdModel, z_ref=(), norm_tol: float = 1e-10) -> Embedding:
    """Product-space problem ``0 in V^{-1}A z + V^{-1}B z`` in the metric ``V``.

    ``A(x, v) = (df(x) + L^T v, -L x + dg*(v))``, ``B(x, v) = (grad h(x),
    grad j*(v))`` and ``V(x, v) = (W^{-1} x - L^T v, -L x + U^{-1} v)``.
    The resolvent of ``V^{-1}A`` has the closed form used by
    :func:`pd_step`, and ``V^{-1}`` is applied through a Cholesky factor.
    Forward-backward steps with unit step size on this problem coincide with
    :func:`pd_step` whenever the primal perturbation ``b_n`` is zero.
    """
    dims = [model.dim] + [b.dim for b in model.blocks]
    space = SpaceSpec(tuple(dims))
    N = space.total
    off = space.offsets
    V = np.zeros((N, N))
    V[:model.dim, :model.dim] = model.Winv.matrix
    for k, b in enumerate(model.blocks):
        r = slice(off[k + 1], off[k + 2])
        V[r, r] = b.U.inv_matrix
        V[r, :model.dim] = -b.L.matrix
        V[:model.dim, r] = -b.L.matrix.T
    V = 0.5 * (V + V.T)
    try:
        cho = cho_factor(V, lower=False)
    except np.linalg.LinAlgError as exc:
        raise ConditionViolation(f"V is not positive definite: {exc}", "f") from exc
    theta = cocoercivity_constant(model, norm_tol)
    emb_ref = []

    def B_rule(z):
        x, v = emb.unpack(z)
        return emb.V_solve(np.concatenate([model.h.grad(x)] +
                                          [b.jstar.grad(vk) for b, vk in zip(model.blocks, v)]))

    A = ResolventOperator.custom(_product_resolvent(model, model.f, emb_ref), (1.0, 1.0), N,
                                 "V^-1 A")
    B = CocoerciveMap(B_rule, theta, N, name="V^-1 B")

    def objective(z):
        return model.objective(z[:model.dim])

    prob = FbProblem(A, B, list(z_ref), model.demiregularity, SpdMetric(V), objective, "pd")
    family = None
    if model.f_rule is not None:
        def fam_rule(n):
            return ResolventOperator.custom(_product_resolvent(model, model.f_rule(n), emb_ref),
                                            (1.0, 1.0), N, f"V^-1 A_{n}")
        family = VaryingResolventFamily(fam_rule, A)
    emb = Embedding(model, space, V, prob, family, cho)
    emb_ref.append(emb)
    return emb


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def pd_run(model: PdModel, oracles: PdOracleBundle, sched: IterationSchedule, stop: StoppingRule,
           seed: int = 0, x0=None, v0=None, z_ref=(), ledger: Optional[SampleLedger] = None,
           audit: bool = True, force: bool = False, config_digest: Optional[str] = None,
           meta: Optional[dict] = None, certificate: Optional[Certificate] = None) -> RunTrace:
    """Run the primal-dual iteration with product-space auditing.

    ``z_ref`` holds reference solution pairs ``(x*, v*)`` (or packed
    vectors). Distances ``dist_z{k}`` are in the ``V`` norm; the primal and
    dual parts are also logged in Euclidean norm. ``residual`` is the
    fixed-point residual of the embedded forward-backward map.
    ``step_error`` is the ``V``-norm gap between the sweep's output
    ``(y_n, w_n)`` and the exact embedded map at ``z_n``; it bounds the
    per-step Fejér defect whatever the source (oracle noise, ``b_n``, ``c_n``).
    """
    if certificate is None:
        certificate = check_pd_conditions(model, sched)
    if not certificate.passed and not force:
        bad = certificate.failed()[0]
        raise ConditionViolation(f"condition ({bad.clause}) failed: {bad.name}; {bad.detail}",
                                 bad.clause)
    emb = embed_as_fb(model)
    refs = []
    for z in z_ref:
        refs.append(emb.pack(*z) if isinstance(z, (tuple, list)) and len(z) == 2 else
                    np.asarray(z, dtype=float))
    emb.problem.z_ref = refs
    prob = emb.problem
    x = np.zeros(model.dim) if x0 is None else np.array(x0, dtype=float, copy=True)
    v = model.dual_space.zeros() if v0 is None else (
        v0 if isinstance(v0, BlockVector) else BlockVector(model.dual_space, v0))
    if ledger is None:
        ledger = SampleLedger(seed)
    cols = ["n", "lambda", "gamma", "residual", "grad_error", "step_error", "relax_term",
            "objective"]
    for k in range(len(refs)):
        cols += [f"dist_z{k}", f"primal_dist_z{k}", f"dual_dist_z{k}"]
        if audit:
            cols += [f"s1_z{k}", f"s2_z{k}"]
    trace = RunTrace(cols, seed=seed, config_digest=config_digest, z_refs=refs, meta=meta)
    trace.meta.setdefault("certificate", certificate.to_dict())
    trace.meta.setdefault("relax_term", "single-path surrogate lambda(1-lambda)||t_n - z_n||_V^2")
    trace.meta.setdefault("distance_norm", "V")
    Bz = [prob.B(z) for z in refs]

    def record(n, z):
        row = audit_row(prob, z, sched.lam(n), 1.0, Bz, audit)
        for k, r in enumerate(refs):
            row[f"primal_dist_z{k}"] = float(np.linalg.norm(z[:model.dim] - r[:model.dim]))
            row[f"dual_dist_z{k}"] = float(np.linalg.norm(z[model.dim:] - r[model.dim:]))
        trace.append(n, **row)
        return row["residual"]

    state = PdState(0, x, v, None, None, ledger)
    z = emb.pack(x, v)
    trace.snapshot(0, z)
    res = record(0, z)
    try:
        while state.n < stop.max_iters and not res <= stop.residual_tol:
            exact = resolvent(prob.A, z - prob.B(z), 1.0)
            new, (u, ss, t, ts, lam) = _pd_step(state, model, oracles, sched)
            err = np.linalg.norm(u - oracles.u.exact(state.x)) ** 2
            for o, sk, vk in zip(oracles.s, ss, state.v.blocks):
                err += np.linalg.norm(sk - o.exact(vk)) ** 2
            z_old = z
            z = emb.pack(new.x, new.v)
            realized = emb.pack(new.last_y, new.last_w)
            trace.set_last(grad_error=math.sqrt(err), step_error=prob.norm(realized - exact),
                           relax_term=lam * (1.0 - lam) * prob.norm(emb.pack(t, ts) - z_old) ** 2)
            state = new
            if state.n % stop.thin == 0:
                trace.snapshot(state.n, z)
            res = record(state.n, z)
    except DivergenceError as exc:
        exc.trace = trace
        raise
    trace.snapshot(state.n, z)
    trace.meta["final_n"] = state.n
    trace.meta["final_residual"] = res
    trace.meta["converged"] = bool(res <= stop.residual_tol)
    trace.meta["convergence_claim"] = "strong" if model.demiregularity.any else "weak"
    return trace
