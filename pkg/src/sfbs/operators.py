"""Proximity operators, resolvents and property checkers.

The catalog of proximable functions is small on purpose: ``zero``, ``l1``,
``squared_l2``, ``box`` (indicator), ``smoothed_l1`` (Moreau envelope of a
weighted l1 norm) and ``custom`` closures. Each one exposes its value, its
Euclidean prox ``prox_{gamma f}`` and its prox in the metric of an SPD
operator ``U``::

    prox^U_f(x) = argmin_y f(y) + 1/2 ||x - y||_U^2

Conjugate proxes are obtained from the variable-metric Moreau
decomposition, so users never have to supply ``f*``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, ParameterError, StructuralError
from .spaces import SpdMetric, operator_norm

__all__ = [
    "ProxFunction",
    "ResolventOperator",
    "CocoerciveMap",
    "DemiregularityFlag",
    "CheckReport",
    "prox",
    "metric_prox",
    "conjugate_prox",
    "conjugate_value",
    "resolvent",
    "check_cocoercive",
    "check_firmly_nonexpansive",
    "soft_threshold",
]

KINDS = ("zero", "l1", "squared_l2", "box", "smoothed_l1", "custom")


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


@dataclass(eq=False, frozen=True)
class ProxFunction:
    """A proper lsc convex function known through its proximity operator.

    Use the class constructors (:meth:`l1`, :meth:`box`, ...) rather than
    filling fields by hand. ``block`` records which block of a product
    space the function acts on.
    """

    kind: str
    weight: float = 1.0
    center: object = 0.0
    lo: object = None
    hi: object = None
    rho: float = 0.0
    value_fn: Optional[Callable] = None
    prox_fn: Optional[Callable] = None
    metric_prox_fn: Optional[Callable] = None
    block: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown function kind {self.kind!r}")
        if self.kind in ("l1", "squared_l2", "smoothed_l1") and self.weight < 0:
            raise ParameterError("weight must be nonnegative")
        if self.kind == "smoothed_l1" and self.rho <= 0:
            raise ParameterError("smoothing parameter must be positive")
        if self.kind == "box" and np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ParameterError("box needs lo <= hi")
        if self.kind == "custom" and (self.value_fn is None or self.prox_fn is None):
            raise ParameterError("custom functions need value_fn and prox_fn")

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, block=0):
        return cls("zero", block=block)

    @classmethod
    def l1(cls, weight=1.0, block=0):
        return cls("l1", weight=float(weight), block=block)

    @classmethod
    def squared_l2(cls, weight=1.0, center=0.0, block=0):
        """``(weight / 2) ||x - center||^2``."""
        return cls("squared_l2", weight=float(weight),
                   center=np.asarray(center, dtype=float), block=block)

    @classmethod
    def box(cls, lo, hi, block=0):
        """Indicator of ``{x : lo <= x <= hi}``."""
        return cls("box", lo=np.asarray(lo, dtype=float), hi=np.asarray(hi, dtype=float),
                   block=block)

    @classmethod
    def smoothed_l1(cls, weight, rho, block=0):
        """Moreau envelope with parameter ``rho`` of ``weight * ||.||_1``."""
        return cls("smoothed_l1", weight=float(weight), rho=float(rho), block=block)

    @classmethod
    def custom(cls, value_fn, prox_fn, metric_prox_fn=None, block=0):
        """User closure. ``prox_fn(x, gamma)`` must return ``prox_{gamma f}(x)``;
        ``metric_prox_fn(x, U)`` is optional."""
        return cls("custom", value_fn=value_fn, prox_fn=prox_fn,
                   metric_prox_fn=metric_prox_fn, block=block)

    @classmethod
    def from_config(cls, spec: dict, block=0):
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "zero":
            return cls.zero(block)
        if kind == "l1":
            return cls.l1(spec.get("weight", 1.0), block)
        if kind == "squared_l2":
            return cls.squared_l2(spec.get("weight", 1.0), spec.get("center", 0.0), block)
        if kind == "box":
            return cls.box(spec["lo"], spec["hi"], block)
        if kind == "smoothed_l1":
            return cls.smoothed_l1(spec.get("weight", 1.0), spec["rho"], block)
        raise ParameterError(f"function kind {kind!r} cannot be declared in a configuration")

    # -- evaluation -------------------------------------------------------
    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "zero":
            return 0.0
        if k == "l1":
            return self.weight * float(np.sum(np.abs(x)))
        if k == "squared_l2":
            d = x - self.center
            return 0.5 * self.weight * float(np.sum(d * d))
        if k == "box":
            inside = np.all(x >= self.lo) and np.all(x <= self.hi)
            return 0.0 if inside else np.inf
        if k == "smoothed_l1":
            w, r = self.weight, self.rho
            a = np.abs(x)
            return float(np.sum(np.where(a <= w * r, x * x / (2 * r), w * a - 0.5 * w * w * r)))
        return float(self.value_fn(x))

    def infimum(self) -> float:
        """Lower bound of the function (0 for every built-in kind)."""
        return 0.0 if self.kind != "custom" else -np.inf

    def _prox_scaled(self, x, step):
        """Euclidean prox with a (scalar or per-coordinate) step ``step``."""
        k = self.kind
        if k == "zero":
            return np.array(x, dtype=float, copy=True)
        if k == "l1":
            return soft_threshold(x, self.weight * step)
        if k == "squared_l2":
            sw = step * self.weight
            return (x + sw * self.center) / (1.0 + sw)
        if k == "box":
            return np.clip(x, self.lo, self.hi)
        if k == "smoothed_l1":
            s = step + self.rho
            return x + (step / s) * (soft_threshold(x, self.weight * s) - x)
        if np.ndim(step) == 0:
            return np.asarray(self.prox_fn(x, float(step)), dtype=float)
        raise StructuralError("custom functions only support scalar steps")

    @property
    def separable(self) -> bool:
        return self.kind in ("zero", "l1", "squared_l2", "box", "smoothed_l1")


def prox(f: ProxFunction, x, gamma: float) -> np.ndarray:
    """``prox_{gamma f}(x)``."""
    if not gamma > 0:
        raise ParameterError(f"prox parameter must be positive, got {gamma}")
    return f._prox_scaled(np.asarray(x, dtype=float), gamma)


def _metric_prox_iterative(f, x, U: SpdMetric, tol=1e-15, max_iter=200000):
    # accelerated proximal gradient on y -> f(y) + 1/2 ||y - x||_U^2
    Lc, mu = U.max_eigenvalue, U.min_eigenvalue
    step = 1.0 / Lc
    beta = (np.sqrt(Lc) - np.sqrt(mu)) / (np.sqrt(Lc) + np.sqrt(mu))
    y = f._prox_scaled(x, step)
    y_prev = y
    for _ in range(max_iter):
        w = y + beta * (y - y_prev)
        y_new = f._prox_scaled(w - step * U.apply(w - x), step)
        y_prev, y = y, y_new
        if np.linalg.norm(y - y_prev) <= tol * (1.0 + np.linalg.norm(y)):
            # confirm with the plain (unaccelerated) fixed-point residual
            g = f._prox_scaled(y - step * U.apply(y - x), step)
            if np.linalg.norm(g - y) <= 10 * tol * (1.0 + np.linalg.norm(y)):
                return g
    raise ConvergenceError("metric prox inner solver did not converge", estimate=y)


def metric_prox(f: ProxFunction, x, U: SpdMetric) -> np.ndarray:
    """``prox^U_f(x)``, the minimiser of ``f(y) + 1/2 ||x - y||_U^2``.

    Closed forms are used for diagonal metrics and for ``squared_l2``; other
    cases fall back on an accelerated proximal-gradient inner solve.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != U.dim:
        raise StructuralError(f"metric of size {U.dim} applied to length {x.shape[-1]}")
    if f.kind == "squared_l2":
        w = f.weight
        rhs = U.apply(x) + w * np.broadcast_to(f.center, x.shape)
        if U.is_diagonal:
            return rhs / (U.diagonal + w)
        return np.linalg.solve(U.matrix + w * np.eye(U.dim), rhs)
    if f.kind == "zero":
        return x.copy()
    if f.kind == "custom" and f.metric_prox_fn is not None:
        return np.asarray(f.metric_prox_fn(x, U), dtype=float)
    if U.is_diagonal:
        d = U.diagonal
        if f.kind == "custom":
            if np.all(d == d[0]):
                return f._prox_scaled(x, 1.0 / d[0])
        else:
            return f._prox_scaled(x, 1.0 / d)
    return _metric_prox_iterative(f, x, U)


def conjugate_prox(g: ProxFunction, v, U: SpdMetric) -> np.ndarray:
    """``prox^{U^{-1}}_{g*}(v)`` via the variable-metric Moreau decomposition

        prox^{U^{-1}}_{g*}(v) = v - U prox^U_g(U^{-1} v).
    """
    v = np.asarray(v, dtype=float)
    return v - U.apply(metric_prox(g, U.solve(v), U))


def conjugate_value(g: ProxFunction, u, tol: float = 0.0) -> float:
    """Value of ``g*`` at ``u`` for the built-in kinds.

    Indicator-valued conjugates accept points within ``tol`` of their
    domain (useful for outputs of a Moreau decomposition, which carry
    roundoff).
    """
    u = np.asarray(u, dtype=float)
    k = g.kind
    if k == "zero":
        return 0.0 if np.all(np.abs(u) <= tol) else np.inf
    if k == "l1":
        return 0.0 if np.all(np.abs(u) <= g.weight + tol) else np.inf
    if k == "squared_l2":
        c = np.broadcast_to(g.center, u.shape)
        return float(u @ c + (u @ u) / (2 * g.weight)) if g.weight > 0 else (
            float(u @ c) if np.all(np.abs(u) <= tol) else np.inf)
    if k == "box":
        lo = np.broadcast_to(g.lo, u.shape)
        hi = np.broadcast_to(g.hi, u.shape)
        return float(np.sum(np.maximum(hi * u, lo * u)))
    if k == "smoothed_l1":
        # conjugate of an envelope is g* + (rho/2)||.||^2
        if np.all(np.abs(u) <= g.weight + tol):
            return 0.5 * g.rho * float(u @ u)
        return np.inf
    raise ParameterError("conjugate value unavailable for custom functions")


# ---------------------------------------------------------------------------
# Resolvents
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ResolventOperator:
    """A maximally monotone operator given by its resolvent rule
    ``rule(x, gamma) = J_{gamma A} x``."""

    rule: Callable
    source: Optional[ProxFunction] = None
    gamma_range: tuple = (0.0, np.inf)
    dim: Optional[int] = None
    name: str = "custom"

    @classmethod
    def subdifferential(cls, f: ProxFunction, dim=None):
        return cls(lambda x, g: prox(f, x, g), source=f, dim=dim, name=f"subdiff[{f.kind}]")

    @classmethod
    def zero(cls, dim=None):
        return cls(lambda x, g: np.array(x, dtype=float, copy=True),
                   source=ProxFunction.zero(), dim=dim, name="zero")

    @classmethod
    def custom(cls, rule, gamma_range=(0.0, np.inf), dim=None, name="custom"):
        return cls(rule, None, tuple(gamma_range), dim, name)

    def valid_gamma(self, gamma) -> bool:
        lo, hi = self.gamma_range
        return gamma > 0 and lo <= gamma <= hi


def resolvent(A: ResolventOperator, x, gamma: float) -> np.ndarray:
    """``J_{gamma A} x = (Id + gamma A)^{-1} x``."""
    if not A.valid_gamma(gamma):
        raise ParameterError(f"gamma={gamma} outside the validity range {A.gamma_range} of {A.name}")
    return np.asarray(A.rule(np.asarray(x, dtype=float), gamma), dtype=float)


@dataclass(eq=False)
class CocoerciveMap:
    """Single-valued ``theta``-cocoercive operator."""

    rule: Callable
    theta: float
    dim: int
    K: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    name: str = "custom"

    def __post_init__(self):
        if not self.theta > 0:
            raise ParameterError("cocoercivity constant must be positive")

    def __call__(self, x):
        return self.rule(x)

    @classmethod
    def quadratic(cls, K, z, norm_tol=1e-10):
        """Gradient of ``1/2 ||K x - z||^2`` with ``theta = 1 / ||K||^2``."""
        K = np.asarray(K, dtype=float)
        z = np.asarray(z, dtype=float)
        nrm = operator_norm(K, tol=norm_tol)
        KT = K.T
        return cls(lambda x: KT @ (K @ x - z), 1.0 / nrm**2, K.shape[1], K, z, "quadratic")

    @classmethod
    def affine(cls, M, c, theta=None):
        """``x -> M x - c`` for symmetric positive semidefinite ``M``."""
        M = np.asarray(M, dtype=float)
        c = np.asarray(c, dtype=float)
        if theta is None:
            lam = float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
            theta = 1.0 / lam if lam > 0 else np.inf
        return cls(lambda x: M @ x - c, theta, M.shape[0], name="affine")

    @classmethod
    def identity(cls, dim, theta=1.0):
        return cls(lambda x: np.array(x, dtype=float, copy=True), theta, dim, name="identity")

    @classmethod
    def zero(cls, dim):
        return cls(lambda x: np.zeros(dim), np.inf, dim, name="zero")


@dataclass(frozen=True)
class DemiregularityFlag:
    """User declaration that A and/or B is demiregular on the solution set
    (e.g. because B is strongly monotone). Only affects reporting."""

    holds_for_A: bool = False
    holds_for_B: bool = False
    justification: str = ""

    @property
    def any(self):
        return self.holds_for_A or self.holds_for_B


@dataclass
class CheckReport:
    passed: bool
    samples: int
    violations: int
    worst_margin: float
    worst_index: int

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"{verdict}: {self.violations}/{self.samples} violations, "
                f"worst margin {self.worst_margin:.3e}")


def _sample_pairs(dim, samples, rng_seed, scale):
    rng = np.random.default_rng(rng_seed)
    return scale * rng.standard_normal((samples, dim)), scale * rng.standard_normal((samples, dim))


def check_cocoercive(B: CocoerciveMap, samples: int = 1000, rng_seed: int = 0,
                     slack: float = 1e-9, scale: float = 3.0) -> CheckReport:
    """Sample the cocoercivity inequality
    ``<x - y, Bx - By> >= theta ||Bx - By||^2``.

    A pair violates it when the margin falls below
    ``-slack * (1 + ||x - y||^2)``. Violations are reported, never raised.
    """
    if samples < 1:
        raise ParameterError("samples must be >= 1")
    X, Y = _sample_pairs(B.dim, samples, rng_seed, scale)
    margins = np.empty(samples)
    bad = 0
    for i in range(samples):
        d = X[i] - Y[i]
        e = B(X[i]) - B(Y[i])
        m = float(d @ e) - B.theta * float(e @ e)
        margins[i] = m
        if m < -slack * (1.0 + float(d @ d)):
            bad += 1
    j = int(np.argmin(margins))
    return CheckReport(bad == 0, samples, bad, float(margins[j]), j)


def check_firmly_nonexpansive(A: ResolventOperator, gamma: float = 1.0, samples: int = 1000,
                              rng_seed: int = 0, dim=None, slack: float = 1e-9,
                              scale: float = 3.0) -> CheckReport:
    """Sample ``||Jx - Jy||^2 + ||(x - Jx) - (y - Jy)||^2 <= ||x - y||^2``."""
    if samples < 1:
        raise ParameterError("samples must be >= 1")
    dim = dim if dim is not None else A.dim
    if dim is None:
        raise StructuralError("dimension needed to sample a resolvent")
    X, Y = _sample_pairs(dim, samples, rng_seed, scale)
    margins = np.empty(samples)
    bad = 0
    for i in range(samples):
        jx, jy = resolvent(A, X[i], gamma), resolvent(A, Y[i], gamma)
        d = X[i] - Y[i]
        p = jx - jy
        r = d - p
        m = float(d @ d) - float(p @ p) - float(r @ r)
        margins[i] = m
        if m < -slack:
            bad += 1
    j = int(np.argmin(margins))
    return CheckReport(bad == 0, samples, bad, float(margins[j]), j)
