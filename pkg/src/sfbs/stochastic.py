"""Parameter schedules, seeded sample ledgers, stochastic gradient oracles,
resolvent perturbations and the admissibility certificate.

Randomness is organised so that every draw is addressable: the ledger owns
a seed and hands out generators keyed by ``(stream, index)``. A run is
therefore a pure function of its seed, and conditional moments given the
past can be estimated by freezing the ledger prefix and resampling only the
fresh draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ParameterError, ReproducibilityError

__all__ = [
    "Constant",
    "Power",
    "Geometric",
    "CustomRule",
    "PowerBatch",
    "CustomBatch",
    "rule_from_config",
    "IterationSchedule",
    "ScheduleValues",
    "schedule_eval",
    "empirical_schedule",
    "check_kappa_delta",
    "SampleLedger",
    "GaussianQuadraticSampler",
    "ExactOracle",
    "AdditiveNoiseOracle",
    "EmpiricalQuadraticOracle",
    "next_estimate",
    "MomentEstimate",
    "estimate_conditional_moments",
    "PerturbationSource",
    "next_perturbation",
    "Clause",
    "Certificate",
    "admissibility_certificate",
    "series_summable",
]


# ---------------------------------------------------------------------------
# Scalar rules n -> value
# ---------------------------------------------------------------------------
# Each built-in rule knows its asymptotic decay ``rate``: value(n) ~ n^-rate
# (inf for geometric decay or identically zero). This is what the
# certificate uses to decide summability symbolically.

@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, n):
        return float(self.value)

    @property
    def rate(self):
        return math.inf if self.value == 0 else 0.0

    def sup(self):
        return float(self.value)

    def inf(self):
        return float(self.value)

    def limit(self):
        return float(self.value)

    def describe(self):
        return f"constant({self.value:g})"


@dataclass(frozen=True)
class Power:
    """``scale * (n + offset)^(-exponent)``."""

    scale: float
    exponent: float
    offset: float = 1.0

    def __post_init__(self):
        if self.offset <= 0:
            raise ConfigurationError("power rule needs offset > 0")

    def __call__(self, n):
        return float(self.scale * (n + self.offset) ** (-self.exponent))

    @property
    def rate(self):
        return math.inf if self.scale == 0 else float(self.exponent)

    def sup(self):
        if self.scale == 0:
            return 0.0
        if self.exponent * np.sign(self.scale) >= 0:
            return self(0)
        return math.inf

    def inf(self):
        if self.scale == 0:
            return 0.0
        if self.exponent == 0:
            return float(self.scale)
        if self.exponent > 0:
            return 0.0 if self.scale > 0 else self(0)
        return self(0) if self.scale > 0 else -math.inf

    def limit(self):
        if self.exponent > 0 or self.scale == 0:
            return 0.0
        if self.exponent == 0:
            return float(self.scale)
        return math.inf * np.sign(self.scale)

    def describe(self):
        return f"power({self.scale:g}*(n+{self.offset:g})^-{self.exponent:g})"


@dataclass(frozen=True)
class Geometric:
    """``scale * ratio^n``."""

    scale: float
    ratio: float

    def __post_init__(self):
        if self.ratio <= 0:
            raise ConfigurationError("geometric rule needs ratio > 0")

    def __call__(self, n):
        return float(self.scale * self.ratio ** n)

    @property
    def rate(self):
        if self.scale == 0 or self.ratio < 1:
            return math.inf
        return 0.0 if self.ratio == 1 else -math.inf

    def sup(self):
        if self.ratio <= 1:
            return max(float(self.scale), self.limit())
        return math.inf if self.scale > 0 else float(self.scale)

    def inf(self):
        if self.ratio < 1:
            return 0.0 if self.scale >= 0 else float(self.scale)
        return float(self.scale) if self.scale >= 0 else -math.inf

    def limit(self):
        if self.ratio < 1:
            return 0.0
        if self.ratio == 1:
            return float(self.scale)
        return math.inf * np.sign(self.scale)

    def describe(self):
        return f"geometric({self.scale:g}*{self.ratio:g}^n)"


@dataclass(frozen=True)
class CustomRule:
    """Arbitrary pure function of ``n``; properties are checked numerically."""

    fn: Callable
    name: str = "custom"

    def __call__(self, n):
        return float(self.fn(n))

    rate = None

    def sup(self):
        return None

    def inf(self):
        return None

    def limit(self):
        return None

    def describe(self):
        return self.name


@dataclass(frozen=True)
class PowerBatch:
    """Batch sizes ``m_n = base + ceil(scale * n^(1 + delta))``."""

    delta: float
    scale: float = 1.0
    base: int = 1

    def __post_init__(self):
        if self.delta < 0 or self.scale <= 0 or self.base < 1:
            raise ConfigurationError("batch rule needs delta >= 0, scale > 0, base >= 1")
        if self.scale < 1:
            m = self.values(10_000)
            if np.any(np.diff(m) <= 0):
                n = int(np.argmax(np.diff(m) <= 0))
                raise ConfigurationError(f"batch sizes not strictly increasing at n={n}")

    def __call__(self, n):
        return int(self.base + math.ceil(self.scale * n ** (1.0 + self.delta)))

    def values(self, n_max):
        n = np.arange(n_max + 1, dtype=float)
        return self.base + np.ceil(self.scale * n ** (1.0 + self.delta)).astype(np.int64)


@dataclass(frozen=True)
class CustomBatch:
    fn: Callable

    def __call__(self, n):
        return int(self.fn(n))

    def values(self, n_max):
        return np.array([self(n) for n in range(n_max + 1)], dtype=np.int64)


def rule_from_config(spec, theta=None):
    """Build a rule from ``{family = ..., ...}``; bare numbers are constants.

    ``theta_multiple`` (constant family) scales by the cocoercivity
    constant, so step sizes can be declared as multiples of it.
    """
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    spec = dict(spec)
    fam = spec.get("family", "constant")
    if fam == "constant":
        if "theta_multiple" in spec:
            if theta is None:
                raise ConfigurationError("theta_multiple needs a known cocoercivity constant")
            return Constant(float(spec["theta_multiple"]) * theta)
        return Constant(float(spec["value"]))
    if fam == "power":
        return Power(float(spec.get("scale", 1.0)), float(spec["exponent"]),
                     float(spec.get("offset", 1.0)))
    if fam == "geometric":
        return Geometric(float(spec.get("scale", 1.0)), float(spec["ratio"]))
    raise ConfigurationError(f"unknown rule family {fam!r}")


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

class ScheduleValues(NamedTuple):
    lam: float
    gamma: float
    tau: float
    m: Optional[int]
    alpha: float
    beta: float


@dataclass(frozen=True)
class IterationSchedule:
    """Relaxation, step, variance-coupling, batch and drift sequences."""

    lam: object
    gamma: object
    tau: object = Constant(0.0)
    batch: object = None
    alpha: object = Constant(0.0)
    beta: object = Constant(0.0)
    delta: Optional[float] = None
    kappa: Optional[float] = None

    def __post_init__(self):
        lam = self.lam
        if isinstance(lam, (Constant, Power, Geometric)):
            if lam.sup() > 1 or lam.inf() < 0 or lam(0) <= 0:
                raise ConfigurationError(f"relaxation {lam.describe()} leaves ]0,1]")
            if isinstance(lam, Power) and lam.exponent < 0:
                raise ConfigurationError("relaxation parameters cannot grow")
        if isinstance(self.gamma, (Constant, Power, Geometric)) and self.gamma(0) <= 0:
            raise ConfigurationError("step sizes must be positive")
        if isinstance(self.tau, (Constant, Power, Geometric)) and self.tau.inf() < 0:
            raise ConfigurationError("tau must be nonnegative")
        if self.delta is not None and self.kappa is not None:
            check_kappa_delta(self.kappa, self.delta)


def check_kappa_delta(kappa: float, delta: float):
    """Enforce ``kappa in ]1 - delta, 1] and [0, 1]`` and ``delta > 0``."""
    if not delta > 0:
        raise ConfigurationError(f"delta must be positive, got {delta}")
    lo = max(1.0 - delta, 0.0)
    ok = (kappa > 1.0 - delta) and (0.0 <= kappa <= 1.0)
    if not ok:
        raise ConfigurationError(
            f"kappa={kappa} violates kappa in ]1-delta, 1] ∩ [0, 1] = "
            f"]{1.0 - delta:g}, 1] ∩ [0, 1] (delta={delta}); need {lo:g} < kappa <= 1")


def empirical_schedule(delta=0.2, kappa=0.9, gamma=1.0, batch_scale=1.0,
                       lam_scale=1.0) -> IterationSchedule:
    """Schedule for the empirical-gradient oracle:
    ``lambda_n = lam_scale (n+1)^-kappa``, ``m_n = 1 + ceil(c n^(1+delta))``."""
    check_kappa_delta(kappa, delta)
    return IterationSchedule(
        lam=Power(lam_scale, kappa), gamma=Constant(gamma), tau=Constant(0.0),
        batch=PowerBatch(delta, batch_scale), delta=delta, kappa=kappa)


def schedule_eval(s: IterationSchedule, n: int) -> ScheduleValues:
    if n < 0:
        raise ParameterError("iteration index must be >= 0")
    return ScheduleValues(
        s.lam(n), s.gamma(n), s.tau(n),
        None if s.batch is None else s.batch(n),
        s.alpha(n), s.beta(n))


# ---------------------------------------------------------------------------
# Ledger and samplers
# ---------------------------------------------------------------------------

def _generator(seed, *key):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))))


@dataclass(frozen=True)
class GaussianQuadraticSampler:
    """i.i.d. pairs ``K = K_mean + k_std * G``, ``z = z_mean + z_std * g``
    with standard normal ``G``, ``g``.

    Second moments are analytic: ``E[K^T K] = K_mean^T K_mean + M k_std^2 I``
    and ``E[K^T z] = K_mean^T z_mean``.
    """

    K_mean: np.ndarray
    z_mean: np.ndarray
    k_std: float = 1.0
    z_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "K_mean", np.asarray(self.K_mean, dtype=float))
        object.__setattr__(self, "z_mean", np.asarray(self.z_mean, dtype=float))

    @property
    def shape(self):
        return self.K_mean.shape

    def draw(self, rng, count):
        M, N = self.K_mean.shape
        K = np.broadcast_to(self.K_mean, (count, M, N)).copy()
        z = np.broadcast_to(self.z_mean, (count, M)).copy()
        if self.k_std:
            K += self.k_std * rng.standard_normal((count, M, N))
        if self.z_std:
            z += self.z_std * rng.standard_normal((count, M))
        return K, z

    @property
    def degenerate(self) -> bool:
        return self.k_std == 0 and self.z_std == 0

    def second_moments(self):
        M, N = self.K_mean.shape
        EKK = self.K_mean.T @ self.K_mean + M * self.k_std**2 * np.eye(N)
        EKz = self.K_mean.T @ self.z_mean
        return EKK, EKz

    def fingerprint(self):
        return (self.K_mean.tobytes(), self.z_mean.tobytes(), self.k_std, self.z_std)


class SampleLedger:
    """Seeded, replayable record of every random draw of a run.

    Sample pairs ``(K_i, z_i)`` are generated in blocks of ``block_size``
    from generators keyed by ``(seed, SAMPLE_STREAM, block)``, so index ``i``
    always gets the same value. Per-block partial sums of ``K^T K`` and
    ``K^T z`` are kept; at most ``cache_blocks`` raw blocks are held (oldest
    evicted first) and an evicted block is regenerated bit-identically.
    Other consumers (noise oracles, perturbations) get independent
    substreams from :meth:`rng`.
    """

    SAMPLE_STREAM = 0

    def __init__(self, seed: int, block_size: int = 256, cache_blocks: int = 256):
        self.seed = int(seed)
        self.block_size = int(block_size)
        self.cache_blocks = int(cache_blocks)
        self.sampler = None
        self._blocks = {}
        self._block_sums = []   # list of (sum K^T K, sum K^T z) per block

    def bind(self, sampler):
        if self.sampler is None:
            self.sampler = sampler
        elif self.sampler is not sampler and self.sampler.fingerprint() != sampler.fingerprint():
            raise ReproducibilityError("ledger already bound to a different sampler")
        return self

    def rng(self, stream: int, n: int):
        if stream == self.SAMPLE_STREAM:
            raise ReproducibilityError("stream 0 is reserved for the sample pairs")
        return _generator(self.seed, stream, n)

    def _block(self, b):
        blk = self._blocks.get(b)
        if blk is None:
            blk = self.sampler.draw(_generator(self.seed, self.SAMPLE_STREAM, b), self.block_size)
            if len(self._blocks) >= self.cache_blocks:
                # oldest first; sequential runs only move forward
                self._blocks.pop(next(iter(self._blocks)))
            self._blocks[b] = blk
        return blk

    def draws(self, start: int, stop: int):
        """Samples with indices ``start <= i < stop`` as ``(K, z)`` arrays."""
        if self.sampler is None:
            raise ReproducibilityError("ledger has no sampler bound")
        if stop <= start:
            M, N = self.sampler.shape
            return np.empty((0, M, N)), np.empty((0, M))
        bs = self.block_size
        Ks, zs = [], []
        for b in range(start // bs, (stop - 1) // bs + 1):
            K, z = self._block(b)
            lo = max(start - b * bs, 0)
            hi = min(stop - b * bs, bs)
            Ks.append(K[lo:hi])
            zs.append(z[lo:hi])
        return np.concatenate(Ks), np.concatenate(zs)

    def _ensure_block_sums(self, n_blocks):
        while len(self._block_sums) < n_blocks:
            K, z = self._block(len(self._block_sums))
            self._block_sums.append((np.einsum("imk,iml->kl", K, K), np.einsum("imk,im->k", K, z)))

    def prefix_sums(self, m: int):
        """``(sum_{i<m} K_i^T K_i, sum_{i<m} K_i^T z_i)`` in fixed block order."""
        if self.sampler is None:
            raise ReproducibilityError("ledger has no sampler bound")
        M, N = self.sampler.shape
        bs = self.block_size
        full, rest = divmod(m, bs)
        self._ensure_block_sums(full)
        SKK = np.zeros((N, N))
        SKz = np.zeros(N)
        for b in range(full):
            SKK += self._block_sums[b][0]
            SKz += self._block_sums[b][1]
        if rest:
            K, z = self._block(full)
            SKK += np.einsum("imk,iml->kl", K[:rest], K[:rest])
            SKz += np.einsum("imk,im->k", K[:rest], z[:rest])
        return SKK, SKz


class _PrefixCache:
    """Running prefix sums for a monotone sequence of requested sizes."""

    def __init__(self):
        self.m = 0
        self.SKK = None
        self.SKz = None
        self.ledger = None


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

class ExactOracle:
    """``u_n = B x_n``; zero bias and variance."""

    kind = "exact"

    def __init__(self, B: Callable):
        self.B = B

    def estimate(self, x, n, ledger=None):
        return self.B(x)

    def exact(self, x):
        return self.B(x)

    def tau(self, n):
        return 0.0

    def zeta_rate(self):
        return math.inf

    def bias_rate(self):
        return math.inf


class AdditiveNoiseOracle:
    """``u_n = B x_n + sigma_n xi_n`` with ``xi_n`` standard normal.

    Unbiased; the conditional variance is ``dim * sigma_n^2``, independent
    of ``x``, so ``tau_n = 0`` and ``zeta_n = dim * sigma_n^2``.
    """

    kind = "additive_noise"

    def __init__(self, B: Callable, scale_rule, dim: int, stream: int = 1):
        self.B = B
        self.scale_rule = scale_rule
        self.dim = int(dim)
        self.stream = int(stream)

    def estimate(self, x, n, ledger):
        noise = ledger.rng(self.stream, n).standard_normal(self.dim)
        return self.B(x) + self.scale_rule(n) * noise

    def exact(self, x):
        return self.B(x)

    def tau(self, n):
        return 0.0

    def zeta(self, n):
        return self.dim * self.scale_rule(n) ** 2

    def zeta_rate(self):
        r = getattr(self.scale_rule, "rate", None)
        return None if r is None else 2 * r

    def bias_rate(self):
        return math.inf


class EmpiricalQuadraticOracle:
    """Empirical gradient of ``h(x) = 1/2 E||K x - z||^2``::

        u_n = (1 / m_{n+1}) sum_{i < m_{n+1}} K_i^T (K_i x - z_i)

    using the ledger's samples; step ``n`` reuses the first ``m_n`` samples
    and consumes ``m_{n+1} - m_n`` fresh ones.
    """

    kind = "empirical_quadratic"

    def __init__(self, sampler: GaussianQuadraticSampler, batch):
        self.sampler = sampler
        self.batch = batch
        self.EKK, self.EKz = sampler.second_moments()
        self._cache = _PrefixCache()

    def _sums(self, m, ledger):
        c = self._cache
        if c.ledger is not ledger or m < c.m:
            c.m, c.SKK, c.SKz, c.ledger = 0, None, None, ledger
        if c.SKK is None:
            c.SKK, c.SKz = ledger.prefix_sums(m)
        elif m > c.m:
            K, z = ledger.draws(c.m, m)
            c.SKK = c.SKK + np.einsum("imk,iml->kl", K, K)
            c.SKz = c.SKz + np.einsum("imk,im->k", K, z)
        c.m = m
        return c.SKK, c.SKz

    def estimate(self, x, n, ledger):
        ledger.bind(self.sampler)
        m = self.batch(n + 1)
        SKK, SKz = self._sums(m, ledger)
        return (SKK @ x - SKz) / m

    def exact(self, x):
        return self.EKK @ x - self.EKz

    def conditional_bias(self, x, n, ledger):
        """``E[u_n | past] - grad h(x) = (Q_{0,m_n} x - r_{0,m_n}) / m_{n+1}``,
        re-summed from the frozen ledger prefix."""
        ledger.bind(self.sampler)
        if self.sampler.degenerate:
            # every past sample equals its mean, so Q and r vanish identically
            return np.zeros(self.EKK.shape[0])
        m_now, m_next = self.batch(n), self.batch(n + 1)
        SKK, SKz = ledger.prefix_sums(m_now)
        Q = SKK - m_now * self.EKK
        r = SKz - m_now * self.EKz
        return (Q @ x - r) / m_next

    def tau(self, n):
        return 0.0

    def bias_rate(self):
        # ||bias|| ~ sqrt(m_n log log m_n) / m_{n+1} ~ n^-(1+delta)/2
        d = getattr(self.batch, "delta", None)
        return None if d is None else 0.5 * (1.0 + d)

    def zeta_rate(self):
        # (m_{n+1} - m_n) / m_{n+1}^2 ~ n^-(2+delta)
        d = getattr(self.batch, "delta", None)
        return None if d is None else 2.0 + d


def next_estimate(o, x, n: int, ledger: SampleLedger):
    return o.estimate(np.asarray(x, dtype=float), n, ledger)


@dataclass
class MomentEstimate:
    bias_norm: float
    variance: float
    bias_se: float
    variance_se: float
    trials: int


def estimate_conditional_moments(o, x, n: int, trials: int, base_seed: int,
                                 ledger: Optional[SampleLedger] = None) -> MomentEstimate:
    """Monte Carlo estimate of ``||E[u_n | past] - B x||`` and
    ``E[||u_n - E[u_n | past]||^2 | past]``.

    The past is the ledger prefix (indices ``< m_n``) and stays frozen; only
    the fresh draws are resampled across trials, from generators keyed by
    ``base_seed``. Reductions run in a fixed order.
    """
    if trials < 2:
        raise ParameterError("need at least two trials")
    x = np.asarray(x, dtype=float)
    Bx = o.exact(x)
    if o.kind == "exact":
        return MomentEstimate(0.0, 0.0, 0.0, 0.0, trials)
    if o.kind == "additive_noise":
        rng = _generator(base_seed, 1)
        U = Bx + o.scale_rule(n) * rng.standard_normal((trials, o.dim))
    elif o.kind == "empirical_quadratic":
        if ledger is None:
            ledger = SampleLedger(base_seed)
        ledger.bind(o.sampler)
        m_now, m_next = o.batch(n), o.batch(n + 1)
        SKK, SKz = ledger.prefix_sums(m_now)
        past = SKK @ x - SKz
        fresh = m_next - m_now
        rng = _generator(base_seed, 2, n)
        K, z = o.sampler.draw(rng, trials * fresh)
        g = np.einsum("imk,im->ik", K, np.einsum("imk,k->im", K, x) - z)
        g = g.reshape(trials, fresh, -1).sum(axis=1)
        U = (past + g) / m_next
    else:
        raise ParameterError(f"unsupported oracle kind {o.kind!r}")
    mean = U.mean(axis=0)
    dev = U - mean
    sq = np.sum(dev * dev, axis=1)
    variance = float(sq.sum() / (trials - 1))
    variance_se = float(sq.std(ddof=1) / math.sqrt(trials))
    bias = mean - Bx
    bias_se = float(math.sqrt(variance / trials))
    return MomentEstimate(float(np.linalg.norm(bias)), variance, bias_se, variance_se, trials)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSource:
    """Additive resolvent error ``a_n``.

    ``decaying`` draws uniformly from the ball of radius ``magnitude(n)``
    (``dist="ball"``) or as ``magnitude(n) * xi / sqrt(dim)`` with standard
    normal ``xi`` (``dist="gaussian"``). Either way
    ``E||a_n||^2 <= magnitude(n)^2``.
    """

    kind: str = "zero"
    magnitude: object = Constant(0.0)
    dist: str = "ball"
    stream: int = 7

    def __post_init__(self):
        if self.kind not in ("zero", "decaying"):
            raise ConfigurationError(f"unknown perturbation kind {self.kind!r}")
        if self.dist not in ("ball", "gaussian"):
            raise ConfigurationError(f"unknown perturbation distribution {self.dist!r}")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def decaying(cls, magnitude, dist="ball", stream=7):
        return cls("decaying", magnitude, dist, stream)

    def draw(self, n, dim, ledger):
        if self.kind == "zero":
            return np.zeros(dim)
        eps = self.magnitude(n)
        if eps < 0:
            raise ConfigurationError("perturbation magnitude must be nonnegative")
        rng = ledger.rng(self.stream, n)
        xi = rng.standard_normal(dim)
        if self.dist == "gaussian":
            return eps * xi / math.sqrt(dim)
        nrm = np.linalg.norm(xi)
        radius = eps * rng.random() ** (1.0 / dim)
        return radius * xi / nrm if nrm > 0 else np.zeros(dim)


def next_perturbation(p: PerturbationSource, n: int, dim: int, ledger: SampleLedger):
    return p.draw(n, dim, ledger)


# ---------------------------------------------------------------------------
# Admissibility certificate
# ---------------------------------------------------------------------------

@dataclass
class Clause:
    clause: str
    name: str
    passed: bool
    detail: str
    witness: Optional[int] = None
    checked_up_to: Optional[int] = None


@dataclass
class Certificate:
    clauses: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.clauses)

    def failed(self):
        return [c for c in self.clauses if not c.passed]

    def to_dict(self):
        return {"passed": self.passed,
                "clauses": [vars(c).copy() for c in self.clauses]}

    def __str__(self):
        lines = []
        for c in self.clauses:
            tag = "pass" if c.passed else "FAIL"
            lines.append(f"[{tag}] ({c.clause}) {c.name}: {c.detail}")
        return "\n".join(lines)


def series_summable(factors: Sequence, n_check: int = 10_000):
    """Decide whether ``sum_n prod_i rule_i(n)^power_i`` is finite.

    ``factors`` holds ``(rule, power)`` pairs. Built-in families are decided
    from their decay rates; otherwise partial sums up to ``n_check`` are
    inspected and the answer is reported as numerical. Returns
    ``(summable, symbolic, detail)``.
    """
    rates = [getattr(r, "rate", None) for r, _ in factors]
    if all(rt is not None for rt in rates):
        total = 0.0
        for (r, p), rt in zip(factors, rates):
            if rt == math.inf:
                return True, True, "a factor vanishes or decays geometrically"
            total += p * rt
        if total == -math.inf:
            return False, True, "a factor grows geometrically"
        return total > 1.0, True, f"terms ~ n^-{total:g}"
    n = np.arange(n_check + 1)
    terms = np.ones(len(n))
    for r, p in factors:
        terms = terms * np.array([abs(r(k)) ** p for k in n])
    total = float(terms.sum())
    tail = float(terms[len(n) // 2:].sum())
    frac = tail / total if total > 0 else 0.0
    return (np.isfinite(total) and frac <= 0.1), False, f"tail fraction {frac:.3g}"


def _sup_inf_numeric(fn, n_check):
    vals = np.array([fn(n) for n in range(n_check + 1)])
    return vals


def admissibility_certificate(s: IterationSchedule, theta: float, oracle=None,
                              perturbation: Optional[PerturbationSource] = None,
                              n_check: int = 10_000) -> Certificate:
    """Check the step-size, relaxation, error-summability and drift
    hypotheses of the stochastic forward-backward convergence theorem.

    Clause ids: ``e`` step sizes (``inf gamma > 0``, ``sup tau < inf``,
    ``sup (1 + tau) gamma < 2 theta``); ``f`` relaxation (``inf lambda > 0``
    or ``gamma`` constant with ``sum tau < inf`` and ``sum lambda = inf``);
    ``b`` perturbation summability; ``c`` oracle bias summability; ``d``
    variance envelope; ``drift`` for varying resolvents.
    """
    if not theta > 0:
        raise ParameterError("theta must be positive")
    cert = Certificate()
    builtin = (Constant, Power, Geometric)
    lam, gam, tau = s.lam, s.gamma, s.tau

    # (e) -----------------------------------------------------------------
    if isinstance(gam, builtin):
        g_inf = gam.inf()
        cert.clauses.append(Clause("e", "inf gamma_n > 0", g_inf > 0, f"inf gamma = {g_inf:g}"))
    else:
        g = _sup_inf_numeric(gam, n_check)
        cert.clauses.append(Clause("e", "inf gamma_n > 0", bool(g.min() > 0),
                                   f"min gamma = {g.min():g}", checked_up_to=n_check))
    if isinstance(tau, builtin):
        t_sup = tau.sup()
        cert.clauses.append(Clause("e", "sup tau_n < +inf", math.isfinite(t_sup),
                                   f"sup tau = {t_sup:g}"))
    else:
        t = _sup_inf_numeric(tau, n_check)
        cert.clauses.append(Clause("e", "sup tau_n < +inf", bool(np.isfinite(t).all()),
                                   f"max tau = {t.max():g}", checked_up_to=n_check))
    prod = np.array([(1.0 + tau(n)) * gam(n) for n in range(n_check + 1)])
    bad = np.nonzero(prod >= 2 * theta)[0]
    witness = int(bad[0]) if bad.size else None
    exact = isinstance(gam, builtin) and isinstance(tau, builtin)
    sup_val = float(prod.max())
    if exact:
        lim = (1.0 + tau.limit()) * gam.limit()
        sup_val = max(sup_val, lim) if math.isfinite(lim) else math.inf
        ok = sup_val < 2 * theta
        if not ok and witness is None:
            witness = -1
    else:
        ok = witness is None
    cert.clauses.append(Clause(
        "e", "sup (1 + tau_n) gamma_n < 2 theta", bool(ok),
        f"sup (1+tau)gamma = {sup_val:.17g} vs 2 theta = {2 * theta:.17g}", witness,
        None if exact else n_check))

    # (f) -----------------------------------------------------------------
    if isinstance(lam, builtin):
        lam_inf = lam.inf()
        lam_note = ""
    else:
        lam_inf = float(_sup_inf_numeric(lam, n_check).min())
        lam_note = f" (checked up to {n_check})"
    if lam_inf > 0 and isinstance(lam, builtin):
        cert.clauses.append(Clause("f", "inf lambda_n > 0", True, f"inf lambda = {lam_inf:g}"))
    else:
        g_const = isinstance(gam, Constant)
        tau_sum, _, tau_d = series_summable([(tau, 1.0)], n_check)
        lam_sum, lam_sym, lam_d = series_summable([(lam, 1.0)], n_check)
        ok = g_const and tau_sum and not lam_sum
        cert.clauses.append(Clause(
            "f", "inf lambda_n > 0 or [gamma constant, sum tau < inf, sum lambda = inf]", ok,
            f"inf lambda = {lam_inf:g}{lam_note}; gamma constant: {g_const}; "
            f"sum tau: {tau_d}; sum lambda: {lam_d}",
            checked_up_to=None if lam_sym else n_check))

    # (b) -----------------------------------------------------------------
    if perturbation is not None and perturbation.kind != "zero":
        ok, sym, d = series_summable([(lam, 1.0), (perturbation.magnitude, 1.0)], n_check)
        cert.clauses.append(Clause("b", "sum lambda_n sqrt(E||a_n||^2) < inf", ok, d,
                                   checked_up_to=None if sym else n_check))

    # (c), (d) ------------------------------------------------------------
    if oracle is not None:
        lam_rate = getattr(lam, "rate", None)
        b_rate = oracle.bias_rate()
        if b_rate == math.inf:
            cert.clauses.append(Clause("c", "sum sqrt(lambda_n) ||E[u_n|X_n] - Bx_n|| < inf",
                                       True, f"{oracle.kind} oracle is unbiased"))
        elif oracle.kind == "empirical_quadratic" and s.kappa is not None and s.delta is not None:
            try:
                check_kappa_delta(s.kappa, s.delta)
                ok, d = True, f"kappa={s.kappa:g} > 1 - delta={1 - s.delta:g}"
            except ConfigurationError as exc:
                ok, d = False, str(exc)
            cert.clauses.append(Clause("c", "sum sqrt(lambda_n) ||E[u_n|X_n] - Bx_n|| < inf", ok, d))
        elif b_rate is not None and lam_rate is not None:
            total = 0.5 * lam_rate + b_rate
            cert.clauses.append(Clause("c", "sum sqrt(lambda_n) ||E[u_n|X_n] - Bx_n|| < inf",
                                       total > 1, f"terms ~ n^-{total:g} (up to log log)"))
        else:
            cert.clauses.append(Clause("c", "sum sqrt(lambda_n) ||E[u_n|X_n] - Bx_n|| < inf",
                                       False, "bias rate unknown"))
        z_rate = oracle.zeta_rate()
        if z_rate == math.inf:
            cert.clauses.append(Clause("d", "sum sqrt(lambda_n zeta_n) < inf", True, "zero variance"))
        elif z_rate is not None and lam_rate is not None:
            total = 0.5 * (lam_rate + z_rate)
            cert.clauses.append(Clause("d", "sum sqrt(lambda_n zeta_n) < inf", total > 1,
                                       f"terms ~ n^-{total:g}"))
        else:
            cert.clauses.append(Clause("d", "sum sqrt(lambda_n zeta_n) < inf", False,
                                       "variance envelope rate unknown"))

    # drift of varying resolvents ------------------------------------------
    if not (isinstance(s.alpha, Constant) and s.alpha.value == 0):
        ok, sym, d = series_summable([(lam, 0.5), (s.alpha, 1.0)], n_check)
        cert.clauses.append(Clause("drift", "sum sqrt(lambda_n) alpha_n < inf", ok, d,
                                   checked_up_to=None if sym else n_check))
    if not (isinstance(s.beta, Constant) and s.beta.value == 0):
        ok, sym, d = series_summable([(lam, 1.0), (s.beta, 1.0)], n_check)
        cert.clauses.append(Clause("drift", "sum lambda_n beta_n < inf", ok, d,
                                   checked_up_to=None if sym else n_check))
    return cert
