"""Experiment configuration: TOML files validated against a JSON schema.

Matrices are given by file path (relative to the config file), as inline
lists of at most 16 entries, or as ``"identity:N"`` / ``"difference:N"``.
Rules (step sizes, relaxations, noise scales) are numbers or tables such as
``{ family = "power", scale = 1.0, exponent = 0.9 }``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import tomli

from .engine import FbProblem, StoppingRule, VaryingResolventFamily, moreau_l1_family
from .errors import ConfigurationError
from .operators import CocoerciveMap, DemiregularityFlag, ProxFunction, ResolventOperator
from .primal_dual import DualBlock, PdModel, PdOracleBundle, SmoothFunction
from .spaces import LinearMap, SpdMetric, load_matrix
from .stochastic import (AdditiveNoiseOracle, EmpiricalQuadraticOracle, ExactOracle,
                         GaussianQuadraticSampler, IterationSchedule, PerturbationSource,
                         PowerBatch, check_kappa_delta, rule_from_config)

__all__ = ["SCHEMA", "Experiment", "load_config", "build_experiment", "config_digest",
           "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "SFBS_OUTPUT_ROOT"
MAX_INLINE = 16

# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_number = {"type": "number"}
_rule = {
    "oneOf": [
        _number,
        {"type": "object", "additionalProperties": False, "required": ["family"],
         "properties": {"family": {"enum": ["constant", "power", "geometric"]},
                        "value": _number, "theta_multiple": _number, "scale": _number,
                        "exponent": _number, "offset": _number, "ratio": _number}},
    ]
}
_matrix = {"oneOf": [{"type": "string"}, _number,
                     {"type": "array", "maxItems": MAX_INLINE, "items": _number},
                     {"type": "array", "items": {"type": "array", "items": _number}}]}
_function = {
    "type": "object", "additionalProperties": False, "required": ["kind"],
    "properties": {"kind": {"enum": ["zero", "l1", "squared_l2", "box", "smoothed_l1"]},
                   "weight": _number, "center": _number, "lo": _number, "hi": _number,
                   "rho": _number},
}
_smooth = {
    "type": "object", "additionalProperties": False, "required": ["kind"],
    "properties": {"kind": {"enum": ["quadratic", "expected_quadratic", "zero"]},
                   "K": _matrix, "z": _matrix, "k_std": _number, "z_std": _number,
                   "dim": {"type": "integer", "minimum": 1}},
}
_perturb = {
    "type": "object", "additionalProperties": False,
    "properties": {"kind": {"enum": ["zero", "decaying"]}, "magnitude": _rule,
                   "dist": {"enum": ["ball", "gaussian"]}},
}
_demireg = {"type": "object", "additionalProperties": False,
            "properties": {"A": {"type": "boolean"}, "B": {"type": "boolean"},
                           "justification": {"type": "string"}}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sfbs experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "schedule", "run"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "problem": {
            "type": "object", "additionalProperties": False, "required": ["type"],
            "properties": {
                "type": {"enum": ["fb", "pd"]},
                "f": _function,
                "smooth": _smooth,
                "z_ref": {"type": "string"},
                "x0": _matrix,
                "demiregularity": _demireg,
                "varying": {"type": "object", "additionalProperties": False,
                            "required": ["kind", "rho"],
                            "properties": {"kind": {"enum": ["moreau_l1"]}, "rho": _rule}},
                "W": _matrix,
                "mu": {"oneOf": [_number, {"enum": ["auto", "estimate"]}]},
                "dual": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "additionalProperties": False, "required": ["g", "L", "U"],
                    "properties": {"g": _function, "L": _matrix, "U": _matrix,
                                   "jstar": {"type": "object", "additionalProperties": False,
                                             "required": ["kind", "rho"],
                                             "properties": {"kind": {"enum": ["scaled_norm"]},
                                                            "rho": _number}},
                                   "nu": {"oneOf": [_number, {"enum": ["auto", "estimate"]}]}}}},
            },
        },
        "oracle": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["exact", "additive_noise", "empirical_quadratic"]},
                           "scale": _rule, "dual_scale": _rule},
        },
        "perturbation": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["zero", "decaying"]}, "magnitude": _rule,
                           "dist": {"enum": ["ball", "gaussian"]}, "dual": _perturb},
        },
        "schedule": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["empirical"]},
                "lambda": _rule, "gamma": _rule, "tau": _rule,
                "delta": _number, "kappa": _number,
                "batch": {"type": "object", "additionalProperties": False, "required": ["delta"],
                          "properties": {"delta": _number, "scale": _number,
                                         "base": {"type": "integer", "minimum": 1}}},
            },
        },
        "run": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
                "max_iters": {"type": "integer", "minimum": 0},
                "residual_tol": {"type": "number", "minimum": 0},
                "thin": {"type": "integer", "minimum": 1},
                "audit": {"type": "boolean"},
                "force": {"type": "boolean"},
                "workers": {"type": "integer", "minimum": 1},
                "fejer_budget": {"oneOf": [{"type": "number", "minimum": 0},
                                           {"enum": ["realized"]}]},
                "n_check": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"directory": {"type": "string"},
                           "formats": {"type": "array", "items": {"enum": ["csv"]}}},
        },
        "reproduce": {
            "type": "object", "additionalProperties": False,
            "properties": {"trials": {"type": "integer", "minimum": 2},
                           "fit_from": {"type": "integer", "minimum": 1},
                           "seed": {"type": "integer"},
                           "max_iters": {"type": "integer", "minimum": 2}},
        },
    },
}


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def config_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _field_path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def load_config(path):
    """Parse and validate; returns ``(config dict, raw bytes)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    try:
        cfg = tomli.loads(raw.decode("utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        msg = e.message
        if e.validator == "additionalProperties":
            msg = f"unknown key ({e.message})"
        raise ConfigurationError(f"{path}: field {_field_path(e)}: {msg}")
    return cfg, raw


def _matrix(spec, base: Path) -> np.ndarray:
    if isinstance(spec, str):
        if ":" in spec and spec.split(":", 1)[0] in ("identity", "difference"):
            kind, n = spec.split(":", 1)
            n = int(n)
            return np.eye(n) if kind == "identity" else LinearMap.difference(n).matrix.copy()
        p = base / spec
        if not p.exists():
            raise ConfigurationError(f"referenced file {p} does not exist")
        return load_matrix(p)
    arr = np.asarray(spec, dtype=float)
    if arr.size > MAX_INLINE:
        raise ConfigurationError(f"inline matrices are limited to {MAX_INLINE} entries")
    return arr


def _vector(spec, base):
    return _matrix(spec, base).reshape(-1)


def _metric(spec, dim, base) -> SpdMetric:
    if isinstance(spec, (int, float)):
        return SpdMetric.scalar(float(spec), dim)
    m = _matrix(spec, base)
    if m.ndim == 1:
        return SpdMetric.diag(m)
    return SpdMetric(m)


def _load_reference(path: Path) -> dict:
    if not path.exists():
        raise ConfigurationError(f"reference fixture {path} does not exist")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Experiment:
    """Everything a run needs, built from one configuration file."""

    name: str
    path: Path
    config: dict
    digest: str
    kind: str
    schedule: IterationSchedule
    stop: StoppingRule
    seeds: list
    output_dir: Path
    problem: Optional[FbProblem] = None
    oracle: object = None
    perturbation: Optional[PerturbationSource] = None
    family: Optional[VaryingResolventFamily] = None
    model: Optional[PdModel] = None
    oracles: Optional[PdOracleBundle] = None
    x0: Optional[np.ndarray] = None
    v0: Optional[list] = None
    z_ref: list = field(default_factory=list)
    reference: Optional[dict] = None
    audit: bool = True
    force: bool = False
    workers: int = 1
    fejer_budget: object = 0.0
    n_check: int = 10_000
    residual_tol: Optional[float] = None

    @property
    def stochastic(self) -> bool:
        if self.kind == "fb":
            return self.oracle.kind != "exact" or self.perturbation.kind != "zero"
        o = self.oracles
        return (any(s.kind != "exact" for s in [o.u] + o.s) or o.b.kind != "zero"
                or any(c.kind != "zero" for c in o.c))

    def deterministic(self) -> "Experiment":
        """Same problem and schedule with exact oracles and no perturbations."""
        if self.kind == "fb":
            return dataclasses.replace(self, oracle=ExactOracle(self.problem.B),
                                       perturbation=PerturbationSource.zero())
        return dataclasses.replace(self, oracles=PdOracleBundle.exact(self.model))


def _schedule(cfg, theta, base) -> IterationSchedule:
    sc = cfg.get("schedule", {})
    if sc.get("preset") == "empirical":
        delta = float(sc.get("delta", 0.2))
        kappa = float(sc.get("kappa", 0.9))
        check_kappa_delta(kappa, delta)
        batch = sc.get("batch", {"delta": delta})
        if float(batch["delta"]) != delta:
            raise ConfigurationError("schedule.batch.delta must equal schedule.delta")
        lam = rule_from_config(sc.get("lambda", {"family": "power", "exponent": kappa}), theta)
        if getattr(lam, "exponent", kappa) != kappa:
            raise ConfigurationError("the empirical preset needs lambda_n ~ (n+1)^-kappa")
        return IterationSchedule(
            lam=lam, gamma=rule_from_config(sc.get("gamma", 1.0), theta),
            tau=rule_from_config(sc.get("tau", 0.0), theta),
            batch=PowerBatch(delta, float(batch.get("scale", 1.0)), int(batch.get("base", 1))),
            delta=delta, kappa=kappa)
    batch = sc.get("batch")
    return IterationSchedule(
        lam=rule_from_config(sc.get("lambda", 1.0), theta),
        gamma=rule_from_config(sc.get("gamma", 1.0), theta),
        tau=rule_from_config(sc.get("tau", 0.0), theta),
        batch=None if batch is None else PowerBatch(float(batch["delta"]),
                                                   float(batch.get("scale", 1.0)),
                                                   int(batch.get("base", 1))),
        delta=sc.get("delta"), kappa=sc.get("kappa"))


def _smooth(spec, base):
    kind = spec["kind"]
    if kind == "zero":
        return SmoothFunction.zero(int(spec["dim"])), None
    K = _matrix(spec["K"], base)
    z = _vector(spec["z"], base)
    if K.ndim != 2 or K.shape[0] != z.size:
        raise ConfigurationError("smooth.K and smooth.z do not conform")
    if kind == "quadratic":
        return SmoothFunction.quadratic(K, z), None
    sampler = GaussianQuadraticSampler(K, z, float(spec.get("k_std", 1.0)),
                                       float(spec.get("z_std", 1.0)))
    return SmoothFunction.expected_quadratic(sampler), sampler


def _perturbation(spec, stream, theta) -> PerturbationSource:
    if not spec or spec.get("kind", "zero") == "zero":
        return PerturbationSource.zero()
    if "magnitude" not in spec:
        raise ConfigurationError("decaying perturbations need a magnitude rule")
    return PerturbationSource.decaying(rule_from_config(spec["magnitude"], theta),
                                       spec.get("dist", "ball"), stream)


def _primal_oracle(ocfg, grad, dim, sampler, sched, theta):
    kind = ocfg.get("kind", "exact")
    if kind == "exact":
        return ExactOracle(grad)
    if kind == "additive_noise":
        if "scale" not in ocfg:
            raise ConfigurationError("additive_noise oracle needs oracle.scale")
        return AdditiveNoiseOracle(grad, rule_from_config(ocfg["scale"], theta), dim, stream=1)
    if sampler is None:
        raise ConfigurationError("empirical_quadratic oracle needs smooth.kind = expected_quadratic")
    if sched.batch is None:
        raise ConfigurationError("empirical_quadratic oracle needs a batch rule (schedule.batch)")
    return EmpiricalQuadraticOracle(sampler, sched.batch)


def build_experiment(path, cfg: Optional[dict] = None, raw: Optional[bytes] = None) -> Experiment:
    """Build problem, oracles, schedule and stopping rule from a config file."""
    path = Path(path).resolve()
    if cfg is None:
        cfg, raw = load_config(path)
    base = path.parent
    prob_cfg = cfg["problem"]
    run_cfg = cfg.get("run", {})
    ocfg = cfg.get("oracle", {})
    pcfg = cfg.get("perturbation", {})
    kind = prob_cfg["type"]
    if "smooth" not in prob_cfg:
        raise ConfigurationError("problem.smooth is required")
    h, sampler = _smooth(prob_cfg["smooth"], base)
    f = ProxFunction.from_config(prob_cfg.get("f", {"kind": "zero"}))
    dem = prob_cfg.get("demiregularity", {})
    flag = DemiregularityFlag(dem.get("A", False), dem.get("B", False), dem.get("justification", ""))
    reference = None
    if "z_ref" in prob_cfg:
        reference = _load_reference(base / prob_cfg["z_ref"])
    x0 = None if "x0" not in prob_cfg else _vector(prob_cfg["x0"], base)
    if x0 is not None and x0.size != h.dim:
        raise ConfigurationError(f"problem.x0 has length {x0.size}, expected {h.dim}")

    out = Path(cfg.get("output", {}).get("directory", f"out/{cfg.get('name', path.stem)}"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    output_dir = (Path(root) / out.name) if root else (out if out.is_absolute() else base / out)
    max_iters = int(run_cfg.get("max_iters", 1000))
    tol = run_cfg.get("residual_tol")
    stop = StoppingRule(max_iters, float(tol) if tol is not None else 0.0,
                        int(run_cfg.get("thin", 1)))
    common = dict(
        name=cfg.get("name", path.stem), path=path, config=cfg,
        digest=config_digest(raw if raw is not None else path.read_bytes()), kind=kind,
        stop=stop, seeds=list(run_cfg.get("seeds", [0])), output_dir=output_dir,
        x0=x0, reference=reference, audit=bool(run_cfg.get("audit", True)),
        force=bool(run_cfg.get("force", False)), workers=int(run_cfg.get("workers", 1)),
        fejer_budget=run_cfg.get("fejer_budget", 0.0), n_check=int(run_cfg.get("n_check", 10_000)),
        residual_tol=None if tol is None else float(tol))

    if kind == "fb":
        for key in ("W", "mu", "dual"):
            if key in prob_cfg:
                raise ConfigurationError(f"problem.{key} only applies to type = 'pd'")
        if h.kind == "quadratic":
            B = _quadratic_map(prob_cfg["smooth"], base)
        elif h.kind == "expected_quadratic":
            EKK, EKz = sampler.second_moments()
            B = CocoerciveMap.affine(EKK, EKz)
        else:
            raise ConfigurationError("fb problems need a quadratic smooth term")
        A = ResolventOperator.subdifferential(f, h.dim)
        z_ref = [np.asarray(reference["x"], dtype=float)] if reference else []

        def objective(x, f=f, h=h):
            return f(x) + h(x)
        prob = FbProblem(A, B, z_ref, flag, None, objective, common["name"])
        sched = _schedule(cfg, B.theta, base)
        family = None
        if "varying" in prob_cfg:
            if f.kind != "l1":
                raise ConfigurationError("varying.kind = 'moreau_l1' needs f.kind = 'l1'")
            rho = rule_from_config(prob_cfg["varying"]["rho"], B.theta)
            family = moreau_l1_family(f.weight, rho, h.dim)
            sched = dataclasses.replace(sched, alpha=family.alpha, beta=family.beta)
        if "dual_scale" in ocfg or "dual" in pcfg:
            raise ConfigurationError("dual oracle/perturbation settings only apply to pd problems")
        oracle = _primal_oracle(ocfg, B, h.dim, sampler, sched, B.theta)
        return Experiment(schedule=sched, problem=prob, oracle=oracle,
                          perturbation=_perturbation(pcfg, 7, B.theta), family=family,
                          z_ref=z_ref, **common)

    # primal-dual
    if "varying" in prob_cfg:
        raise ConfigurationError("problem.varying is only supported for fb problems")
    if "dual" not in prob_cfg:
        raise ConfigurationError("pd problems need at least one [[problem.dual]] block")
    W = _metric(prob_cfg.get("W", 1.0), h.dim, base)
    blocks = []
    for k, d in enumerate(prob_cfg["dual"]):
        L = LinearMap(_matrix(d["L"], base))
        U = _metric(d["U"], L.codomain_dim, base)
        jstar = None
        if "jstar" in d:
            jstar = SmoothFunction.scaled_norm(float(d["jstar"]["rho"]), L.codomain_dim)
        nu = d.get("nu", "auto")
        nu = None if nu in ("auto", "estimate") else float(nu)
        if jstar is None and nu is None:
            raise ConfigurationError(f"problem.dual[{k}] has no jstar and needs a numeric nu")
        blocks.append(DualBlock(ProxFunction.from_config(d["g"], block=k + 1), L, U, jstar, nu))
    mu = prob_cfg.get("mu", "auto")
    if mu == "estimate":
        from .primal_dual import LIPSCHITZ_SAFETY, estimate_lipschitz
        mu = LIPSCHITZ_SAFETY * estimate_lipschitz(h, W)
    model = PdModel(f, h, blocks, W, None if mu == "auto" else float(mu), demiregularity=flag)
    sched = _schedule(cfg, None, base)
    u = _primal_oracle(ocfg, h.grad, h.dim, sampler, sched, None)
    if "dual_scale" in ocfg:
        scale = rule_from_config(ocfg["dual_scale"])
        s = [AdditiveNoiseOracle(b.jstar.grad, scale, b.dim, stream=2 + k)
             for k, b in enumerate(blocks)]
    else:
        s = [ExactOracle(b.jstar.grad) for b in blocks]
    c = [_perturbation(pcfg.get("dual"), 8 + k, None) for k in range(len(blocks))]
    oracles = PdOracleBundle(u, s, _perturbation(pcfg, 7, None), c)
    z_ref = []
    v0 = None
    if reference:
        z_ref = [(np.asarray(reference["x"], dtype=float),
                  [np.asarray(v, dtype=float) for v in reference["v"]])]
    return Experiment(schedule=sched, model=model, oracles=oracles, z_ref=z_ref, v0=v0, **common)


def _quadratic_map(spec, base):
    return CocoerciveMap.quadratic(_matrix(spec["K"], base), _vector(spec["z"], base))
