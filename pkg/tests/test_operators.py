import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfbs.errors import ParameterError
from sfbs.operators import (CocoerciveMap, ProxFunction, ResolventOperator, check_cocoercive,
                            check_firmly_nonexpansive, conjugate_prox, conjugate_value,
                            metric_prox, prox, resolvent)
from sfbs.spaces import SpdMetric, operator_norm

from conftest import random_spd

CATALOG = [
    ProxFunction.zero(),
    ProxFunction.l1(0.7),
    ProxFunction.squared_l2(1.3, center=[0.5, -1.0, 0.2]),
    ProxFunction.box([-1.0, 0.0, -0.5], [1.0, 2.0, 0.5]),
    ProxFunction.smoothed_l1(0.8, 0.3),
]
IDS = [f.kind for f in CATALOG]


def grid_argmin(obj, lo=-3.0, hi=3.0, step=1e-3):
    g = np.arange(lo, hi + step / 2, step)
    vals = obj(g)
    return g[int(np.argmin(vals))]


# -- prox ------------------------------------------------------------------

def test_prox_l1_example_against_grid():
    p = prox(ProxFunction.l1(1.0), [2.0, -0.5], 1.0)
    assert np.allclose(p, [1.0, 0.0])
    # separable, so the 2-D grid reduces to two 1-D grids
    for xi, pi in zip([2.0, -0.5], p):
        assert abs(grid_argmin(lambda y: np.abs(y) + 0.5 * (xi - y) ** 2) - pi) <= 1e-3


def test_prox_zero_and_box_examples():
    x = np.array([0.3, -7.0])
    assert np.array_equal(prox(ProxFunction.zero(), x, 5.0), x)
    assert np.allclose(prox(ProxFunction.box(0.0, 1.0), [1.7], 2.0), [1.0])


def test_prox_rejects_nonpositive_gamma():
    with pytest.raises(ParameterError):
        prox(ProxFunction.l1(), [1.0], 0.0)


@pytest.mark.parametrize("f", CATALOG, ids=IDS)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.05, 5.0))
def test_prox_subgradient_optimality(f, seed, gamma):
    rng = np.random.default_rng(seed)
    x = 2 * rng.standard_normal(3)
    p = prox(f, x, gamma)
    g = (x - p) / gamma
    fp = f(p)
    for _ in range(100):
        y = p + rng.standard_normal(3) * rng.choice([1e-3, 1.0, 10.0])
        if f.kind == "box":
            y = np.clip(y, f.lo, f.hi)
        assert f(y) >= fp + g @ (y - p) - 1e-9 * (1 + abs(fp))


@pytest.mark.parametrize("f", CATALOG, ids=IDS)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.05, 5.0))
def test_prox_matches_scalar_metric_prox(f, seed, gamma):
    x = 2 * np.random.default_rng(seed).standard_normal(3)
    a = prox(f, x, gamma)
    b = metric_prox(f, x, SpdMetric.scalar(1.0 / gamma, 3))
    assert np.max(np.abs(a - b)) <= 1e-12 * (1 + np.max(np.abs(a)))


# -- metric prox -----------------------------------------------------------

def test_metric_prox_examples():
    sigma = 2.0
    U = SpdMetric.scalar(1.0 / sigma, 1)
    p = metric_prox(ProxFunction.l1(1.0), [3.0], U)
    assert np.allclose(p, [1.0])
    assert abs(grid_argmin(lambda y: np.abs(y) + 0.5 / sigma * (3.0 - y) ** 2, -4, 4) - 1.0) <= 1e-3
    x = np.array([1.0, -2.0])
    assert np.array_equal(metric_prox(ProxFunction.zero(), x, SpdMetric([[2, 1], [1, 2]])), x)


@given(st.integers(0, 10_000))
def test_metric_prox_squared_l2_linear_solve(seed):
    rng = np.random.default_rng(seed)
    U = random_spd(rng, 4)
    c, x = rng.standard_normal(4), rng.standard_normal(4)
    p = metric_prox(ProxFunction.squared_l2(1.0, c), x, SpdMetric(U))
    assert np.allclose(p, np.linalg.solve(U + np.eye(4), U @ x + c), rtol=0, atol=1e-10)


@pytest.mark.parametrize("f", CATALOG, ids=IDS)
@given(seed=st.integers(0, 10_000))
def test_metric_prox_optimality(f, seed):
    rng = np.random.default_rng(seed)
    U = SpdMetric(random_spd(rng, 3, cond=5.0))
    x = 2 * rng.standard_normal(3)
    p = metric_prox(f, x, U)
    g = U.apply(x - p)
    fp = f(p)
    for _ in range(100):
        y = p + rng.standard_normal(3)
        if f.kind == "box":
            y = np.clip(y, f.lo, f.hi)
        assert f(y) >= fp + g @ (y - p) - 1e-9 * (1 + abs(fp))


# -- conjugates ------------------------------------------------------------

def test_conjugate_prox_examples():
    v = np.array([0.4, -2.0])
    assert np.array_equal(conjugate_prox(ProxFunction.zero(), v, SpdMetric.scalar(3.0, 2)), [0, 0])
    assert np.allclose(conjugate_prox(ProxFunction.l1(1.0), v, SpdMetric.identity(2)), [0.4, -1.0])


@given(st.integers(0, 10_000))
def test_conjugate_prox_squared_l2_direct(seed):
    # g = w/2||.||^2 so g* = ||.||^2/(2w); minimise g*(u) + 1/2||v - u||^2_{U^-1} directly
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.2, 3.0)
    U = random_spd(rng, 3)
    v = rng.standard_normal(3)
    Uinv = np.linalg.inv(U)
    direct = np.linalg.solve(np.eye(3) / w + Uinv, Uinv @ v)
    got = conjugate_prox(ProxFunction.squared_l2(w), v, SpdMetric(U))
    assert np.allclose(got, direct, rtol=0, atol=1e-10)


@pytest.mark.parametrize("f", CATALOG[:4], ids=IDS[:4])
@given(seed=st.integers(0, 10_000))
def test_moreau_identity(f, seed):
    x = 2 * np.random.default_rng(seed).standard_normal(3)
    I = SpdMetric.identity(3)
    assert np.max(np.abs(prox(f, x, 1.0) + conjugate_prox(f, x, I) - x)) <= 1e-10


@pytest.mark.parametrize("f", CATALOG[:4], ids=IDS[:4])
@given(seed=st.integers(0, 10_000))
def test_conjugate_prox_witness(f, seed):
    # w = prox^{U^-1}_{g*}(v) iff U^{-1}(v - w) in dg*(w) iff w in dg(U^{-1}(v - w))
    rng = np.random.default_rng(seed)
    U = SpdMetric(random_spd(rng, 3, cond=4.0))
    v = 2 * rng.standard_normal(3)
    w = conjugate_prox(f, v, U)
    s = U.solve(v - w)
    if f.kind == "box":
        # s lies on the boundary up to roundoff
        assert np.all(s >= f.lo - 1e-12) and np.all(s <= f.hi + 1e-12)
        s = np.clip(s, f.lo, f.hi)
    gs = f(s)
    for _ in range(50):
        y = s + rng.standard_normal(3)
        if f.kind == "box":
            y = np.clip(y, f.lo, f.hi)
        assert f(y) >= gs + w @ (y - s) - 1e-8 * (1 + abs(gs))
    assert np.isfinite(conjugate_value(f, w, tol=1e-12))


# -- resolvents ------------------------------------------------------------

def test_resolvent_examples():
    box = ResolventOperator.subdifferential(ProxFunction.box(0.0, 1.0), 1)
    for g in (0.1, 1.0, 10.0):
        assert np.allclose(resolvent(box, [2.0], g), [1.0])
    x = np.array([3.0, -1.0])
    assert np.array_equal(resolvent(ResolventOperator.zero(2), x, 4.0), x)
    half_sq = ResolventOperator.subdifferential(ProxFunction.squared_l2(1.0), 1)
    y = resolvent(half_sq, [4.0], 1.0)
    assert np.allclose(y + 1.0 * y, [4.0]) and np.allclose(y, [2.0])


def test_resolvent_gamma_range():
    A = ResolventOperator.custom(lambda x, g: x, (1.0, 1.0), 2)
    with pytest.raises(ParameterError):
        resolvent(A, np.zeros(2), 0.5)


# -- checkers --------------------------------------------------------------

def test_check_cocoercive_examples():
    assert check_cocoercive(CocoerciveMap.identity(3, theta=1.0)).passed
    K = np.diag([2.0, 1.0])
    B = CocoerciveMap.quadratic(K, np.zeros(2))
    assert B.theta == pytest.approx(0.25, rel=1e-12)
    assert check_cocoercive(B, 1000, 0).passed
    bad = check_cocoercive(CocoerciveMap.identity(2, theta=2.0))
    assert not bad.passed and bad.worst_margin < 0


@given(st.integers(0, 10_000))
def test_quadratic_gradient_cocoercive_with_operator_norm(seed):
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((4, 3))
    B = CocoerciveMap.quadratic(K, rng.standard_normal(4))
    assert B.theta == pytest.approx(1.0 / operator_norm(K) ** 2, rel=1e-12)
    assert check_cocoercive(B, 200, seed).passed


def test_check_firmly_nonexpansive_examples():
    proj = ResolventOperator.subdifferential(ProxFunction.box(0.0, 1.0), 4)
    assert check_firmly_nonexpansive(proj, 1.0, 1000).passed
    ident = check_firmly_nonexpansive(ResolventOperator.zero(3), 1.0, 100)
    assert ident.passed and abs(ident.worst_margin) < 1e-12
    double = ResolventOperator.custom(lambda x, g: 2.0 * x, dim=2)
    assert not check_firmly_nonexpansive(double, 1.0, 100).passed


def test_box_and_custom_validation():
    with pytest.raises(ParameterError):
        ProxFunction.box(1.0, 0.0)
    with pytest.raises(ParameterError):
        ProxFunction.smoothed_l1(1.0, 0.0)
    with pytest.raises(ParameterError):
        ProxFunction.from_config({"kind": "custom"})
    f = ProxFunction.box(0.0, 1.0)
    assert f([0.5]) == 0.0 and f([1.5]) == np.inf


def test_conjugate_value_indicators_are_strict_by_default():
    assert conjugate_value(ProxFunction.zero(), [1e-15]) == np.inf
    assert conjugate_value(ProxFunction.zero(), [1e-15], tol=1e-12) == 0.0
    assert conjugate_value(ProxFunction.l1(1.0), [1.0, -1.0]) == 0.0
    assert conjugate_value(ProxFunction.box(-1.0, 2.0), [3.0]) == 6.0
