import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sfbs.errors import ConvergenceError, ParameterError, StructuralError
from sfbs.spaces import (BlockVector, LinearMap, SpaceSpec, SpdMetric, inner, load_matrix,
                         metric_norm, metric_sqrt_apply, norm, operator_norm, save_matrix_text)

from conftest import random_spd

# zero or bounded away from the underflow range so squares stay representable
finite = st.one_of(st.just(0.0), st.floats(1e-6, 1e3), st.floats(-1e3, -1e-6))


def test_inner_examples():
    sp = SpaceSpec((2,))
    assert inner(sp, [1, 2], [3, 4]) == 11.0
    assert inner(sp, [0, 0], [7.5, -2]) == 0.0
    rng = np.random.default_rng(1)
    x = rng.standard_normal(2)
    assert inner(sp, x, x) == pytest.approx(norm(x) ** 2, rel=1e-15)


def test_inner_shape_mismatch():
    with pytest.raises(StructuralError):
        inner(SpaceSpec((2,)), [1, 2, 3], [1, 2, 3])


def test_space_and_block_invariants():
    with pytest.raises(StructuralError):
        SpaceSpec(())
    with pytest.raises(StructuralError):
        SpaceSpec((2, 0))
    sp = SpaceSpec((2, 3))
    with pytest.raises(StructuralError):
        BlockVector(sp, [np.zeros(2)])
    with pytest.raises(StructuralError):
        BlockVector(sp, [np.zeros(2), np.zeros(2)])
    with pytest.raises(StructuralError):
        BlockVector(sp, [np.zeros(2), np.array([0, np.nan, 0])])
    with pytest.raises(StructuralError):
        sp.zeros() + SpaceSpec((5,)).zeros()


@given(arrays(float, 5, elements=finite), arrays(float, 5, elements=finite),
       st.floats(-10, 10, allow_nan=False))
def test_block_arithmetic_exact(a, b, s):
    sp = SpaceSpec((2, 3))
    x, y = BlockVector.from_flat(sp, a), BlockVector.from_flat(sp, b)
    assert np.array_equal((x + y).flat(), np.concatenate([a[:2] + b[:2], a[2:] + b[2:]]))
    assert np.array_equal((s * x).flat(), np.concatenate([s * a[:2], s * a[2:]]))
    assert np.array_equal(x.axpy(s, y).flat(), np.concatenate([s * a[:2] + b[:2], s * a[2:] + b[2:]]))
    assert x.block_norms_sq().sum() == pytest.approx(norm(x) ** 2, rel=1e-12, abs=1e-300)


@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_inner_symmetric_bilinear(a, b):
    sp = SpaceSpec((4,))
    assert inner(sp, a, b) == inner(sp, b, a)
    assert inner(sp, a, a) >= 0
    assert (inner(sp, a, a) == 0) == (not np.any(a))


def test_metric_norm_examples():
    assert metric_norm(SpdMetric.identity(2), [3, 4]) == 5.0
    assert metric_norm(SpdMetric.diag([4, 1]), [1, 0]) == 2.0
    rng = np.random.default_rng(2)
    U = random_spd(rng, 4)
    x = rng.standard_normal(4)
    brute = np.sqrt(sum(x[i] * U[i, j] * x[j] for i in range(4) for j in range(4)))
    assert metric_norm(SpdMetric(U), x) == pytest.approx(brute, rel=1e-12)


def test_metric_construction_rejects():
    with pytest.raises(ParameterError):
        SpdMetric([[1, 2], [0, 1]])
    with pytest.raises(ParameterError):
        SpdMetric([[1, 0], [0, -1]])
    with pytest.raises(StructuralError):
        SpdMetric([1, 2, 3])


def test_metric_sqrt_examples():
    assert np.allclose(metric_sqrt_apply(SpdMetric.diag([4, 9]), [1, 1]), [2, 3])
    x = np.array([0.3, -1.2, 5.0])
    assert np.array_equal(metric_sqrt_apply(SpdMetric.identity(3), x), x)


@given(st.integers(0, 10_000))
def test_metric_sqrt_composition(seed):
    rng = np.random.default_rng(seed)
    U = SpdMetric(random_spd(rng, 5, cond=1e3))
    x = rng.standard_normal(5)
    Ux = U.apply(x)
    assert np.linalg.norm(metric_sqrt_apply(U, metric_sqrt_apply(U, x)) - Ux) <= 1e-10 * np.linalg.norm(Ux)
    lam_min = U.min_eigenvalue
    assert metric_norm(U, x) >= np.sqrt(lam_min) * np.linalg.norm(x) * (1 - 1e-12)
    assert np.allclose(U.solve(Ux), x, rtol=1e-9, atol=1e-9)


def test_operator_norm_examples():
    assert operator_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-10)
    assert operator_norm(np.zeros((3, 2))) == 0.0
    rng = np.random.default_rng(3)
    L = rng.standard_normal((5, 4))
    oracle = np.sqrt(np.linalg.eigvalsh(L.T @ L)[-1])
    assert abs(operator_norm(L, tol=1e-10) - oracle) <= 1e-10 * oracle


def test_operator_norm_orthogonal_start_restarts():
    # all-ones start is orthogonal to the top singular vector
    L = np.diag([5.0, 1.0]) @ np.array([[1, -1], [1, 1]]) / np.sqrt(2)
    assert operator_norm(L) == pytest.approx(5.0, rel=1e-10)


def test_operator_norm_nonconvergence_carries_estimate():
    L = np.diag([1.0, 0.999999])
    with pytest.raises(ConvergenceError) as info:
        operator_norm(L + 1e-3 * np.array([[0, 1], [1, 0]]), tol=1e-14, max_iter=2)
    assert info.value.estimate is not None
    with pytest.raises(ParameterError):
        operator_norm(L, tol=0)


@given(st.integers(0, 10_000))
def test_operator_norm_bounds_and_adjoint(seed):
    rng = np.random.default_rng(seed)
    L = LinearMap(rng.standard_normal((4, 3)))
    s = operator_norm(L)
    assert L.max_column_norm() * (1 - 1e-12) <= s <= L.frobenius() * (1 + 1e-12)
    for _ in range(100):
        x, y = rng.standard_normal(3), rng.standard_normal(4)
        lhs, rhs = L.apply(x) @ y, x @ L.adjoint.apply(y)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_matrix_text_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    M = rng.standard_normal((3, 4)) * 10.0 ** rng.integers(-300, 300, (3, 4))
    save_matrix_text(tmp_path / "m.txt", M)
    assert np.array_equal(load_matrix(tmp_path / "m.txt"), M)
    (tmp_path / "m.json").write_text("[[1, 2], [3, 4]]")
    assert np.array_equal(load_matrix(tmp_path / "m.json"), [[1, 2], [3, 4]])
    (tmp_path / "bad.txt").write_text("2 2\n1 2 3")
    with pytest.raises(StructuralError):
        load_matrix(tmp_path / "bad.txt")
