"""Finite-dimensional inner-product spaces, block vectors, linear maps and
SPD metrics.

Everything is dense ``float64``. Product spaces ``H + G_1 + ... + G_q`` are
described by a :class:`SpaceSpec` listing the block dimensions; a
:class:`BlockVector` stores one coordinate vector per block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, ParameterError, StructuralError

__all__ = [
    "SpaceSpec",
    "BlockVector",
    "LinearMap",
    "SpdMetric",
    "inner",
    "norm",
    "metric_norm",
    "metric_sqrt_apply",
    "operator_norm",
    "load_matrix_text",
    "save_matrix_text",
    "load_matrix_json",
    "load_matrix",
]


@dataclass(frozen=True)
class SpaceSpec:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise StructuralError("a space needs at least one block")
        if any(d < 1 for d in dims):
            raise StructuralError(f"block dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def total(self) -> int:
        return sum(self.dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.dims)]).astype(int))

    def zeros(self) -> "BlockVector":
        return BlockVector(self, [np.zeros(d) for d in self.dims])


class BlockVector:
    """A point of a product space.

    Arithmetic is block-wise and exact to IEEE rounding of the underlying
    numpy operations.
    """

    __slots__ = ("space", "blocks")

    def __init__(self, space: SpaceSpec, blocks: Sequence[np.ndarray]):
        blocks = [np.asarray(b, dtype=float).reshape(-1) for b in blocks]
        if len(blocks) != len(space.dims):
            raise StructuralError(
                f"expected {len(space.dims)} blocks, got {len(blocks)}")
        for k, (b, d) in enumerate(zip(blocks, space.dims)):
            if b.shape[0] != d:
                raise StructuralError(f"block {k} has length {b.shape[0]}, expected {d}")
            if not np.all(np.isfinite(b)):
                raise StructuralError(f"block {k} has non-finite entries")
        self.space = space
        self.blocks = blocks

    @classmethod
    def from_flat(cls, space: SpaceSpec, flat) -> "BlockVector":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.shape[0] != space.total:
            raise StructuralError(f"flat vector has length {flat.shape[0]}, expected {space.total}")
        off = space.offsets
        return cls(space, [flat[off[k]:off[k + 1]].copy() for k in range(len(space.dims))])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks)

    def _check(self, other):
        if not isinstance(other, BlockVector) or other.space != self.space:
            raise StructuralError("block vectors live in different spaces")

    def __add__(self, other):
        self._check(other)
        return BlockVector(self.space, [a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other):
        self._check(other)
        return BlockVector(self.space, [a - b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, scalar):
        return BlockVector(self.space, [scalar * a for a in self.blocks])

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def axpy(self, a: float, y: "BlockVector") -> "BlockVector":
        """Return ``a * self + y``."""
        self._check(y)
        return BlockVector(self.space, [a * s + t for s, t in zip(self.blocks, y.blocks)])

    def block_norms_sq(self) -> np.ndarray:
        return np.array([float(b @ b) for b in self.blocks])

    def __repr__(self):
        return f"BlockVector(dims={self.space.dims})"


def _as_flat(x) -> np.ndarray:
    if isinstance(x, BlockVector):
        return x.flat()
    return np.asarray(x, dtype=float).reshape(-1)


def inner(space: SpaceSpec, x, y) -> float:
    """Inner product of two points of ``space`` (flat arrays or block vectors)."""
    xf, yf = _as_flat(x), _as_flat(y)
    if xf.shape[0] != space.total or yf.shape[0] != space.total:
        raise StructuralError(
            f"vectors of length {xf.shape[0]} and {yf.shape[0]} do not conform to {space.dims}")
    return float(xf @ yf)


def norm(x) -> float:
    xf = _as_flat(x)
    return float(np.sqrt(np.sum(xf * xf)))


class LinearMap:
    """Dense linear map ``R^cols -> R^rows`` with its adjoint (the transpose)."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=float)
        if m.ndim == 1:
            m = m.reshape(1, -1)
        if m.ndim != 2:
            raise StructuralError("a linear map needs a 2-d matrix")
        if not np.all(np.isfinite(m)):
            raise StructuralError("matrix has non-finite entries")
        m.setflags(write=False)
        self.matrix = m
        self._adjoint = None

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim))

    @classmethod
    def difference(cls, dim):
        """Forward finite differences ``(Dx)_i = x_{i+1} - x_i``."""
        d = np.zeros((dim - 1, dim))
        idx = np.arange(dim - 1)
        d[idx, idx] = -1.0
        d[idx, idx + 1] = 1.0
        return cls(d)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def domain_dim(self):
        return self.matrix.shape[1]

    @property
    def codomain_dim(self):
        return self.matrix.shape[0]

    @property
    def adjoint(self) -> "LinearMap":
        if self._adjoint is None:
            adj = LinearMap.__new__(LinearMap)
            adj.matrix = self.matrix.T
            adj._adjoint = self
            self._adjoint = adj
        return self._adjoint

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.domain_dim:
            raise StructuralError(f"map expects length {self.domain_dim}, got {x.shape[-1]}")
        return self.matrix @ x

    __call__ = apply

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.matrix))

    def max_column_norm(self) -> float:
        if self.matrix.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.matrix, axis=0)))


class SpdMetric:
    """Symmetric positive-definite metric operator.

    The eigendecomposition is computed once at construction; square root,
    inverse and inverse square root are cached from it.
    """

    def __init__(self, matrix, sym_tol: float = 1e-12):
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise StructuralError("metric must be a square matrix")
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if np.max(np.abs(m - m.T), initial=0.0) > sym_tol * scale:
            raise ParameterError("metric is not symmetric")
        m = 0.5 * (m + m.T)
        evals, evecs = np.linalg.eigh(m)
        if evals[0] <= 0:
            raise ParameterError(f"metric is not positive definite (min eigenvalue {evals[0]:.3g})")
        self.matrix = m
        self.eigenvalues = evals
        self.dim = m.shape[0]
        off = m - np.diag(np.diag(m))
        self.is_diagonal = not np.any(off)
        if self.is_diagonal:
            d = np.diag(m).copy()
            self.diagonal = d
            self._sqrt = np.diag(np.sqrt(d))
            self._inv = np.diag(1.0 / d)
            self._inv_sqrt = np.diag(1.0 / np.sqrt(d))
        else:
            self.diagonal = None
            self._sqrt = (evecs * np.sqrt(evals)) @ evecs.T
            self._inv = (evecs / evals) @ evecs.T
            self._inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
        for a in (self.matrix, self._sqrt, self._inv, self._inv_sqrt):
            a.setflags(write=False)

    @classmethod
    def scalar(cls, value: float, dim: int) -> "SpdMetric":
        return cls(value * np.eye(dim))

    @classmethod
    def diag(cls, values) -> "SpdMetric":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim))

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max_eigenvalue(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def sqrt_matrix(self):
        return self._sqrt

    @property
    def inv_matrix(self):
        return self._inv

    def _conform(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise StructuralError(f"metric of size {self.dim} applied to length {x.shape[-1]}")
        return x

    def apply(self, x):
        x = self._conform(x)
        if self.is_diagonal:
            return self.diagonal * x
        return self.matrix @ x

    def solve(self, x):
        """Apply the inverse metric."""
        x = self._conform(x)
        if self.is_diagonal:
            return x / self.diagonal
        return self._inv @ x

    def sqrt_apply(self, x):
        x = self._conform(x)
        return self._sqrt @ x

    def inverse(self) -> "SpdMetric":
        return SpdMetric(self._inv if not self.is_diagonal else np.diag(1.0 / self.diagonal))


def metric_norm(U: SpdMetric, x) -> float:
    """``sqrt(<x, U x>)``."""
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(max(float(x @ U.apply(x)), 0.0)))


def metric_sqrt_apply(U: SpdMetric, x) -> np.ndarray:
    return U.sqrt_apply(x)


def operator_norm(L, tol: float = 1e-10, max_iter: int = 100000, seed: int = 0) -> float:
    """Spectral norm of ``L`` by power iteration on ``L^T L``.

    Starts from the normalised all-ones vector. If the estimate stalls below
    ``max(||L||_F / sqrt(rank bound), max column norm)`` (a start orthogonal
    to the top singular space), restarts once from a seeded random vector.

    Raises
    ------
    ConvergenceError
        If the relative change has not dropped below ``tol`` after
        ``max_iter`` iterations; the last estimate is attached.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if not isinstance(L, LinearMap):
        L = LinearMap(L)
    A = L.matrix
    if A.size == 0 or not np.any(A):
        return 0.0
    floor = max(L.frobenius() / np.sqrt(min(A.shape)), L.max_column_norm())

    def iterate(v):
        v = v / np.linalg.norm(v)
        sigma_sq = float(np.linalg.norm(A @ v) ** 2)
        for _ in range(max_iter):
            w = A.T @ (A @ v)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return 0.0, True
            v = w / nw
            new = float(np.linalg.norm(A @ v) ** 2)
            # stop well below tol since the change underestimates the remaining error
            if abs(new - sigma_sq) <= 1e-3 * tol * new:
                return np.sqrt(new), True
            sigma_sq = new
        return np.sqrt(sigma_sq), False

    sigma, ok = iterate(np.ones(A.shape[1]))
    if not ok or sigma < floor * (1 - 1e-12):
        rng = np.random.default_rng(seed)
        sigma2, ok = iterate(rng.standard_normal(A.shape[1]))
        sigma = max(sigma, sigma2)
    if not ok:
        raise ConvergenceError(
            f"power iteration did not converge in {max_iter} iterations", estimate=sigma)
    return float(sigma)


# ---------------------------------------------------------------------------
# Matrix IO
# ---------------------------------------------------------------------------

def save_matrix_text(path, matrix) -> None:
    """Write ``matrix`` as ``rows cols`` then whitespace-separated rows.

    Values use 17 significant digits so that re-reading is bit exact.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join("%.17g" % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix_text(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise StructuralError(f"{path}: missing 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = tokens[2:]
    if len(values) != rows * cols:
        raise StructuralError(f"{path}: header says {rows}x{cols} but found {len(values)} values")
    return np.array([float(v) for v in values], dtype=float).reshape(rows, cols)


def load_matrix_json(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text()), dtype=float)


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".json":
        return load_matrix_json(path)
    return load_matrix_text(path)
