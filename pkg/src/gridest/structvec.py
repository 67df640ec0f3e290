"""Vectorization operators and the structural matrices D and T.

Conventions (0-based, column-major):

* ``vec(A)`` stacks the columns of ``A``.
* ``vech(A)`` keeps the lower triangle including the diagonal, column by column.
* ``ve(A)`` keeps the strictly lower triangle of ``-A``, column by column.  For an
  admittance matrix these are the line admittances ``y_ik``.

``D`` maps ``vech`` to ``vec`` for symmetric matrices and ``T`` maps ``ve`` to
``vech`` for Laplacian ones, so ``vec(Y) = D @ T @ ve(Y)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mode",
    "Parametrization",
    "StructKind",
    "StructMatrix",
    "vec",
    "unvec",
    "vech",
    "ve",
    "vech_index",
    "ve_index",
    "duplication_matrix",
    "transformation_matrix",
    "structure_matrix",
    "parametrize",
    "reconstruct_admittance",
    "RegressorPattern",
    "regressor_pattern",
]


class Mode(str, enum.Enum):
    FULL = "full"
    SYMMETRIC = "symmetric"
    LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class Parametrization:
    """Which redundancy-free vector stands for an ``n x n`` admittance matrix."""

    mode: Mode
    n: int

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.n < 1:
            raise ValueError(f"bus count must be positive, got {self.n}")
        if self.mode is Mode.LAPLACIAN and self.n < 2:
            raise ValueError("Laplacian parametrization needs n >= 2")

    @property
    def dim(self) -> int:
        n = self.n
        if self.mode is Mode.FULL:
            return n * n
        if self.mode is Mode.SYMMETRIC:
            return n * (n + 1) // 2
        return n * (n - 1) // 2


class StructKind(str, enum.Enum):
    DUPLICATION = "duplication"
    TRANSFORMATION = "transformation"


@dataclass(frozen=True, eq=False)
class StructMatrix:
    """Sparse integer matrix with a dense view.

    The sparse form is what the library multiplies with; ``dense`` exists for
    inspection and tests.
    """

    sparse: sp.csr_matrix
    kind: StructKind

    @property
    def rows(self) -> int:
        return self.sparse.shape[0]

    @property
    def cols(self) -> int:
        return self.sparse.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sparse.shape

    @property
    def entries(self) -> np.ndarray:
        return self.sparse.toarray()

    dense = entries

    def __matmul__(self, other):
        if isinstance(other, StructMatrix):
            return self.sparse @ other.sparse
        return self.sparse @ other

    def __array__(self, dtype=None, copy=None):
        out = self.entries
        return out if dtype is None else out.astype(dtype)


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2-D array, got shape {a.shape}")
    return a


def _as_square(a) -> np.ndarray:
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def vec(a) -> np.ndarray:
    """Column-major stacking of ``a``."""
    return _as_matrix(a).reshape(-1, order="F")


def unvec(x, n: int, m: int | None = None) -> np.ndarray:
    m = n if m is None else m
    return np.asarray(x).reshape((n, m), order="F")


@lru_cache(maxsize=None)
def _lower_indices(n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    # transposing numpy's row-major triu order gives column-major tril order
    cols, rows = np.triu_indices(n, k)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def vech(a) -> np.ndarray:
    a = _as_square(a)
    rows, cols = _lower_indices(a.shape[0], 0)
    return a[rows, cols]


def ve(a) -> np.ndarray:
    a = _as_square(a)
    if a.shape[0] < 2:
        raise ValueError("ve needs n >= 2")
    rows, cols = _lower_indices(a.shape[0], 1)
    return -a[rows, cols]


def vech_index(row: int, col: int, n: int) -> int:
    """Position of lower-triangular entry ``(row, col)``, ``row >= col``, in ``vech``."""
    if row < col:
        row, col = col, row
    return col * n - col * (col - 1) // 2 + row - col


def ve_index(row: int, col: int, n: int) -> int:
    """Position of off-diagonal entry ``(row, col)`` in ``ve``."""
    if row == col:
        raise ValueError("ve has no diagonal entries")
    if row < col:
        row, col = col, row
    return col * (n - 1) - col * (col - 1) // 2 + row - col - 1


@lru_cache(maxsize=64)
def duplication_matrix(n: int) -> StructMatrix:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rows = np.arange(n * n)
    cols = np.empty(n * n, dtype=np.int64)
    for k in range(n):
        for a in range(n):
            cols[k * n + a] = vech_index(a, k, n)
    mat = sp.csr_matrix(
        (np.ones(n * n, dtype=np.int8), (rows, cols)), shape=(n * n, n * (n + 1) // 2)
    )
    return StructMatrix(mat, StructKind.DUPLICATION)


@lru_cache(maxsize=64)
def transformation_matrix(n: int) -> StructMatrix:
    """Build ``T`` block by block.

    Block ``z`` (1-based) covers column ``z`` of ``vech``: its first row sums the
    edges incident to bus ``z`` (giving the diagonal entry), and the other
    ``n - z`` rows are ``[0 | -I | 0]`` picking the negated edges below the
    diagonal in that column.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    m = n * (n - 1) // 2
    rows: list[int] = []
    cols: list[int] = []
    vals: list[int] = []
    row = 0
    for z in range(1, n + 1):
        # edges (z + k, z), k = 1..n-z
        for k in range(1, n - z + 1):
            rows.append(row)
            cols.append(k + n * (z - 1) - z * (z - 1) // 2 - 1)
            vals.append(1)
        # edges (z, k), k = 1..z-1
        for k in range(1, z):
            rows.append(row)
            cols.append(z - 1 + (n - 1) * (k - 1) - k * (k - 1) // 2 - 1)
            vals.append(1)
        row += 1
        n_zero_before = (z - 1) * n - z * (z - 1) // 2
        for k in range(n - z):
            rows.append(row + k)
            cols.append(n_zero_before + k)
            vals.append(-1)
        row += n - z
    mat = sp.csr_matrix(
        (np.asarray(vals, dtype=np.int8), (rows, cols)), shape=(n * (n + 1) // 2, m)
    )
    return StructMatrix(mat, StructKind.TRANSFORMATION)


@lru_cache(maxsize=64)
def _structure(mode: Mode, n: int) -> sp.csr_matrix:
    if mode is Mode.FULL:
        return sp.identity(n * n, dtype=np.int8, format="csr")
    d = duplication_matrix(n).sparse
    if mode is Mode.SYMMETRIC:
        return d
    return (d @ transformation_matrix(n).sparse).tocsr()


def structure_matrix(p: Parametrization) -> sp.csr_matrix:
    """The ``(n^2, dim)`` map from parameter vector to ``vec(Y)``."""
    return _structure(p.mode, p.n)


def parametrize(y, p: Parametrization) -> np.ndarray:
    """Inverse of :func:`reconstruct_admittance` on matrices with the right structure."""
    y = _as_square(y)
    if y.shape[0] != p.n:
        raise ValueError(f"matrix is {y.shape[0]}x{y.shape[0]}, parametrization has n={p.n}")
    if p.mode is Mode.FULL:
        return vec(y)
    if p.mode is Mode.SYMMETRIC:
        return vech(y)
    return ve(y)


def reconstruct_admittance(x, p: Parametrization) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != p.dim:
        raise ValueError(f"parameter vector has shape {x.shape}, expected ({p.dim},)")
    y = unvec(structure_matrix(p) @ x, p.n)
    if p.mode is not Mode.FULL:
        # D duplicates entries exactly, so this only fixes the memory layout
        y = np.ascontiguousarray(y)
    return y


@dataclass(frozen=True, eq=False)
class RegressorPattern:
    """Nonzeros of the parameter-to-matrix map as ``Y[rows, cols] += coefs * x[params]``.

    The regressor of a voltage vector ``v`` is then
    ``A[rows, params] += coefs * v[cols]``, which is ``(v^T kron I) S`` without
    forming the Kronecker product.
    """

    rows: np.ndarray
    cols: np.ndarray
    params: np.ndarray
    coefs: np.ndarray
    n: int
    dim: int


@lru_cache(maxsize=64)
def _pattern(mode: Mode, n: int) -> RegressorPattern:
    s = _structure(mode, n).tocoo()
    order = np.lexsort((s.row, s.col))
    vec_idx = s.row[order].astype(np.int64)
    arrays = dict(
        rows=np.ascontiguousarray(vec_idx % n),
        cols=np.ascontiguousarray(vec_idx // n),
        params=np.ascontiguousarray(s.col[order].astype(np.int64)),
        coefs=np.ascontiguousarray(s.data[order].astype(np.float64)),
    )
    for a in arrays.values():
        a.flags.writeable = False
    return RegressorPattern(n=n, dim=s.shape[1], **arrays)


def regressor_pattern(p: Parametrization) -> RegressorPattern:
    return _pattern(p.mode, p.n)
