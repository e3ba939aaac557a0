"""
Graph model for the ST-SparseGCN toolkit.

This module defines the compressed sparse row matrix used for adjacency and
propagation operators, the immutable node-classification Graph, and the
EdgeFlip record produced by attacks.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from stsparse.errors import ContractError, DimensionError


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    """Return a read-only contiguous copy-or-view of the array."""
    out = np.ascontiguousarray(array, dtype=dtype)
    if out is array:
        out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """
    Compressed sparse row matrix in canonical form.

    Column indices are strictly increasing within each row and there are no
    duplicate entries. Arrays are read-only after construction.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        row_ptr = _frozen(self.row_ptr, np.int64)
        col_idx = _frozen(self.col_idx, np.int64)
        values = _frozen(self.values, np.float64)
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_scipy_cache", {})

        if self.n_rows < 0 or self.n_cols < 0:
            raise DimensionError("matrix dimensions must be non-negative")
        if row_ptr.shape != (self.n_rows + 1,):
            raise ContractError("row_ptr must have length n_rows + 1")
        if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
            raise ContractError("row_ptr must start at 0 and be non-decreasing")
        if row_ptr[-1] != len(col_idx) or len(col_idx) != len(values):
            raise ContractError("row_ptr[-1], len(col_idx) and len(values) must agree")
        if len(col_idx) and (col_idx.min() < 0 or col_idx.max() >= self.n_cols):
            raise ContractError("column index out of range")
        if len(col_idx) > 1:
            # strictly increasing within a row; row starts may reset
            steps = np.diff(col_idx)
            row_starts = np.zeros(len(col_idx), dtype=bool)
            row_starts[row_ptr[1:-1][row_ptr[1:-1] < len(col_idx)]] = True
            if np.any((steps <= 0) & ~row_starts[1:]):
                raise ContractError("column indices must be strictly increasing per row")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @classmethod
    def from_scipy(cls, matrix) -> "CsrMatrix":
        """Build a canonical CsrMatrix from any scipy sparse matrix."""
        csr = sp.csr_matrix(matrix, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(
            n_rows=csr.shape[0],
            n_cols=csr.shape[1],
            row_ptr=csr.indptr,
            col_idx=csr.indices,
            values=csr.data,
        )

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "CsrMatrix":
        """Build a CsrMatrix holding the nonzero entries of a dense matrix."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise DimensionError("from_dense expects a 2-D array")
        return cls.from_scipy(sp.csr_matrix(dense))

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> "CsrMatrix":
        return cls(
            n_rows=n_rows,
            n_cols=n_cols,
            row_ptr=np.zeros(n_rows + 1, dtype=np.int64),
            col_idx=np.zeros(0, dtype=np.int64),
            values=np.zeros(0, dtype=np.float64),
        )

    def to_scipy(self) -> sp.csr_matrix:
        """Return a scipy view of this matrix (copies, so callers may mutate it)."""
        return sp.csr_matrix(
            (self.values.copy(), self.col_idx.copy(), self.row_ptr.copy()),
            shape=self.shape,
        )

    def as_scipy(self, transposed: bool = False) -> sp.csr_matrix:
        """Cached read-only scipy form (or its transpose) for products; never mutate it."""
        key = "t" if transposed else "n"
        if key not in self._scipy_cache:
            base = sp.csr_matrix(
                (self.values, self.col_idx, self.row_ptr), shape=self.shape
            )
            self._scipy_cache[key] = base.T.tocsr() if transposed else base
        return self._scipy_cache[key]

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy().T)

    def row(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Column indices and values stored in row i."""
        start, end = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[start:end], self.values[start:end]

    def get(self, i: int, j: int) -> float:
        cols, vals = self.row(i)
        pos = np.searchsorted(cols, j)
        if pos < len(cols) and cols[pos] == j:
            return float(vals[pos])
        return 0.0

    def has_entry(self, i: int, j: int) -> bool:
        cols, _ = self.row(i)
        pos = np.searchsorted(cols, j)
        return bool(pos < len(cols) and cols[pos] == j)

    def structurally_equal(self, other: "CsrMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )

    def __eq__(self, other):
        if not isinstance(other, CsrMatrix):
            return NotImplemented
        return self.structurally_equal(other)

    __hash__ = None


class FlipAction(Enum):
    """Direction of an edge flip."""

    ADD = "add"
    REMOVE = "remove"


@dataclass(frozen=True, order=True)
class EdgeFlip:
    """
    A single undirected edge flip.

    The pair is unordered for graph purposes; `pair` gives the (low, high) key.
    """

    i: int
    j: int
    action: FlipAction

    def __post_init__(self):
        if self.i == self.j:
            raise ContractError(f"edge flip on a self-loop ({self.i}, {self.j})")
        if self.i < 0 or self.j < 0:
            raise ContractError("node ids must be non-negative")

    @property
    def pair(self) -> Tuple[int, int]:
        return (min(self.i, self.j), max(self.i, self.j))

    def inverse(self) -> "EdgeFlip":
        other = FlipAction.REMOVE if self.action == FlipAction.ADD else FlipAction.ADD
        return EdgeFlip(self.i, self.j, other)


def _read_only(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Immutable node-classification instance.

    The adjacency is binary, symmetric and stores no self-loops; self-loops are
    added only when the propagation operator is normalized. A defense may attach
    a dense, already-normalized `propagation` matrix, which models then use in
    place of the normalized adjacency.
    """

    adjacency: CsrMatrix
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    n_classes: int = 0
    name: str = ""
    propagation: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "features", _read_only(self.features, np.float64))
        object.__setattr__(self, "labels", _read_only(self.labels, np.int64))
        for mask_name in ("train_mask", "val_mask", "test_mask"):
            object.__setattr__(
                self, mask_name, _read_only(getattr(self, mask_name), bool)
            )
        if self.propagation is not None:
            object.__setattr__(
                self, "propagation", _read_only(self.propagation, np.float64)
            )

        n = self.adjacency.n_rows
        if self.adjacency.n_cols != n:
            raise DimensionError("adjacency must be square")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DimensionError("features must be an n x d matrix")
        if self.labels.shape != (n,):
            raise DimensionError("labels must have one entry per node")
        for mask in (self.train_mask, self.val_mask, self.test_mask):
            if mask.shape != (n,):
                raise DimensionError("masks must have one entry per node")
        if np.any(self.train_mask & self.val_mask) or np.any(
            self.train_mask & self.test_mask
        ) or np.any(self.val_mask & self.test_mask):
            raise ContractError("train/val/test masks must be pairwise disjoint")
        if self.propagation is not None and self.propagation.shape != (n, n):
            raise DimensionError("dense propagation must be n x n")

        if not np.all(self.adjacency.values == 1.0):
            raise ContractError("adjacency must be binary")
        rows = np.repeat(np.arange(n), np.diff(self.adjacency.row_ptr))
        if np.any(rows == self.adjacency.col_idx):
            raise ContractError("adjacency must not store self-loops")
        scipy_adj = self.adjacency.to_scipy()
        if (scipy_adj != scipy_adj.T).nnz != 0:
            raise ContractError("adjacency must be symmetric")

        n_classes = self.n_classes or (int(self.labels.max()) + 1 if n else 0)
        if n and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise ContractError("labels must lie in [0, C)")
        object.__setattr__(self, "n_classes", n_classes)

    @property
    def n(self) -> int:
        return self.adjacency.n_rows

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def edge_count(self) -> int:
        """Number of undirected edges."""
        return self.adjacency.nnz // 2

    def has_edge(self, i: int, j: int) -> bool:
        return self.adjacency.has_entry(i, j)

    def edge_list(self) -> Tuple[np.ndarray, np.ndarray]:
        """Undirected edges as (low, high) index arrays."""
        n = self.n
        rows = np.repeat(np.arange(n), np.diff(self.adjacency.row_ptr))
        cols = self.adjacency.col_idx
        upper = rows < cols
        return rows[upper], cols[upper]

    def with_adjacency(self, adjacency: CsrMatrix) -> "Graph":
        return replace(self, adjacency=adjacency, propagation=None)

    def with_propagation(self, propagation: np.ndarray) -> "Graph":
        return replace(self, propagation=propagation)

    def structurally_equal(self, other: "Graph") -> bool:
        same_prop = (self.propagation is None and other.propagation is None) or (
            self.propagation is not None
            and other.propagation is not None
            and np.array_equal(self.propagation, other.propagation)
        )
        return (
            self.adjacency == other.adjacency
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_mask, other.train_mask)
            and np.array_equal(self.val_mask, other.val_mask)
            and np.array_equal(self.test_mask, other.test_mask)
            and same_prop
        )

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.structurally_equal(other)

    __hash__ = None
