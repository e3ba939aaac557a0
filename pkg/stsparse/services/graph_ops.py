"""
Graph-level transformations.

Normalization of the adjacency into the GCN propagation operator, edge flips,
and the feature Jaccard similarity used by the pruning defense.
"""

import logging
from typing import Iterable, Sequence, Union

import numpy as np
import scipy.sparse as sp

from stsparse.errors import ContractError, DimensionError, InconsistentFlipError
from stsparse.models.graph import CsrMatrix, EdgeFlip, FlipAction, Graph

Operator = Union[CsrMatrix, np.ndarray]


def adjacency_from_edges(n: int, rows: Iterable[int], cols: Iterable[int]) -> CsrMatrix:
    """
    Build a symmetric binary adjacency from an undirected edge list.

    Duplicate and reversed pairs collapse to one edge; self-loops are dropped.
    """
    rows = np.asarray(rows if isinstance(rows, np.ndarray) else list(rows), dtype=np.int64)
    cols = np.asarray(cols if isinstance(cols, np.ndarray) else list(cols), dtype=np.int64)
    if rows.shape != cols.shape:
        raise DimensionError("edge endpoint arrays must have equal length")
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    both_rows = np.concatenate([rows, cols])
    both_cols = np.concatenate([cols, rows])
    matrix = sp.coo_matrix(
        (np.ones(len(both_rows)), (both_rows, both_cols)), shape=(n, n)
    ).tocsr()
    matrix.sum_duplicates()
    matrix.data[:] = 1.0
    return CsrMatrix.from_scipy(matrix)


def normalize_adjacency(adj: CsrMatrix) -> CsrMatrix:
    """
    Symmetric GCN normalization D^-1/2 (A + I) D^-1/2.

    Degrees are those of A + I, so every node has degree at least one and the
    diagonal is always present. Entries are 1/sqrt(d_i * d_j), which keeps the
    result bitwise symmetric.
    """
    if adj.n_rows != adj.n_cols:
        raise DimensionError(f"adjacency must be square, got {adj.shape}")
    if adj.nnz and not np.all(adj.values == 1.0):
        raise ContractError("normalize_adjacency expects a binary adjacency")

    n = adj.n_rows
    scipy_adj = adj.to_scipy()
    if scipy_adj.diagonal().any():
        raise ContractError("adjacency must not store self-loops")

    tilde = (scipy_adj + sp.identity(n, format="csr")).tocsr()
    tilde.sum_duplicates()
    tilde.sort_indices()
    degrees = np.asarray(tilde.sum(axis=1)).ravel()

    rows = np.repeat(np.arange(n), np.diff(tilde.indptr))
    cols = tilde.indices
    values = tilde.data / np.sqrt(degrees[rows] * degrees[cols])
    return CsrMatrix(
        n_rows=n, n_cols=n, row_ptr=tilde.indptr, col_idx=cols, values=values
    )


def propagation_operator(g: Graph) -> Operator:
    """The operator models propagate with: a dense defense matrix if attached, else the normalized adjacency."""
    if g.propagation is not None:
        return g.propagation
    return normalize_adjacency(g.adjacency)


def apply_flips(g: Graph, flips: Sequence[EdgeFlip]) -> Graph:
    """
    Apply edge flips in order and return the perturbed graph.

    Each flip is validated against the state left by the preceding flips.
    Features, labels and masks are carried over unchanged.
    """
    if not flips:
        return g

    low, high = g.edge_list()
    edges = set(zip(low.tolist(), high.tolist()))
    n = g.n
    for index, flip in enumerate(flips):
        if flip.i >= n or flip.j >= n:
            raise InconsistentFlipError(
                f"flip {index} ({flip.i}, {flip.j}) references a node outside [0, {n})"
            )
        pair = flip.pair
        if flip.action == FlipAction.ADD:
            if pair in edges:
                raise InconsistentFlipError(
                    f"flip {index} adds existing edge {pair}"
                )
            edges.add(pair)
        else:
            if pair not in edges:
                raise InconsistentFlipError(
                    f"flip {index} removes missing edge {pair}"
                )
            edges.remove(pair)

    if edges:
        rows, cols = zip(*sorted(edges))
    else:
        rows, cols = (), ()
    adjacency = adjacency_from_edges(n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))
    logging.debug(
        f"Applied {len(flips)} flips: {g.edge_count} -> {adjacency.nnz // 2} edges"
    )
    return g.with_adjacency(adjacency)


def jaccard(x_i: np.ndarray, x_j: np.ndarray) -> float:
    """
    Jaccard similarity of two binary feature vectors.

    Two all-zero vectors have similarity 0.
    """
    x_i = np.asarray(x_i)
    x_j = np.asarray(x_j)
    if x_i.shape != x_j.shape or x_i.ndim != 1:
        raise DimensionError(
            f"jaccard needs two vectors of equal length, got {x_i.shape} and {x_j.shape}"
        )
    if np.any((x_i != 0) & (x_i != 1)) or np.any((x_j != 0) & (x_j != 1)):
        raise ContractError("jaccard expects binary vectors")
    a = x_i != 0
    b = x_j != 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def jaccard_edges(features: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Vectorized jaccard over the node pairs (rows[k], cols[k])."""
    binary = sp.csr_matrix(np.asarray(features) != 0, dtype=np.float64)
    support = np.asarray(binary.sum(axis=1)).ravel()
    intersection = np.asarray(binary[rows].multiply(binary[cols]).sum(axis=1)).ravel()
    union = support[rows] + support[cols] - intersection
    similarity = np.zeros(len(rows), dtype=np.float64)
    nonempty = union > 0
    similarity[nonempty] = intersection[nonempty] / union[nonempty]
    return similarity
