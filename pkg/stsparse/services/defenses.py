"""
Preprocessing defenses.

Both run once on the (possibly poisoned) graph before any model is trained:
Jaccard pruning drops edges between feature-dissimilar nodes, and the SVD
defense replaces the adjacency by a normalized low-rank approximation that
models consume through the dense propagation path.
"""

import logging

import numpy as np

from stsparse.errors import ContractError, UnsupportedFeaturesError
from stsparse.models.config import DefenseKind, DefenseSpec
from stsparse.models.graph import Graph
from stsparse.services.graph_ops import adjacency_from_edges, jaccard_edges


def jaccard_prune(g: Graph, threshold: float) -> Graph:
    """Remove every edge whose endpoint features have Jaccard similarity below threshold."""
    if threshold < 0:
        raise ContractError("jaccard threshold must be non-negative")
    features = g.features
    if np.any((features != 0) & (features != 1)):
        raise UnsupportedFeaturesError("Jaccard pruning needs binary node features")

    rows, cols = g.edge_list()
    similarity = jaccard_edges(features, rows, cols)
    keep = similarity >= threshold
    pruned = adjacency_from_edges(g.n, rows[keep], cols[keep])
    logging.info(
        f"Jaccard pruning (threshold {threshold}) removed {int((~keep).sum())} of {len(rows)} edges"
    )
    return g.with_adjacency(pruned)


def low_rank_approximation(adj_dense: np.ndarray, rank: int) -> np.ndarray:
    """Best rank-r approximation of a square matrix by truncated SVD."""
    n = adj_dense.shape[0]
    if not 1 <= rank <= n:
        raise ContractError(f"svd rank must lie in [1, {n}], got {rank}")
    u, s, vt = np.linalg.svd(adj_dense)
    return (u[:, :rank] * s[:rank]) @ vt[:rank]


def svd_reconstruction_error(adj_dense: np.ndarray, rank: int) -> float:
    """Frobenius norm of the difference between a matrix and its rank-r approximation."""
    adj_dense = np.asarray(adj_dense, dtype=np.float64)
    return float(np.linalg.norm(adj_dense - low_rank_approximation(adj_dense, rank)))


def svd_lowrank(g: Graph, rank: int) -> Graph:
    """
    Attach the normalized rank-r approximation of the adjacency as the propagation matrix.

    Negative entries of the approximation are clamped to zero before
    self-loops are added and the matrix is symmetrically normalized. The
    binary adjacency itself is left unchanged.
    """
    if not 1 <= rank <= g.n:
        raise ContractError(f"svd rank must lie in [1, {g.n}], got {rank}")
    approx = low_rank_approximation(g.adjacency.to_dense(), rank)
    approx = 0.5 * (approx + approx.T)
    clamped = np.clip(approx, 0.0, None)
    np.fill_diagonal(clamped, clamped.diagonal() + 1.0)
    degrees = clamped.sum(axis=1)
    r = 1.0 / np.sqrt(degrees)
    propagation = clamped * r[:, None] * r[None, :]
    logging.info(
        f"SVD defense: rank {rank} of {g.n}, "
        f"{int((approx < 0).sum())} negative entries clamped"
    )
    return g.with_propagation(propagation)


def apply_defense(g: Graph, spec: DefenseSpec) -> Graph:
    """Run the configured preprocessing defense once."""
    if spec.kind == DefenseKind.NONE:
        return g
    if spec.kind == DefenseKind.JACCARD:
        return jaccard_prune(g, spec.jaccard_threshold)
    if spec.kind == DefenseKind.SVD:
        return svd_lowrank(g, min(spec.svd_rank, g.n))
    raise ContractError(f"unknown defense {spec.kind}")
