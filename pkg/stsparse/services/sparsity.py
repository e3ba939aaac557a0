"""
Spatio-temporal sparsification.

TopK keeps the k largest entries of every node row (ties go to the lowest
index). Duty tracking integrates how often each hidden feature fires, and the
attention mask exp(-gamma * s_hat) damps the features that fire most.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np

from stsparse.errors import ContractError, DimensionError
from stsparse.models.graph import CsrMatrix
from stsparse.models.sparsity import AttentionMask, DutyState, SparseConfig
from stsparse.services import autodiff
from stsparse.services.autodiff import Value


def _topk_keep(h: np.ndarray, k: int) -> np.ndarray:
    d = h.shape[-1]
    if not 1 <= k <= d:
        raise ContractError(f"k must lie in [1, {d}], got {k}")
    keep = np.zeros(h.shape, dtype=bool)
    if k == d:
        keep[...] = True
        return keep
    # stable sort on the negated values puts equal entries in index order
    order = np.argsort(-h, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def topk(h: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries of a vector and zero the rest."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise DimensionError(f"topk expects a vector, got shape {h.shape}")
    return np.where(_topk_keep(h, k), h, 0.0)


def topk_rows(H: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise TopK.

    Returns the sparsified matrix and the boolean keep mask. Negative values
    survive when they are among the k largest of their row.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise DimensionError(f"topk_rows expects a matrix, got shape {H.shape}")
    keep = _topk_keep(H, k)
    return np.where(keep, H, 0.0), keep


def topk_value(h: Value, k: int) -> Value:
    """TopK recorded on the tape; gradient passes through the kept entries only."""
    _, keep = topk_rows(h.data, k)
    return autodiff.masked_select(h, keep)


def column_counts(S: np.ndarray) -> np.ndarray:
    """Number of nonzero entries in each column of an activation matrix."""
    return np.count_nonzero(np.asarray(S), axis=0).astype(np.float64)


def update_duty(
    state: DutyState, S: np.ndarray, tau: float, rho: Optional[float] = None
) -> DutyState:
    """
    Fold one epoch of post-TopK activations into the duty state.

    s_hat grows by tau times the column nonzero counts of S; with rho set the
    previous s_hat is first scaled by rho. The input state is not modified.
    """
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[1] != state.d_h:
        raise ContractError(
            f"activation matrix shape {S.shape} does not match duty length {state.d_h}"
        )
    if tau < 0:
        raise ContractError("tau must be non-negative")
    counts = column_counts(S)
    previous = state.s_hat if rho is None else rho * state.s_hat
    return DutyState(
        s_hat=previous + tau * counts,
        counts=state.counts + counts,
        epoch=state.epoch + 1,
    )


def attention_mask(state: DutyState, gamma: float) -> AttentionMask:
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    if gamma == 0:
        return AttentionMask.ones(state.d_h)
    # exp underflows to 0 for large gamma * s_hat; the mask stays in (0, 1]
    return AttentionMask(np.maximum(np.exp(-gamma * state.s_hat), np.finfo(np.float64).tiny))


def st_layer_forward(
    A_norm: Union[CsrMatrix, np.ndarray],
    S_in: Union[Value, CsrMatrix],
    W: Value,
    mask: Optional[AttentionMask],
    cfg: SparseConfig,
    k: Optional[int] = None,
) -> Value:
    """
    One ST-Sparse layer: TopK(A_norm (mask * S_in) W, k_alpha).

    S_in may be the raw feature matrix as a CsrMatrix, in which case no mask
    is applied. A_norm is either the normalized CSR adjacency or a dense
    propagation matrix. `k` overrides k_alpha; k = d_h disables the spatial
    selection.
    """
    if isinstance(S_in, CsrMatrix):
        if mask is not None:
            raise ContractError("the raw feature input takes no attention mask")
        if S_in.n_cols != W.shape[0]:
            raise DimensionError(f"features {S_in.shape} do not match weights {W.shape}")
        transformed = autodiff.spmm(S_in, W)
    else:
        if S_in.shape[1] != W.shape[0]:
            raise DimensionError(f"input {S_in.shape} does not match weights {W.shape}")
        masked = S_in
        if mask is not None:
            if mask.d_h != S_in.shape[1]:
                raise DimensionError(
                    f"attention mask length {mask.d_h} does not match input width {S_in.shape[1]}"
                )
            masked = autodiff.hadamard(S_in, mask.b)
        transformed = autodiff.matmul(masked, W)
    if W.shape[1] != cfg.d_h:
        raise DimensionError(f"layer width {W.shape[1]} differs from d_h {cfg.d_h}")
    n_op = A_norm.n_rows if isinstance(A_norm, CsrMatrix) else A_norm.shape[0]
    if n_op != transformed.shape[0]:
        raise DimensionError("propagation operator does not match the node count")
    mixed = autodiff.propagate(A_norm, transformed)
    return topk_value(mixed, cfg.k_alpha if k is None else k)


def activation_ratio(S: np.ndarray) -> float:
    """Fraction of nonzero entries."""
    S = np.asarray(S)
    if S.size == 0:
        return 0.0
    return np.count_nonzero(S) / S.size


def duty_cv(counts: np.ndarray) -> float:
    """
    Coefficient of variation of per-feature duty counts.

    Returns 0 when no feature has fired yet.
    """
    counts = np.asarray(counts, dtype=np.float64)
    mean = counts.mean() if counts.size else 0.0
    if mean == 0:
        return 0.0
    return float(counts.std() / mean)


def log_duty_histogram(state: DutyState, layer: int, bins: int = 10):
    """Log a compact histogram of cumulative duty counts for inspection."""
    hist, edges = np.histogram(state.counts, bins=bins)
    logging.info(
        f"Duty histogram layer {layer} (epoch {state.epoch}, cv {duty_cv(state.counts):.3f}): "
        f"{hist.tolist()} over [{edges[0]:.0f}, {edges[-1]:.0f}]"
    )
