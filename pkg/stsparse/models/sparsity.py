"""
Spatio-temporal sparsity models.

SparseConfig holds the TopK and duty-cycle hyperparameters, DutyState the
accumulated per-feature usage of one hidden layer, and AttentionMask the
per-feature multiplier derived from it.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from stsparse.errors import ContractError


@dataclass(frozen=True)
class SparseConfig:
    """
    Hyperparameters of an ST-Sparse layer.

    k_alpha = floor(alpha * d_h) features survive TopK per node. With
    temporal_enabled False the attention mask stays at all-ones (gamma and tau
    act as 0). decay_rho switches the duty accumulation to
    s_hat <- rho * s_hat + tau * counts.
    """

    d_h: int = 1024
    alpha: float = 0.1
    gamma: float = 1e-3
    tau: float = 1e-4
    temporal_enabled: bool = True
    decay_rho: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.d_h < 2:
            raise ContractError(f"d_h must be at least 2, got {self.d_h}")
        k = self.k_alpha
        if not 1 <= k < self.d_h:
            raise ContractError(
                f"k_alpha = floor({self.alpha} * {self.d_h}) = {k} must lie in [1, d_h)"
            )
        if self.gamma < 0 or self.tau < 0:
            raise ContractError("gamma and tau must be non-negative")
        if self.decay_rho is not None and not 0.0 < self.decay_rho <= 1.0:
            raise ContractError("decay_rho must lie in (0, 1]")

    @property
    def k_alpha(self) -> int:
        return int(math.floor(self.alpha * self.d_h))

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.temporal_enabled else 0.0

    @property
    def effective_tau(self) -> float:
        return self.tau if self.temporal_enabled else 0.0


@dataclass
class DutyState:
    """
    Accumulated feature usage of one hidden layer.

    s_hat is the integrated sparsity that drives the attention mask; counts is
    the raw cumulative number of (node, epoch) activations per feature.
    """

    s_hat: np.ndarray
    counts: Optional[np.ndarray] = None
    epoch: int = 0

    def __post_init__(self):
        self.s_hat = np.asarray(self.s_hat, dtype=np.float64)
        if self.counts is None:
            self.counts = np.zeros_like(self.s_hat)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.s_hat.ndim != 1 or self.counts.shape != self.s_hat.shape:
            raise ContractError("s_hat and counts must be vectors of equal length")

    @classmethod
    def initial(cls, d_h: int) -> "DutyState":
        return cls(s_hat=np.zeros(d_h), counts=np.zeros(d_h), epoch=0)

    @property
    def d_h(self) -> int:
        return self.s_hat.shape[0]

    def copy(self) -> "DutyState":
        return DutyState(self.s_hat.copy(), self.counts.copy(), self.epoch)


@dataclass(frozen=True)
class AttentionMask:
    """Per-feature multiplier b_j = exp(-gamma * s_hat_j), shared by every node row."""

    b: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.array(self.b, dtype=np.float64, copy=True)
        if b.ndim != 1:
            raise ContractError("attention mask must be a vector")
        if np.any(b > 1.0) or np.any(b <= 0.0):
            raise ContractError("attention mask entries must lie in (0, 1]")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @classmethod
    def ones(cls, d_h: int) -> "AttentionMask":
        return cls(np.ones(d_h))

    @property
    def d_h(self) -> int:
        return self.b.shape[0]
