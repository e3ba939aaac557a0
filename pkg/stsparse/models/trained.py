"""
Trained model container and per-epoch training history.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from stsparse.errors import DimensionError
from stsparse.models.config import Arch, ModelConfig, TrainConfig
from stsparse.models.sparsity import DutyState


@dataclass
class EpochRecord:
    """Training metrics of one epoch."""

    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    activation_ratio: float


@dataclass
class TrainedModel:
    """
    Weights and state produced by a training run.

    weights holds one matrix per layer: for GCN the propagation layers, for
    ST-SparseGCN the sparse layers followed by the classifier head. duty holds
    the final DutyState of each sparse layer (empty for GCN).
    """

    model_config: ModelConfig
    train_config: TrainConfig
    weights: List[np.ndarray]
    duty: List[DutyState] = field(default_factory=list)
    history: List[EpochRecord] = field(default_factory=list)
    best_weights: Optional[List[np.ndarray]] = None
    best_duty: Optional[List[DutyState]] = None
    best_epoch: int = -1
    n_features: int = 0
    n_classes: int = 0

    def __post_init__(self):
        if not self.weights:
            raise DimensionError("a trained model needs at least one weight matrix")
        if not self.n_features:
            self.n_features = self.weights[0].shape[0]
        if not self.n_classes:
            self.n_classes = self.weights[-1].shape[1]
        expected = self.expected_shapes(self.model_config, self.n_features, self.n_classes)
        actual = [w.shape for w in self.weights]
        if actual != expected:
            raise DimensionError(f"weight shapes {actual} do not match {expected}")
        if self.is_sparse and len(self.duty) != self.model_config.layers:
            raise DimensionError("ST-SparseGCN needs one duty state per sparse layer")

    @staticmethod
    def expected_shapes(config: ModelConfig, d: int, n_classes: int) -> List[tuple]:
        """Weight shapes implied by the architecture."""
        width = config.hidden_width
        if config.arch == Arch.GCN:
            dims = [d] + [width] * (config.layers - 1) + [n_classes]
            return list(zip(dims[:-1], dims[1:]))
        dims = [d] + [width] * config.layers
        return list(zip(dims[:-1], dims[1:])) + [(width, n_classes)]

    @property
    def is_sparse(self) -> bool:
        return self.model_config.arch == Arch.ST_SPARSE_GCN

    @property
    def seed(self) -> int:
        return self.train_config.seed

    @property
    def final_epoch(self) -> int:
        return self.history[-1].epoch if self.history else 0

    def activation_trace(self) -> List[float]:
        return [record.activation_ratio for record in self.history]
