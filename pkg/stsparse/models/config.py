"""
Run configuration models.

Dataclasses describing how a model is built and trained, which preprocessing
defense runs before training, and how an attacker perturbs the graph.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from stsparse.errors import ContractError
from stsparse.models.sparsity import SparseConfig

# Perturbation rates swept by the evaluation protocol.
RATE_GRID = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
MAX_RATE = 0.25


class Arch(Enum):
    """Model architectures."""

    GCN = "gcn"
    ST_SPARSE_GCN = "st_sparse_gcn"


class DefenseKind(Enum):
    """Preprocessing defenses."""

    NONE = "none"
    JACCARD = "jaccard"
    SVD = "svd"


class AttackKind(Enum):
    """Graph poisoning attackers."""

    NONE = "none"
    DICE = "dice"
    PGD = "pgd"
    MINMAX = "minmax"


@dataclass(frozen=True)
class ModelConfig:
    """
    Model architecture.

    `hidden` is the GCN hidden width; ST-SparseGCN uses `sparse.d_h` instead.
    `dropout_p` of None picks the architecture default (0.5 for GCN, 0 for
    ST-SparseGCN).
    """

    arch: Arch = Arch.GCN
    layers: int = 2
    hidden: int = 16
    dropout_p: Optional[float] = None
    sparse: SparseConfig = field(default_factory=SparseConfig)

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("layers must be at least 1")
        if self.hidden < 1:
            raise ContractError("hidden must be at least 1")
        if self.dropout_p is not None and not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")

    @property
    def effective_dropout(self) -> float:
        if self.dropout_p is not None:
            return self.dropout_p
        return 0.5 if self.arch == Arch.GCN else 0.0

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.arch == Arch.GCN else self.sparse.d_h


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings."""

    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    weight_decay: float = 5e-4
    log_every: int = 20
    patience: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.patience is not None and self.patience < 1:
            raise ContractError("patience must be at least 1 when set")


@dataclass(frozen=True)
class DefenseSpec:
    """Preprocessing defense applied to the (possibly poisoned) graph before training."""

    kind: DefenseKind = DefenseKind.NONE
    jaccard_threshold: float = 0.01
    svd_rank: int = 10

    def __post_init__(self):
        if self.jaccard_threshold < 0:
            raise ContractError("jaccard_threshold must be non-negative")
        if self.svd_rank < 1:
            raise ContractError("svd_rank must be at least 1")


@dataclass(frozen=True)
class AttackSpec:
    """
    Attacker settings.

    The flip budget is floor(rate * |E|). PGD and Min-Max take `steps` ascent
    steps with step size eta * budget / sqrt(step); Min-Max retrains its
    surrogate for `inner_epochs` every `retrain_every` steps.
    """

    kind: AttackKind = AttackKind.DICE
    rate: float = 0.05
    steps: int = 100
    eta: float = 0.1
    retrain_every: int = 10
    inner_epochs: int = 20
    samples: int = 20
    seed: int = 0
    label_aware: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate <= MAX_RATE:
            raise ContractError(f"rate must lie in [0, {MAX_RATE}], got {self.rate}")
        if self.steps < 1 or self.retrain_every < 1 or self.samples < 1:
            raise ContractError("steps, retrain_every and samples must be positive")
        if self.inner_epochs < 0:
            raise ContractError("inner_epochs must be non-negative")
        if self.eta <= 0:
            raise ContractError("eta must be positive")

    def budget(self, edge_count: int) -> int:
        """Number of flips allowed on a graph with `edge_count` undirected edges."""
        # guard against 0.15 * 20 landing a hair below an integer
        return int(math.floor(self.rate * edge_count + 1e-9))
