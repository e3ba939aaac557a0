"""
Experiment records: dataset bundles, plan definitions and per-cell run records.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from stsparse.errors import ContractError
from stsparse.models.config import (
    MAX_RATE,
    RATE_GRID,
    AttackSpec,
    DefenseSpec,
    ModelConfig,
    TrainConfig,
)
from stsparse.models.graph import Graph
from stsparse.models.sparsity import SparseConfig

CellKey = Tuple[str, str, str, float, int]


class RunStatus(Enum):
    """Outcome of a plan cell."""

    OK = "ok"
    FAILED = "failed"


@dataclass(frozen=True)
class DatasetManifest:
    """Declared statistics and digests of a dataset bundle."""

    name: str
    n: int
    edges: int
    d: int
    n_classes: int
    digest: str = ""
    files: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """A loaded graph with the digests of the files it came from."""

    name: str
    graph: Graph
    provenance: Dict[str, str] = field(default_factory=dict)
    manifest: Optional[DatasetManifest] = None


@dataclass
class RunRecord:
    """
    Result of one plan cell.

    dr is (clean_ref_acc - acc) / acc; failed cells keep acc and dr as NaN
    and carry the error message.
    """

    dataset: str
    defender: str
    attacker: str
    rate: float
    seed: int
    clean_ref_acc: float
    acc: float
    dr: float
    wall_time: float = 0.0
    activation_ratio_trace: List[float] = field(default_factory=list)
    status: RunStatus = RunStatus.OK
    error: str = ""
    id: Optional[int] = None

    @property
    def key(self) -> CellKey:
        return (self.dataset, self.defender, self.attacker, self.rate, self.seed)

    @property
    def group_key(self) -> Tuple[str, str, str]:
        """(dataset, defender, attacker): the group an mDR is computed over."""
        return (self.dataset, self.defender, self.attacker)

    @property
    def succeeded(self) -> bool:
        return self.status == RunStatus.OK


@dataclass
class ExperimentPlan:
    """
    Cartesian grid of datasets x defenders x attackers x rates x seeds.

    The base configurations apply to every cell; defender names may refine
    them (see the defender registry). alpha_grid and dh_grid add ablation
    cells for ST-SparseGCN with and without temporal sparsification.
    """

    datasets: List[str] = field(default_factory=list)
    defenders: List[str] = field(default_factory=list)
    attackers: List[str] = field(default_factory=list)
    rates: List[float] = field(default_factory=lambda: list(RATE_GRID))
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data_dir: str = "data"
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    sparse: SparseConfig = field(default_factory=SparseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    alpha_grid: List[float] = field(default_factory=list)
    dh_grid: List[int] = field(default_factory=list)
    ablation_attacker: str = "none"
    ablation_rate: float = 0.0

    def __post_init__(self):
        for rate in self.rates + [self.ablation_rate]:
            if not 0.0 <= rate <= MAX_RATE:
                raise ContractError(f"rate {rate} outside [0, {MAX_RATE}]")
        if self.workers < 1:
            raise ContractError("workers must be at least 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractError("seeds must be distinct")

    @property
    def is_empty(self) -> bool:
        return not (self.datasets and self.defenders and self.attackers and self.seeds)
