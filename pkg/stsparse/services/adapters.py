"""
Data adapters for the ST-SparseGCN toolkit.

This module provides conversion functions between dataclass models and
SQLAlchemy models, and between configuration dataclasses and the plain
dictionaries stored in checkpoints and config files.
"""

import json
import math
from dataclasses import asdict
from typing import Any, Dict, List

from stsparse.models.config import (
    Arch,
    AttackKind,
    AttackSpec,
    DefenseKind,
    DefenseSpec,
    ModelConfig,
    TrainConfig,
)
from stsparse.models.records import RunRecord, RunStatus
from stsparse.models.sparsity import SparseConfig
from stsparse.services.database import RunRecordModel


def _nullable(value: float):
    return None if value is None or math.isnan(value) else value


def _nan_if_null(value) -> float:
    return float("nan") if value is None else float(value)


def run_record_model_to_dataclass(db_record: RunRecordModel) -> RunRecord:
    """Convert SQLAlchemy RunRecordModel to dataclass RunRecord."""
    return RunRecord(
        id=db_record.id,
        dataset=db_record.dataset,
        defender=db_record.defender,
        attacker=db_record.attacker,
        rate=db_record.rate,
        seed=db_record.seed,
        clean_ref_acc=_nan_if_null(db_record.clean_ref_acc),
        acc=_nan_if_null(db_record.acc),
        dr=_nan_if_null(db_record.dr),
        wall_time=db_record.wall_time or 0.0,
        activation_ratio_trace=json.loads(db_record.activation_trace or "[]"),
        status=RunStatus(db_record.status or "ok"),
        error=db_record.error or "",
    )


def run_record_dataclass_to_model(record: RunRecord) -> RunRecordModel:
    """Convert dataclass RunRecord to SQLAlchemy RunRecordModel."""
    return RunRecordModel(
        dataset=record.dataset,
        defender=record.defender,
        attacker=record.attacker,
        rate=record.rate,
        seed=record.seed,
        clean_ref_acc=_nullable(record.clean_ref_acc),
        acc=_nullable(record.acc),
        dr=_nullable(record.dr),
        wall_time=record.wall_time,
        activation_trace=json.dumps(list(record.activation_ratio_trace)),
        status=record.status.value,
        error=record.error or None,
    )


def convert_run_record_list(db_records: List[RunRecordModel]) -> List[RunRecord]:
    """Convert a list of SQLAlchemy RunRecordModel to dataclass RunRecord."""
    return [run_record_model_to_dataclass(db_record) for db_record in db_records]


def sparse_config_to_dict(config: SparseConfig) -> Dict[str, Any]:
    return asdict(config)


def sparse_config_from_dict(data: Dict[str, Any]) -> SparseConfig:
    return SparseConfig(**data)


def model_config_to_dict(config: ModelConfig) -> Dict[str, Any]:
    """Convert ModelConfig to a JSON-ready dictionary."""
    return {
        "arch": config.arch.value,
        "layers": config.layers,
        "hidden": config.hidden,
        "dropout_p": config.dropout_p,
        "sparse": sparse_config_to_dict(config.sparse),
    }


def model_config_from_dict(data: Dict[str, Any]) -> ModelConfig:
    return ModelConfig(
        arch=Arch(data["arch"]),
        layers=data["layers"],
        hidden=data["hidden"],
        dropout_p=data.get("dropout_p"),
        sparse=sparse_config_from_dict(data["sparse"]),
    )


def train_config_to_dict(config: TrainConfig) -> Dict[str, Any]:
    return asdict(config)


def train_config_from_dict(data: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(**data)


def attack_spec_to_dict(spec: AttackSpec) -> Dict[str, Any]:
    data = asdict(spec)
    data["kind"] = spec.kind.value
    return data


def attack_spec_from_dict(data: Dict[str, Any]) -> AttackSpec:
    data = dict(data)
    data["kind"] = AttackKind(data.get("kind", AttackKind.DICE.value))
    return AttackSpec(**data)


def defense_spec_to_dict(spec: DefenseSpec) -> Dict[str, Any]:
    data = asdict(spec)
    data["kind"] = spec.kind.value
    return data


def defense_spec_from_dict(data: Dict[str, Any]) -> DefenseSpec:
    data = dict(data)
    data["kind"] = DefenseKind(data.get("kind", DefenseKind.NONE.value))
    return DefenseSpec(**data)
