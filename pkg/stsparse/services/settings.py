"""
Configuration service.

Reads a TOML file with the tables [model], [sparse], [train], [attack],
[defense], [plan] and [report]. Every key mirrors a dataclass default;
unknown keys and wrongly-typed values raise ConfigError naming the key.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

import tomlkit
from tomlkit.exceptions import TOMLKitError

from stsparse.errors import ConfigError, ContractError
from stsparse.models.config import (
    Arch,
    AttackKind,
    AttackSpec,
    DefenseKind,
    DefenseSpec,
    ModelConfig,
    TrainConfig,
)
from stsparse.models.records import ExperimentPlan
from stsparse.models.sparsity import SparseConfig

# table -> key -> expected type; "list:<type>" for arrays, "opt:<type>" for values that may be unset
SCHEMA: Dict[str, Dict[str, str]] = {
    "model": {"arch": "str", "layers": "int", "hidden": "int", "dropout_p": "opt:float"},
    "sparse": {
        "d_h": "int",
        "alpha": "float",
        "gamma": "float",
        "tau": "float",
        "temporal_enabled": "bool",
        "decay_rho": "opt:float",
    },
    "train": {
        "epochs": "int",
        "lr": "float",
        "seed": "int",
        "weight_decay": "float",
        "log_every": "int",
        "patience": "opt:int",
    },
    "attack": {
        "kind": "str",
        "rate": "float",
        "steps": "int",
        "eta": "float",
        "retrain_every": "int",
        "inner_epochs": "int",
        "samples": "int",
        "seed": "int",
        "label_aware": "bool",
    },
    "defense": {"kind": "str", "jaccard_threshold": "float", "svd_rank": "int"},
    "plan": {
        "datasets": "list:str",
        "defenders": "list:str",
        "attackers": "list:str",
        "rates": "list:float",
        "seeds": "list:int",
        "data_dir": "str",
        "workers": "int",
        "alpha_grid": "list:float",
        "dh_grid": "list:int",
        "ablation_attacker": "str",
        "ablation_rate": "float",
    },
    "report": {"conventional_dr": "bool", "use_best": "bool"},
}


def _matches(value: Any, kind: str) -> bool:
    if kind.startswith("opt:"):
        return _matches(value, kind[4:])
    if kind.startswith("list:"):
        return isinstance(value, list) and all(_matches(v, kind[5:]) for v in value)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def _coerce(value: Any, kind: str) -> Any:
    if kind.endswith("float"):
        return [float(v) for v in value] if isinstance(value, list) else float(value)
    return value


def validate(data: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Check tables, keys and value types; returns the coerced nested dict."""
    checked: Dict[str, Dict[str, Any]] = {}
    for table, values in data.items():
        if table not in SCHEMA:
            raise ConfigError(f"unknown config table [{table}]", key=table)
        if not isinstance(values, dict):
            raise ConfigError(f"[{table}] must be a table", key=table)
        checked[table] = {}
        for key, value in values.items():
            full_key = f"{table}.{key}"
            if key not in SCHEMA[table]:
                raise ConfigError(f"unknown config key {full_key}", key=full_key)
            kind = SCHEMA[table][key]
            if not _matches(value, kind):
                raise ConfigError(
                    f"config key {full_key} expects {kind.replace('opt:', '')}, got {value!r}",
                    key=full_key,
                )
            checked[table][key] = _coerce(value, kind)
    return checked


class Settings:
    """Typed access to configuration values with dataclass defaults."""

    def __init__(self, data: Optional[Dict[str, Any]] = None, source: str = "<defaults>"):
        self.source = source
        self.data = validate(data or {})

    @classmethod
    def load(cls, path: Optional[Union[str, Path]]) -> "Settings":
        """Read a TOML config file; None yields the built-in defaults."""
        if path is None:
            return cls()
        path = Path(path)
        try:
            doc = tomlkit.parse(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except TOMLKitError as e:
            raise ConfigError(f"{path}: {e}") from e
        settings = cls(doc.unwrap(), source=str(path))
        logging.info(f"Loaded configuration from {path}")
        return settings

    def table(self, name: str) -> Dict[str, Any]:
        return dict(self.data.get(name, {}))

    def get(self, table: str, key: str, default: Any = None) -> Any:
        return self.data.get(table, {}).get(key, default)

    def _build(self, table: str, factory, **converted):
        values = self.table(table)
        values.update(converted)
        try:
            return factory(**values)
        except ContractError as e:
            raise ConfigError(f"[{table}]: {e}", key=table) from e

    def _enum(self, table: str, key: str, enum_cls, default):
        raw = self.get(table, key)
        if raw is None:
            return default
        try:
            return enum_cls(raw)
        except ValueError:
            choices = ", ".join(item.value for item in enum_cls)
            raise ConfigError(f"{table}.{key} must be one of {choices}, got {raw!r}", key=f"{table}.{key}")

    def sparse_config(self) -> SparseConfig:
        return self._build("sparse", SparseConfig)

    def model_config(self) -> ModelConfig:
        return self._build(
            "model",
            ModelConfig,
            arch=self._enum("model", "arch", Arch, Arch.GCN),
            sparse=self.sparse_config(),
        )

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        config = self._build("train", TrainConfig)
        return config if seed is None else replace(config, seed=seed)

    def attack_spec(self, seed: Optional[int] = None) -> AttackSpec:
        spec = self._build(
            "attack", AttackSpec, kind=self._enum("attack", "kind", AttackKind, AttackKind.DICE)
        )
        return spec if seed is None else replace(spec, seed=seed)

    def defense_spec(self) -> DefenseSpec:
        return self._build(
            "defense", DefenseSpec, kind=self._enum("defense", "kind", DefenseKind, DefenseKind.NONE)
        )

    def plan(self) -> ExperimentPlan:
        values = self.table("plan")
        for attacker in values.get("attackers", []) + [values.get("ablation_attacker", "none")]:
            try:
                AttackKind(attacker)
            except ValueError:
                raise ConfigError(f"unknown attacker {attacker!r}", key="plan.attackers")
        try:
            return ExperimentPlan(
                model=self.model_config(),
                sparse=self.sparse_config(),
                train=self.train_config(),
                attack=self.attack_spec(),
                defense=self.defense_spec(),
                **values,
            )
        except ContractError as e:
            raise ConfigError(f"[plan]: {e}", key="plan") from e

    def report_option(self, key: str, default: bool = False) -> bool:
        return bool(self.get("report", key, default))
