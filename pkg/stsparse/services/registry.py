"""
Defender registry.

A defender name selects an architecture and a preprocessing defense, e.g.
`st_sparse_gcn_jaccard`. Ablation variants append `@key=value` overrides:
`st_sparse_gcn@alpha=0.02`, `st_sparse_gcn@d_h=64@temporal=off`.
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from stsparse.errors import ConfigError, ContractError
from stsparse.models.config import Arch, DefenseKind, DefenseSpec, ModelConfig
from stsparse.models.sparsity import SparseConfig

# name -> (architecture, defense, dropout override)
DEFENDERS: Dict[str, Tuple[Arch, DefenseKind, Optional[float]]] = {
    "gcn": (Arch.GCN, DefenseKind.NONE, None),
    "gcn_nodropout": (Arch.GCN, DefenseKind.NONE, 0.0),
    "gcn_jaccard": (Arch.GCN, DefenseKind.JACCARD, None),
    "gcn_svd": (Arch.GCN, DefenseKind.SVD, None),
    "st_sparse_gcn": (Arch.ST_SPARSE_GCN, DefenseKind.NONE, None),
    "st_sparse_gcn_dropout": (Arch.ST_SPARSE_GCN, DefenseKind.NONE, 0.5),
    "st_sparse_gcn_jaccard": (Arch.ST_SPARSE_GCN, DefenseKind.JACCARD, None),
    "st_sparse_gcn_svd": (Arch.ST_SPARSE_GCN, DefenseKind.SVD, None),
}

REFERENCE_DEFENDER = "gcn"

VARIANT_KEYS = ("alpha", "d_h", "temporal")


@dataclass(frozen=True)
class DefenderSpec:
    """Resolved defender: model configuration plus preprocessing defense."""

    name: str
    base: str
    model: ModelConfig
    defense: DefenseSpec
    overrides: Tuple[Tuple[str, str], ...] = ()


def split_name(name: str) -> Tuple[str, List[Tuple[str, str]]]:
    """Split `base@k=v@k=v` into the base name and its overrides."""
    base, *parts = name.split("@")
    overrides = []
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep or key not in VARIANT_KEYS:
            raise ConfigError(f"bad defender variant {part!r} in {name!r}", key="defenders")
        overrides.append((key, value))
    return base, overrides


def resolve_defender(
    name: str,
    model: Optional[ModelConfig] = None,
    sparse: Optional[SparseConfig] = None,
    defense: Optional[DefenseSpec] = None,
) -> DefenderSpec:
    """Build the configuration a defender name stands for on top of the base configs."""
    base, overrides = split_name(name)
    if base not in DEFENDERS:
        raise ConfigError(f"unknown defender {base!r}; known: {sorted(DEFENDERS)}", key="defenders")
    arch, defense_kind, dropout = DEFENDERS[base]
    model = model or ModelConfig()
    sparse = sparse or model.sparse
    defense = defense or DefenseSpec()

    sparse_changes = {}
    for key, value in overrides:
        if arch != Arch.ST_SPARSE_GCN:
            raise ConfigError(f"variant {key} applies to ST-SparseGCN defenders only", key="defenders")
        try:
            if key == "alpha":
                sparse_changes["alpha"] = float(value)
            elif key == "d_h":
                sparse_changes["d_h"] = int(value)
            elif value not in ("on", "off"):
                raise ValueError(value)
            else:
                sparse_changes["temporal_enabled"] = value == "on"
        except ValueError:
            raise ConfigError(f"bad value {value!r} for variant {key}", key="defenders")
    try:
        sparse = replace(sparse, **sparse_changes)
        model_config = replace(
            model,
            arch=arch,
            sparse=sparse,
            dropout_p=dropout if dropout is not None else model.dropout_p,
        )
    except ContractError as e:
        raise ConfigError(f"defender {name!r}: {e}", key="defenders") from e

    return DefenderSpec(
        name=name,
        base=base,
        model=model_config,
        defense=replace(defense, kind=defense_kind),
        overrides=tuple(overrides),
    )


def ablation_defenders(base: str, alpha_grid: List[float], dh_grid: List[int]) -> List[str]:
    """Variant names swept by the alpha and d_h ablations, with temporal sparsity on and off."""
    names = []
    for alpha in alpha_grid:
        for temporal in ("on", "off"):
            names.append(f"{base}@alpha={alpha:g}@temporal={temporal}")
    for d_h in dh_grid:
        for temporal in ("on", "off"):
            names.append(f"{base}@d_h={d_h}@temporal={temporal}")
    return names
