"""
Analytics service for experiment records.

This module computes the dropping-rate metrics and turns stored run records
into the report tables: records.csv, the clean and mDR summaries, the
accuracy-versus-rate series and the ablation tables.
"""

import logging
import math
import os
import tempfile
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from stsparse.errors import ContractError, IncompleteGroupError, UndefinedMetricError
from stsparse.models.records import RunRecord
from stsparse.services.database import DatabaseService
from stsparse.services.registry import split_name

RECORD_COLUMNS = ["dataset", "defender", "attacker", "rate", "seed", "acc", "clean_ref", "dr", "wall_s"]


def dropping_rate(acc: float, clean_ref_acc: float, conventional: bool = False) -> float:
    """
    DR = (clean_ref_acc - acc) / acc.

    With conventional=True the denominator is clean_ref_acc instead.
    Accuracies are taken at their shortest decimal form and the ratio is
    rounded once, so DR(0.80, 0.88) is exactly 0.1.
    """
    denominator = clean_ref_acc if conventional else acc
    if not denominator > 0:
        which = "clean reference accuracy" if conventional else "accuracy"
        raise UndefinedMetricError(f"dropping rate is undefined for {which} {denominator}")
    if not (math.isfinite(acc) and math.isfinite(clean_ref_acc)):
        raise UndefinedMetricError(f"dropping rate is undefined for accuracies {acc}, {clean_ref_acc}")
    acc_q, ref_q = Fraction(repr(float(acc))), Fraction(repr(float(clean_ref_acc)))
    return float((ref_q - acc_q) / (ref_q if conventional else acc_q))


def _fmean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def mean_dropping_rate(
    records: Sequence[RunRecord],
    rates: Optional[Sequence[float]] = None,
    seeds: Optional[Sequence[int]] = None,
    conventional: bool = False,
) -> float:
    """
    Mean dropping rate of one defender x attacker x dataset group.

    DRs are averaged over seeds first, then over the nonzero rates. The
    expected rates and seeds default to those present in the group; every
    (rate, seed) cell must have succeeded.
    """
    if not records:
        raise IncompleteGroupError([], "empty record group")
    groups = {r.group_key for r in records}
    if len(groups) != 1:
        raise ContractError(f"records span several groups: {sorted(groups)}")

    expected_rates = sorted(set(rates if rates is not None else (r.rate for r in records)))
    expected_seeds = sorted(set(seeds if seeds is not None else (r.seed for r in records)))
    nonzero = [rate for rate in expected_rates if rate > 0]
    if len(expected_rates) < 2 or not nonzero:
        raise IncompleteGroupError(
            [], f"mDR needs a rate grid, group {next(iter(groups))} covers rates {expected_rates}"
        )

    by_cell = {(r.rate, r.seed): r for r in records if r.succeeded}
    missing = [
        (*next(iter(groups)), rate, seed)
        for rate in nonzero
        for seed in expected_seeds
        if (rate, seed) not in by_cell
    ]
    if missing:
        raise IncompleteGroupError(missing)

    per_rate = []
    for rate in nonzero:
        drs = [
            dropping_rate(by_cell[(rate, seed)].acc, by_cell[(rate, seed)].clean_ref_acc, conventional)
            for seed in expected_seeds
        ]
        per_rate.append(_fmean(drs))
    return _fmean(per_rate)


def records_to_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    """records.csv layout: one row per cell, fixed columns."""
    rows = [
        {
            "dataset": r.dataset,
            "defender": r.defender,
            "attacker": r.attacker,
            "rate": r.rate,
            "seed": r.seed,
            "acc": r.acc,
            "clean_ref": r.clean_ref_acc,
            "dr": r.dr,
            "wall_s": r.wall_time,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def write_csv(frame: pd.DataFrame, path: Union[str, Path], index: bool = False) -> Path:
    """Write a CSV atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
        frame.to_csv(handle, index=index, lineterminator="\n")
    os.replace(tmp, path)
    return path


def read_records_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


class AnalyticsService:
    """
    Builds report tables from the record database.

    Args:
        db_service: Database service the records are read from
        conventional_dr: Report DR with the clean accuracy as denominator
    """

    def __init__(self, db_service: DatabaseService, conventional_dr: bool = False):
        self.db_service = db_service
        self.conventional_dr = conventional_dr

    def get_records(self) -> List[RunRecord]:
        records = self.db_service.get_records()
        if not self.conventional_dr:
            return records
        converted = []
        for record in records:
            if record.succeeded and record.clean_ref_acc > 0:
                record.dr = dropping_rate(record.acc, record.clean_ref_acc, conventional=True)
            converted.append(record)
        return converted

    def records_frame(self) -> pd.DataFrame:
        return records_to_frame(self.get_records())

    def summary_mdr(
        self, rates: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None
    ) -> pd.DataFrame:
        """
        mDR per defender (rows) and dataset/attacker (columns).

        Incomplete groups are reported as empty cells and logged.
        """
        records = [r for r in self.get_records() if r.attacker != "none"]
        grouped: Dict[tuple, List[RunRecord]] = {}
        for record in records:
            grouped.setdefault(record.group_key, []).append(record)

        rows = []
        for (dataset, defender, attacker), group in sorted(grouped.items()):
            try:
                mdr = mean_dropping_rate(group, rates, seeds, self.conventional_dr)
            except (IncompleteGroupError, UndefinedMetricError) as e:
                logging.warning(f"mDR of {defender}/{attacker} on {dataset} skipped: {e}")
                mdr = float("nan")
            rows.append({"defender": defender, "column": f"{dataset}/{attacker}", "mdr": mdr})
        if not rows:
            return pd.DataFrame(columns=["defender"])
        frame = pd.DataFrame(rows)
        table = frame.pivot(index="defender", columns="column", values="mdr")
        table.columns.name = None
        return table.reset_index()

    def summary_clean(self) -> pd.DataFrame:
        """Mean and standard deviation of clean accuracy per defender and dataset."""
        clean = [r for r in self.get_records() if r.rate == 0 and r.succeeded]
        if not clean:
            return pd.DataFrame(columns=["defender"])
        frame = records_to_frame(clean).drop_duplicates(subset=["dataset", "defender", "seed"])
        stats = frame.groupby(["defender", "dataset"])["acc"].agg(["mean", "std"]).reset_index()
        table = stats.pivot(index="defender", columns="dataset", values=["mean", "std"])
        table.columns = [f"{dataset}_{stat}" for stat, dataset in table.columns]
        table = table[sorted(table.columns)]
        return table.reset_index()

    def accuracy_vs_rate(self, dataset: str) -> pd.DataFrame:
        """Seed-averaged accuracy per rate (rows) for each defender/attacker pair (columns)."""
        records = [
            r for r in self.get_records()
            if r.dataset == dataset and r.succeeded and r.attacker != "none"
        ]
        if not records:
            return pd.DataFrame()
        frame = records_to_frame(records)
        frame["series"] = frame["defender"] + "/" + frame["attacker"]
        table = frame.groupby(["rate", "series"])["acc"].mean().unstack("series")
        table.columns.name = None
        return table.sort_index()

    def activation_traces(self, dataset: Optional[str] = None) -> Dict[str, np.ndarray]:
        """Seed-averaged per-epoch activation ratio of each defender on clean graphs."""
        traces: Dict[str, List[List[float]]] = {}
        for record in self.get_records():
            if record.rate != 0 or not record.succeeded or not record.activation_ratio_trace:
                continue
            if dataset and record.dataset != dataset:
                continue
            traces.setdefault(f"{record.dataset}/{record.defender}", []).append(record.activation_ratio_trace)
        averaged = {}
        for key, runs in sorted(traces.items()):
            length = min(len(run) for run in runs)
            averaged[key] = np.mean([run[:length] for run in runs], axis=0)
        return averaged

    def ablation(self, key: str) -> pd.DataFrame:
        """
        Accuracy of ablation variants sweeping `key` (alpha or d_h).

        One row per dataset, base defender, value, temporal setting, attacker
        and rate, with seed mean and standard deviation.
        """
        rows = []
        for record in self.get_records():
            if not record.succeeded or "@" not in record.defender:
                continue
            base, overrides = split_name(record.defender)
            settings = dict(overrides)
            if key not in settings:
                continue
            rows.append(
                {
                    "dataset": record.dataset,
                    "defender": base,
                    key: float(settings[key]) if key == "alpha" else int(settings[key]),
                    "temporal": settings.get("temporal", "on"),
                    "attacker": record.attacker,
                    "rate": record.rate,
                    "acc": record.acc,
                }
            )
        columns = ["dataset", "defender", key, "temporal", "attacker", "rate"]
        if not rows:
            return pd.DataFrame(columns=columns + ["acc_mean", "acc_std", "seeds"])
        frame = pd.DataFrame(rows)
        table = (
            frame.groupby(columns)["acc"]
            .agg(acc_mean="mean", acc_std="std", seeds="count")
            .reset_index()
            .sort_values(columns)
        )
        return table
