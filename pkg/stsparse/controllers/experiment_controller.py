"""
Experiment controller for the ST-SparseGCN toolkit.

This module expands an ExperimentPlan into cells, runs them (optionally in a
process pool), persists every finished cell and writes the reports. Cells
sharing a dataset, attacker, rate and seed form one job so the flips are
generated once and reused by every defender.
"""

import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from stsparse.errors import StSparseError
from stsparse.models.config import AttackKind, AttackSpec, TrainConfig
from stsparse.models.records import CellKey, ExperimentPlan, RunRecord, RunStatus
from stsparse.services import analytics, attacks, defenses, networks
from stsparse.services.analytics import AnalyticsService
from stsparse.services.database import DatabaseService
from stsparse.services.datasets import resolve_dataset
from stsparse.services.graph_ops import apply_flips
from stsparse.services.registry import (
    REFERENCE_DEFENDER,
    DefenderSpec,
    ablation_defenders,
    resolve_defender,
)
from stsparse.ui import charts

ABLATION_BASE = "st_sparse_gcn"


@dataclass
class AttackJob:
    """All cells of one dataset x attacker x rate x seed combination."""

    dataset: str
    data_dir: str
    attacker: str
    rate: float
    seed: int
    defenders: List[DefenderSpec]
    attack: AttackSpec
    train: TrainConfig
    clean_ref: float = float("nan")
    flips_path: Optional[str] = None
    use_best: bool = False

    @property
    def label(self) -> str:
        return f"{self.dataset}/{self.attacker}@{self.rate:g}/seed={self.seed}"


@dataclass
class PlanResult:
    """Outcome of run_plan."""

    records: List[RunRecord] = field(default_factory=list)
    executed: int = 0
    skipped: int = 0
    failed: List[CellKey] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failed


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _cell_record(job: AttackJob, defender: str, **values) -> RunRecord:
    return RunRecord(
        dataset=job.dataset,
        defender=defender,
        attacker=job.attacker,
        rate=job.rate,
        seed=job.seed,
        clean_ref_acc=job.clean_ref,
        **values,
    )


def _with_dr(record: RunRecord, clean_ref: float) -> RunRecord:
    record.clean_ref_acc = clean_ref
    if record.succeeded and not math.isnan(clean_ref):
        try:
            record.dr = analytics.dropping_rate(record.acc, clean_ref)
        except StSparseError as e:
            logging.warning(f"DR undefined for {record.key}: {e}")
            record.dr = float("nan")
    return record


def run_job(job: AttackJob) -> List[RunRecord]:
    """
    Generate (or reuse) the flips of a job, then train and evaluate every defender
    on the poisoned graph. Failures are recorded per cell.
    """
    logging.info(f"Starting job {job.label} with {len(job.defenders)} defenders")
    try:
        bundle = resolve_dataset(job.dataset, job.data_dir)
        clean = bundle.graph
        flips_path = Path(job.flips_path) if job.flips_path else None
        if flips_path is not None and flips_path.exists():
            flips = attacks.read_flips(flips_path)
        else:
            flips = attacks.run_attack(clean, job.attack, tcfg=replace(job.train, log_every=0))
            if flips_path is not None:
                attacks.write_flips(flips_path, flips)
        poisoned = apply_flips(clean, flips)
    except (StSparseError, FloatingPointError) as e:
        logging.error(f"Attack for {job.label} failed: {e}", exc_info=True)
        return [
            _cell_record(job, d.name, acc=float("nan"), dr=float("nan"), status=RunStatus.FAILED, error=str(e))
            for d in job.defenders
        ]

    records = []
    for defender in job.defenders:
        started = time.perf_counter()
        try:
            graph = defenses.apply_defense(poisoned, defender.defense)
            model = networks.train(graph, defender.model, job.train)
            acc = networks.evaluate(model, graph, graph.test_mask, use_best=job.use_best)
            wall = time.perf_counter() - started
            record = _cell_record(
                job,
                defender.name,
                acc=acc,
                dr=float("nan"),
                wall_time=wall,
                activation_ratio_trace=model.activation_trace(),
            )
            logging.info(f"Finished {job.label} {defender.name}: acc {acc:.4f} in {wall:.1f}s")
        except (StSparseError, FloatingPointError) as e:
            wall = time.perf_counter() - started
            logging.error(f"Cell {job.label} {defender.name} failed: {e}", exc_info=True)
            record = _cell_record(
                job,
                defender.name,
                acc=float("nan"),
                dr=float("nan"),
                wall_time=wall,
                status=RunStatus.FAILED,
                error=str(e),
            )
        records.append(_with_dr(record, job.clean_ref))
    return records


class ExperimentController:
    """
    Controller for running experiment plans.

    Owns the record database of one output directory; only this object
    writes to it.
    """

    def __init__(self, out_dir, conventional_dr: bool = False, use_best: bool = False):
        """
        Initialize the experiment controller.

        Args:
            out_dir: Directory receiving records.db, flips/ and the reports
            conventional_dr: Report DR with the clean accuracy as denominator
            use_best: Evaluate best-validation weights instead of final ones
        """
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.db_service = DatabaseService(f"sqlite:///{self.out_dir / 'records.db'}")
        self.conventional_dr = conventional_dr
        self.use_best = use_best

    # Plan expansion

    def defender_names(self, plan: ExperimentPlan) -> List[str]:
        names = list(plan.defenders)
        for name in ablation_defenders(ABLATION_BASE, plan.alpha_grid, plan.dh_grid):
            if name not in names:
                names.append(name)
        return names

    def expand_cells(self, plan: ExperimentPlan) -> List[CellKey]:
        """Every cell of the plan, in a stable order."""
        cells: List[CellKey] = []
        if plan.is_empty:
            return cells
        for dataset in plan.datasets:
            for defender in plan.defenders:
                for attacker in plan.attackers:
                    for rate in plan.rates:
                        for seed in plan.seeds:
                            cells.append((dataset, defender, attacker, rate, seed))
            ablation = ablation_defenders(ABLATION_BASE, plan.alpha_grid, plan.dh_grid)
            settings = [("none", 0.0)]
            if plan.ablation_attacker != "none" and plan.ablation_rate > 0:
                settings.append((plan.ablation_attacker, plan.ablation_rate))
            for defender in ablation:
                for attacker, rate in settings:
                    for seed in plan.seeds:
                        cells.append((dataset, defender, attacker, rate, seed))
        unique = list(dict.fromkeys(cells))
        return unique

    def reference_cells(self, plan: ExperimentPlan, cells: Sequence[CellKey]) -> Dict[Tuple[str, int], CellKey]:
        """
        The clean GCN cell that provides the reference accuracy per dataset and seed.

        Any GCN cell at rate 0 serves; a dedicated `none` cell is added when
        the plan has none.
        """
        chosen: Dict[Tuple[str, int], CellKey] = {}
        for cell in cells:
            dataset, defender, _, rate, seed = cell
            if defender == REFERENCE_DEFENDER and rate == 0 and (dataset, seed) not in chosen:
                chosen[(dataset, seed)] = cell
        if plan.is_empty:
            return chosen
        for dataset in plan.datasets:
            for seed in plan.seeds:
                chosen.setdefault((dataset, seed), (dataset, REFERENCE_DEFENDER, "none", 0.0, seed))
        return chosen

    def _jobs(
        self,
        plan: ExperimentPlan,
        cells: Sequence[CellKey],
        clean_refs: Dict[str, float],
    ) -> List[AttackJob]:
        grouped: Dict[Tuple[str, str, float, int], List[str]] = {}
        for dataset, defender, attacker, rate, seed in cells:
            grouped.setdefault((dataset, attacker, rate, seed), []).append(defender)

        jobs = []
        for (dataset, attacker, rate, seed), defender_names in grouped.items():
            defenders = [
                resolve_defender(name, plan.model, plan.sparse, plan.defense) for name in defender_names
            ]
            kind = AttackKind(attacker)
            attack = AttackSpec(
                kind=kind,
                rate=rate,
                steps=plan.attack.steps,
                eta=plan.attack.eta,
                retrain_every=plan.attack.retrain_every,
                inner_epochs=plan.attack.inner_epochs,
                samples=plan.attack.samples,
                seed=seed,
                label_aware=plan.attack.label_aware,
            )
            flips_path = None
            if kind != AttackKind.NONE and rate > 0:
                flips_path = str(
                    self.out_dir / "flips" / f"{_slug(dataset)}_{attacker}_{rate:g}_seed{seed}.txt"
                )
            jobs.append(
                AttackJob(
                    dataset=dataset,
                    data_dir=plan.data_dir,
                    attacker=attacker,
                    rate=rate,
                    seed=seed,
                    defenders=defenders,
                    attack=attack,
                    train=TrainConfig(
                        epochs=plan.train.epochs,
                        lr=plan.train.lr,
                        seed=seed,
                        weight_decay=plan.train.weight_decay,
                        log_every=plan.train.log_every,
                        patience=plan.train.patience,
                    ),
                    clean_ref=clean_refs.get(dataset, float("nan")),
                    flips_path=flips_path,
                    use_best=self.use_best,
                )
            )
        return jobs

    def _execute(self, jobs: List[AttackJob], workers: int, on_records):
        if workers <= 1 or len(jobs) <= 1:
            for job in jobs:
                on_records(run_job(job))
            return
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_job, job): job for job in jobs}
            for future in as_completed(futures):
                job = futures[future]
                try:
                    on_records(future.result())
                except Exception as e:
                    logging.error(f"Worker for {job.label} crashed: {e}", exc_info=True)
                    on_records(
                        [
                            _cell_record(job, d.name, acc=float("nan"), dr=float("nan"),
                                         status=RunStatus.FAILED, error=str(e))
                            for d in job.defenders
                        ]
                    )

    # Running

    def run_plan(self, plan: ExperimentPlan) -> PlanResult:
        """
        Execute every pending cell of the plan and write the reports.

        Cells already completed in records.db are skipped, so an interrupted
        plan resumes where it stopped and a finished plan is left untouched.
        """
        result = PlanResult()
        cells = self.expand_cells(plan)
        references = self.reference_cells(plan, cells)
        all_cells = list(dict.fromkeys(cells + list(references.values())))
        done = self.db_service.completed_keys()
        result.skipped = sum(1 for cell in all_cells if cell in done)
        logging.info(
            f"Plan: {len(all_cells)} cells, {result.skipped} already complete, workers={plan.workers}"
        )

        def persist(records: List[RunRecord]):
            for record in records:
                self.db_service.save_record(record)
                result.executed += 1
                if not record.succeeded:
                    result.failed.append(record.key)

        pending_refs = [cell for cell in dict.fromkeys(references.values()) if cell not in done]
        fresh_refs: List[RunRecord] = []
        self._execute(self._jobs(plan, pending_refs, {}), plan.workers, fresh_refs.extend)

        clean_refs = {}
        for dataset in plan.datasets if not plan.is_empty else []:
            accs = []
            for seed in plan.seeds:
                key = references[(dataset, seed)]
                fresh = next((r for r in fresh_refs if r.key == key), None)
                record = fresh or self.db_service.get_record(key)
                if record is not None and record.succeeded:
                    accs.append(record.acc)
            clean_refs[dataset] = float(np.mean(accs)) if accs else float("nan")
            if not accs:
                logging.error(f"No clean reference accuracy for {dataset}; DR values will be empty")
            elif self.db_service.clean_reference(dataset) != clean_refs[dataset]:
                self.db_service.pin_clean_reference(dataset, clean_refs[dataset])
        persist([_with_dr(r, clean_refs.get(r.dataset, float("nan"))) for r in fresh_refs])

        reference_keys = set(references.values())
        pending = [cell for cell in cells if cell not in done and cell not in reference_keys]
        self._execute(self._jobs(plan, pending, clean_refs), plan.workers, persist)

        result.records = self.db_service.get_records()
        self.write_reports(plan)
        if result.failed:
            logging.warning(f"Plan finished with {len(result.failed)} failed cells")
        else:
            logging.info(f"Plan finished: {result.executed} cells run, {result.skipped} skipped")
        return result

    # Reports

    def write_reports(self, plan: Optional[ExperimentPlan] = None):
        """Regenerate every report file from records.db."""
        service = AnalyticsService(self.db_service, conventional_dr=self.conventional_dr)
        analytics.write_csv(service.records_frame(), self.out_dir / "records.csv")

        rates = plan.rates if plan is not None else None
        seeds = plan.seeds if plan is not None else None
        analytics.write_csv(service.summary_mdr(rates, seeds), self.out_dir / "summary_mdr.csv")
        analytics.write_csv(service.summary_clean(), self.out_dir / "summary_clean.csv")

        datasets = sorted({r.dataset for r in service.get_records()})
        for dataset in datasets:
            frame = service.accuracy_vs_rate(dataset)
            if not frame.empty:
                charts.plot_accuracy_vs_rate(
                    frame, dataset, self.out_dir / f"accuracy_vs_rate_{_slug(dataset)}.svg"
                )
        traces = service.activation_traces()
        if traces:
            charts.plot_activation_ratio(traces, self.out_dir / "activation_ratio.svg")

        has_alpha = plan.alpha_grid if plan is not None else True
        has_dh = plan.dh_grid if plan is not None else True
        for key, enabled, name in (("alpha", has_alpha, "ablation_alpha.csv"), ("d_h", has_dh, "ablation_dh.csv")):
            table = service.ablation(key)
            if enabled and not table.empty:
                analytics.write_csv(table, self.out_dir / name)
        logging.info(f"Reports written to {self.out_dir}")
