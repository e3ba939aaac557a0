"""Tests for plan expansion, execution, resume and report generation."""

import math

import pandas as pd
import pytest

from stsparse.controllers.experiment_controller import ExperimentController
from stsparse.models.config import TrainConfig
from stsparse.models.records import ExperimentPlan, RunStatus
from stsparse.services import analytics

FAST = TrainConfig(epochs=30, log_every=0)
REPORTS = ["records.csv", "summary_mdr.csv", "summary_clean.csv"]


def _plan(**kwargs):
    values = dict(
        datasets=["fixture:clusters8"],
        defenders=["gcn", "st_sparse_gcn"],
        attackers=["dice"],
        rates=[0.0, 0.25],
        seeds=[0],
        train=FAST,
    )
    values.update(kwargs)
    return ExperimentPlan(**values)


class TestExpansion:
    def test_grid_and_ablation_cells(self, tmp_path):
        controller = ExperimentController(tmp_path)
        plan = _plan(seeds=[0, 1], alpha_grid=[0.1], ablation_attacker="dice", ablation_rate=0.25)
        cells = controller.expand_cells(plan)
        assert len(cells) == 2 * 1 * 2 * 2 + 2 * 2 * 2
        assert ("fixture:clusters8", "st_sparse_gcn@alpha=0.1@temporal=off", "none", 0.0, 1) in cells
        assert ("fixture:clusters8", "st_sparse_gcn@alpha=0.1@temporal=on", "dice", 0.25, 0) in cells
        assert len(set(cells)) == len(cells)

    def test_existing_gcn_cell_is_the_reference(self, tmp_path):
        controller = ExperimentController(tmp_path)
        plan = _plan()
        refs = controller.reference_cells(plan, controller.expand_cells(plan))
        assert refs == {("fixture:clusters8", 0): ("fixture:clusters8", "gcn", "dice", 0.0, 0)}

    def test_reference_added_when_missing(self, tmp_path):
        controller = ExperimentController(tmp_path)
        plan = _plan(defenders=["st_sparse_gcn"], rates=[0.25])
        refs = controller.reference_cells(plan, controller.expand_cells(plan))
        assert refs[("fixture:clusters8", 0)] == ("fixture:clusters8", "gcn", "none", 0.0, 0)

    def test_empty_plan(self, tmp_path):
        controller = ExperimentController(tmp_path)
        assert controller.expand_cells(ExperimentPlan()) == []


class TestRunPlan:
    def test_empty_plan_writes_header_only(self, tmp_path):
        result = ExperimentController(tmp_path).run_plan(ExperimentPlan())
        assert result.executed == 0 and result.complete
        assert (tmp_path / "records.csv").read_text() == ",".join(analytics.RECORD_COLUMNS) + "\n"

    def test_single_clean_cell(self, tmp_path):
        plan = _plan(defenders=["gcn"], rates=[0.0])
        result = ExperimentController(tmp_path).run_plan(plan)
        assert result.executed == 1
        [record] = result.records
        assert record.succeeded
        assert record.dr == 0.0
        assert record.clean_ref_acc == record.acc
        assert len(record.activation_ratio_trace) == FAST.epochs

    def test_grid_records_and_reports(self, tmp_path):
        controller = ExperimentController(tmp_path)
        result = controller.run_plan(_plan())
        assert result.complete
        assert len(result.records) == 4
        attacked = [r for r in result.records if r.rate > 0]
        assert all(not math.isnan(r.dr) for r in attacked if r.acc > 0)
        assert (tmp_path / "flips" / "fixture_clusters8_dice_0.25_seed0.txt").exists()
        assert (tmp_path / "accuracy_vs_rate_fixture_clusters8.svg").exists()
        assert (tmp_path / "activation_ratio.svg").exists()
        mdr = pd.read_csv(tmp_path / "summary_mdr.csv")
        assert set(mdr["defender"]) == {"gcn", "st_sparse_gcn"}
        pinned = controller.db_service.clean_reference("fixture:clusters8")
        gcn_clean = next(r for r in result.records if r.defender == "gcn" and r.rate == 0)
        assert pinned == gcn_clean.acc

    def test_resume_is_idempotent(self, tmp_path):
        plan = _plan()
        ExperimentController(tmp_path).run_plan(plan)
        before = {
            name: (tmp_path / name).read_bytes()
            for name in REPORTS + ["accuracy_vs_rate_fixture_clusters8.svg", "activation_ratio.svg"]
        }
        again = ExperimentController(tmp_path).run_plan(plan)
        assert again.executed == 0
        assert again.skipped == 4
        for name, content in before.items():
            assert (tmp_path / name).read_bytes() == content, name

    def test_interrupted_plan_resumes(self, tmp_path):
        ExperimentController(tmp_path).run_plan(_plan(defenders=["gcn"]))
        result = ExperimentController(tmp_path).run_plan(_plan())
        assert result.skipped == 2
        assert result.executed == 2
        assert len(result.records) == 4

    def test_failed_cell_is_recorded(self, tmp_path):
        plan = _plan(datasets=["fixture:path2"], defenders=["gcn"], attackers=["none"], rates=[0.0])
        result = ExperimentController(tmp_path).run_plan(plan)
        assert not result.complete
        assert result.failed == [("fixture:path2", "gcn", "none", 0.0, 0)]
        [record] = result.records
        assert record.status == RunStatus.FAILED
        assert "mask" in record.error
        assert math.isnan(record.acc)

    def test_failed_cells_are_retried(self, tmp_path):
        plan = _plan(datasets=["fixture:path2"], defenders=["gcn"], attackers=["none"], rates=[0.0])
        ExperimentController(tmp_path).run_plan(plan)
        again = ExperimentController(tmp_path).run_plan(plan)
        assert again.skipped == 0 and again.executed == 1

    def test_ablation_tables(self, tmp_path):
        plan = _plan(defenders=["gcn"], rates=[0.0], alpha_grid=[0.1, 0.2], dh_grid=[32])
        ExperimentController(tmp_path).run_plan(plan)
        alpha = pd.read_csv(tmp_path / "ablation_alpha.csv")
        dh = pd.read_csv(tmp_path / "ablation_dh.csv")
        assert sorted(set(alpha["alpha"])) == [0.1, 0.2]
        assert set(alpha["temporal"]) == {"on", "off"}
        assert list(dh["d_h"].unique()) == [32]

    def test_report_regenerated_with_conventional_dr(self, tmp_path):
        ExperimentController(tmp_path).run_plan(_plan())
        ExperimentController(tmp_path, conventional_dr=True).write_reports()
        frame = analytics.read_records_csv(tmp_path / "records.csv")
        attacked = frame[frame["rate"] > 0]
        expected = (attacked["clean_ref"] - attacked["acc"]) / attacked["clean_ref"]
        pd.testing.assert_series_equal(attacked["dr"], expected, check_names=False, rtol=1e-12)

    @pytest.mark.slow
    def test_process_pool_matches_inline(self, tmp_path):
        inline = ExperimentController(tmp_path / "inline").run_plan(_plan(seeds=[0, 1]))
        pooled = ExperimentController(tmp_path / "pooled").run_plan(_plan(seeds=[0, 1], workers=2))
        assert [(r.key, r.acc) for r in inline.records] == [(r.key, r.acc) for r in pooled.records]
