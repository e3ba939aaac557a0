"""Tests for the command line verbs and their exit codes."""

import pytest

from stsparse.main import EXIT_CONFIG, EXIT_FAILURE, EXIT_INCOMPLETE, EXIT_INTEGRITY, EXIT_OK, build_parser, main
from stsparse.services import attacks

PLAN_TOML = """
[train]
epochs = 20
log_every = 0

[plan]
datasets = ["fixture:clusters8"]
defenders = ["gcn", "st_sparse_gcn_jaccard"]
attackers = ["dice"]
rates = [0.0, 0.25]
seeds = [0]

[sparse]
d_h = 32
alpha = 0.125
"""


def _run(tmp_path, *args, config=None):
    argv = ["--out", str(tmp_path / "out")]
    if config is not None:
        path = tmp_path / "config.toml"
        path.write_text(config)
        argv += ["--config", str(path)]
    return main(argv + list(args))


class TestParser:
    def test_verb_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_unknown_attacker_rejected(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["attack", "--dataset", "fixture:toy6", "--attacker", "mettack"])


class TestVerbs:
    def test_gradcheck_passes(self, tmp_path):
        assert _run(tmp_path, "gradcheck") == EXIT_OK
        assert (tmp_path / "out" / "stsparse.log").exists()

    def test_train_writes_checkpoint(self, tmp_path):
        config = "[train]\nepochs = 10\nlog_every = 0\n"
        assert _run(tmp_path, "train", "--dataset", "fixture:toy6", config=config) == EXIT_OK
        assert (tmp_path / "out" / "model.npz").exists()

    def test_attack_then_defend(self, tmp_path):
        config = "[train]\nepochs = 10\nlog_every = 0\n"
        flips = tmp_path / "flips.txt"
        code = _run(
            tmp_path, "attack", "--dataset", "fixture:clusters8", "--attacker", "dice",
            "--rate", "0.25", "--flips", str(flips), config=config,
        )
        assert code == EXIT_OK
        assert len(attacks.read_flips(flips)) == 3
        code = _run(
            tmp_path, "defend", "--dataset", "fixture:clusters8", "--defender", "gcn_jaccard",
            "--flips", str(flips), config=config,
        )
        assert code == EXIT_OK

    def test_convert_and_train_from_bundle(self, tmp_path):
        (tmp_path / "toy.content").write_text("p1 1 0 1 A\np2 0 1 0 B\np3 1 1 0 A\np4 0 1 1 B\n")
        (tmp_path / "toy.cites").write_text("p1 p2\np2 p3\np3 p4\n")
        code = _run(
            tmp_path, "convert", "--format", "linqs", "--name", "toy",
            "--content", str(tmp_path / "toy.content"), "--cites", str(tmp_path / "toy.cites"),
        )
        assert code == EXIT_OK
        assert (tmp_path / "out" / "toy" / "manifest.toml").exists()
        code = _run(
            tmp_path, "train", "--dataset", "toy", "--data-dir", str(tmp_path / "out"),
            config="[train]\nepochs = 5\nlog_every = 0\n",
        )
        assert code == EXIT_OK

    def test_sweep_then_report(self, tmp_path):
        assert _run(tmp_path, "sweep", config=PLAN_TOML) == EXIT_OK
        out = tmp_path / "out"
        for name in ("records.db", "records.csv", "summary_mdr.csv", "summary_clean.csv"):
            assert (out / name).exists(), name
        before = (out / "records.csv").read_bytes()
        assert _run(tmp_path, "report", config=PLAN_TOML) == EXIT_OK
        assert (out / "records.csv").read_bytes() == before


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        assert _run(tmp_path, "gradcheck", config="[train]\nepoch = 3\n") == EXIT_CONFIG

    def test_wrong_value_type(self, tmp_path):
        assert _run(tmp_path, "gradcheck", config='[sparse]\nalpha = "high"\n') == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["--out", str(tmp_path), "--config", str(tmp_path / "nope.toml"), "gradcheck"]) == EXIT_CONFIG

    def test_report_without_records(self, tmp_path):
        assert _run(tmp_path, "report") == EXIT_CONFIG

    def test_unknown_defender(self, tmp_path):
        assert _run(tmp_path, "defend", "--dataset", "fixture:toy4", "--defender", "mlp") == EXIT_CONFIG

    def test_malformed_flip_file(self, tmp_path):
        flips = tmp_path / "flips.txt"
        flips.write_text("add 0 1\nflip 1 2\n")
        code = _run(tmp_path, "defend", "--dataset", "fixture:toy4", "--defender", "gcn", "--flips", str(flips))
        assert code == EXIT_INTEGRITY

    def test_missing_flip_file(self, tmp_path):
        missing = tmp_path / "missing.txt"
        code = _run(tmp_path, "defend", "--dataset", "fixture:toy4", "--defender", "gcn", "--flips", str(missing))
        assert code == EXIT_FAILURE
        assert "missing.txt" in (tmp_path / "out" / "stsparse.log").read_text()

    def test_unreadable_converter_input(self, tmp_path):
        code = _run(
            tmp_path, "convert", "--format", "linqs", "--name", "toy",
            "--content", str(tmp_path / "none.content"), "--cites", str(tmp_path / "none.cites"),
        )
        assert code == EXIT_FAILURE

    def test_missing_bundle(self, tmp_path):
        assert _run(tmp_path, "train", "--dataset", "cora", "--data-dir", str(tmp_path)) == EXIT_INTEGRITY

    def test_sweep_with_failed_cell(self, tmp_path):
        config = """
[train]
epochs = 5
log_every = 0

[plan]
datasets = ["fixture:path2"]
defenders = ["gcn"]
attackers = ["none"]
rates = [0.0]
seeds = [0]
"""
        assert _run(tmp_path, "sweep", config=config) == EXIT_INCOMPLETE
