"""Tests for DICE, PGD and Min-Max poisoning and flip files."""

import numpy as np
import pytest

from stsparse.errors import InfeasibleBudgetError, ParseError
from stsparse.models.config import AttackKind, AttackSpec, ModelConfig, TrainConfig
from stsparse.models.graph import EdgeFlip, FlipAction
from stsparse.services import attacks, networks
from stsparse.services.graph_ops import apply_flips

from conftest import make_graph


def _dice(rate, seed=0, **kwargs):
    return AttackSpec(kind=AttackKind.DICE, rate=rate, seed=seed, **kwargs)


def _indicator(objective, flips):
    """Relaxed flip vector selecting exactly the given pairs."""
    index = {(int(j), int(i)): k for k, (i, j) in enumerate(zip(objective.rows, objective.cols))}
    s = np.zeros(len(objective.rows))
    for flip in flips:
        s[index[flip.pair]] = 1.0
    return s


class TestDice:
    def test_zero_rate_returns_nothing(self, clusters8):
        assert attacks.dice_attack(clusters8, _dice(0.0)) == []

    @pytest.mark.parametrize("seed", range(4))
    def test_exact_budget_without_repeated_pairs(self, clusters8, seed):
        spec = _dice(0.25, seed)
        flips = attacks.dice_attack(clusters8, spec)
        assert len(flips) == spec.budget(clusters8.edge_count) == 3
        assert len({f.pair for f in flips}) == len(flips)
        apply_flips(clusters8, flips)

    def test_same_seed_same_flips(self, clusters8):
        first = attacks.dice_attack(clusters8, _dice(0.25, 5))
        assert attacks.dice_attack(clusters8, _dice(0.25, 5)) == first

    def test_label_aware_rule(self, clusters8):
        known = clusters8.train_mask | clusters8.val_mask
        labels = clusters8.labels
        for seed in range(5):
            for flip in attacks.dice_attack(clusters8, _dice(0.25, seed, label_aware=True)):
                if flip.action == FlipAction.REMOVE:
                    assert known[flip.i] and known[flip.j] and labels[flip.i] == labels[flip.j]
                else:
                    assert labels[flip.i] != labels[flip.j]

    def test_budget_beyond_pairs_is_infeasible(self):
        # 3 nodes, 3 edges: every pair is already an edge and the budget is 0
        g = make_graph(3, [(0, 1), (1, 2), (0, 2)])
        assert attacks.dice_attack(g, _dice(0.25)) == []
        star = make_graph(5, [(0, i) for i in range(1, 5)])
        with pytest.raises(InfeasibleBudgetError):
            attacks._check_budget(star, 11)


class TestProjection:
    def test_feasible_input_is_only_clipped(self):
        np.testing.assert_array_equal(attacks.project_budget(np.array([0.2, -0.5, 1.7]), 3), [0.2, 0.0, 1.0])

    def test_equal_entries_share_budget(self):
        out = attacks.project_budget(np.array([0.9, 0.9, 0.9]), 1)
        assert out.sum() <= 1.0
        np.testing.assert_allclose(out, np.full(3, 1 / 3), atol=1e-8)

    def test_random_inputs_satisfy_constraints(self, rng):
        for _ in range(50):
            s = rng.normal(scale=2.0, size=30)
            out = attacks.project_budget(s, 4)
            assert out.sum() <= 4.0
            assert np.all((out >= 0) & (out <= 1))

    def test_zero_budget(self):
        np.testing.assert_array_equal(attacks.project_budget(np.array([0.5, 2.0]), 0), [0.0, 0.0])


class TestPgd:
    @pytest.mark.parametrize("seed", range(5))
    def test_single_flip_near_exhaustive_best(self, toy6, seed):
        victim = networks.train(toy6, ModelConfig(), TrainConfig(seed=seed, log_every=0))
        spec = AttackSpec(kind=AttackKind.PGD, rate=0.15, seed=seed)
        assert spec.budget(toy6.edge_count) == 1

        flips = attacks.pgd_attack(toy6, victim, spec)
        objective = attacks._RelaxedObjective(toy6, victim.model_config)
        chosen, _ = objective(_indicator(objective, flips), victim.weights, victim.duty, with_grad=False)

        best = -np.inf
        for k in range(len(objective.rows)):
            s = np.zeros(len(objective.rows))
            s[k] = 1.0
            loss, _ = objective(s, victim.weights, victim.duty, with_grad=False)
            best = max(best, loss)
        assert len(flips) <= 1
        assert chosen >= 0.95 * best

    def test_flips_are_consistent_with_graph(self, clusters8):
        victim = networks.train(clusters8, ModelConfig(), TrainConfig(epochs=50, seed=0, log_every=0))
        flips = attacks.pgd_attack(clusters8, victim, AttackSpec(kind=AttackKind.PGD, rate=0.2, steps=20))
        assert len(flips) <= 2
        apply_flips(clusters8, flips)

    def test_gradient_matches_finite_differences(self, toy6, rng):
        victim = networks.train(toy6, ModelConfig(), TrainConfig(epochs=20, seed=0, log_every=0))
        objective = attacks._RelaxedObjective(toy6, victim.model_config)
        s = rng.uniform(0.1, 0.9, size=len(objective.rows))
        _, grad = objective(s, victim.weights, victim.duty)
        h = 1e-6
        for k in range(len(s)):
            up, down = s.copy(), s.copy()
            up[k] += h
            down[k] -= h
            numeric = (
                objective(up, victim.weights, victim.duty, with_grad=False)[0]
                - objective(down, victim.weights, victim.duty, with_grad=False)[0]
            ) / (2 * h)
            assert grad[k] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


class TestMinMax:
    def test_zero_budget(self, toy6):
        spec = AttackSpec(kind=AttackKind.MINMAX, rate=0.1)
        assert attacks.minmax_attack(toy6, ModelConfig(), TrainConfig(epochs=5), spec) == []

    def test_deterministic(self, clusters8):
        spec = AttackSpec(kind=AttackKind.MINMAX, rate=0.2, steps=12, retrain_every=4, inner_epochs=3, seed=1)
        tcfg = TrainConfig(epochs=30, seed=1, log_every=0)
        first = attacks.minmax_attack(clusters8, ModelConfig(), tcfg, spec)
        second = attacks.minmax_attack(clusters8, ModelConfig(), tcfg, spec)
        assert first == second
        assert len(first) <= spec.budget(clusters8.edge_count)

    def test_retrained_accuracy_does_not_improve(self, clusters8):
        config = ModelConfig(dropout_p=0.0)
        tcfg = TrainConfig(epochs=100, seed=0, log_every=0)
        spec = AttackSpec(kind=AttackKind.MINMAX, rate=0.25, steps=30, retrain_every=10, inner_epochs=10, seed=0)
        flips = attacks.minmax_attack(clusters8, config, tcfg, spec)
        assert len(flips) <= spec.budget(clusters8.edge_count)

        clean = networks.train(clusters8, config, tcfg)
        poisoned_graph = apply_flips(clusters8, flips)
        poisoned = networks.train(poisoned_graph, config, tcfg)
        acc_clean = networks.evaluate(clean, clusters8, clusters8.test_mask)
        acc_poisoned = networks.evaluate(poisoned, poisoned_graph, poisoned_graph.test_mask)
        assert acc_poisoned <= acc_clean


class TestRunAttack:
    def test_none_attacker(self, toy6):
        assert attacks.run_attack(toy6, AttackSpec(kind=AttackKind.NONE, rate=0.2)) == []

    def test_dispatches_dice(self, clusters8):
        spec = _dice(0.25, 3)
        assert attacks.run_attack(clusters8, spec) == attacks.dice_attack(clusters8, spec)

    def test_surrogate_is_gcn(self):
        from stsparse.models.config import Arch

        assert attacks.surrogate_config(ModelConfig(arch=Arch.ST_SPARSE_GCN)).arch == Arch.GCN


class TestFlipFiles:
    def test_file_round_trip(self, tmp_path):
        flips = [EdgeFlip(0, 3, FlipAction.ADD), EdgeFlip(1, 2, FlipAction.REMOVE)]
        path = attacks.write_flips(tmp_path / "flips" / "cell.txt", flips)
        assert path.read_text() == "add 0 3\nremove 1 2\n"
        assert attacks.read_flips(path) == flips

    def test_comments_and_blank_lines_skipped(self):
        assert attacks.flips_from_text("# header\n\nadd 1 2\n") == [EdgeFlip(1, 2, FlipAction.ADD)]

    @pytest.mark.parametrize("line", ["toggle 1 2", "add 1", "add one 2"])
    def test_malformed_line_reports_position(self, line):
        with pytest.raises(ParseError) as info:
            attacks.flips_from_text(f"add 0 1\n{line}\n", "flips.txt")
        assert info.value.line_number == 2
