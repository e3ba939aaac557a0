"""Tests for TopK, duty tracking, attention masks and the ST-Sparse layer."""

import math

import numpy as np
import pytest

from stsparse.errors import ContractError, DimensionError
from stsparse.models.graph import CsrMatrix
from stsparse.models.sparsity import AttentionMask, DutyState, SparseConfig
from stsparse.services import autodiff, sparsity
from stsparse.services.autodiff import Tape
from stsparse.services.graph_ops import adjacency_from_edges, normalize_adjacency


def _reference_topk(h, k):
    """Keep the first k indices when sorted by (value descending, index ascending)."""
    order = sorted(range(len(h)), key=lambda i: (-h[i], i))[:k]
    out = np.zeros_like(h)
    out[order] = h[order]
    return out


class TestTopK:
    def test_keeps_largest(self):
        np.testing.assert_array_equal(sparsity.topk(np.array([3.0, 1.0, 2.0]), 2), [3.0, 0.0, 2.0])

    def test_k_equal_dimension_is_identity(self):
        h = np.array([0.5, -2.0, 7.0])
        np.testing.assert_array_equal(sparsity.topk(h, 3), h)

    def test_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(sparsity.topk(np.array([1.0, 1.0, 1.0]), 1), [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ContractError):
            sparsity.topk(np.array([1.0, 2.0, 3.0]), k)

    def test_random_vectors(self):
        """Support bound, value preservation and the tie rule on 1000 vectors."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            d_h = int(rng.integers(1, 257))
            k = int(rng.integers(1, d_h + 1))
            if rng.random() < 0.5:
                h = rng.integers(-3, 4, size=d_h).astype(float)
            else:
                h = rng.normal(size=d_h)
            out = sparsity.topk(h, k)
            assert np.count_nonzero(out) <= k
            kept = out != 0
            np.testing.assert_array_equal(out[kept], h[kept])
            np.testing.assert_array_equal(out, _reference_topk(h, k))

    def test_idempotent_on_non_negative_rows(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            d_h = int(rng.integers(2, 65))
            k = int(rng.integers(1, d_h + 1))
            H = rng.exponential(size=(3, d_h)) * (rng.random((3, d_h)) < 0.7)
            once, _ = sparsity.topk_rows(H, k)
            twice, _ = sparsity.topk_rows(once, k)
            np.testing.assert_array_equal(once, twice)


class TestTopKRows:
    def test_rowwise(self):
        out, keep = sparsity.topk_rows(np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 4.0]]), 1)
        np.testing.assert_array_equal(out, [[3.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
        np.testing.assert_array_equal(keep, [[True, False, False], [False, True, False]])

    def test_negative_values_survive(self):
        out, _ = sparsity.topk_rows(np.array([[-1.0, -2.0, -3.0]]), 1)
        np.testing.assert_array_equal(out, [[-1.0, 0.0, 0.0]])

    def test_backward_is_masked_pass_through(self, rng):
        tape = Tape()
        h = tape.parameter(rng.normal(size=(4, 6)))
        out = sparsity.topk_value(h, 2)
        tape.backward(autodiff.sum_all(out))
        _, keep = sparsity.topk_rows(h.data, 2)
        np.testing.assert_array_equal(h.grad, keep.astype(float))


class TestDuty:
    def test_update_adds_scaled_counts(self):
        S = np.array([[1.0, 0.0], [2.0, 3.0]])
        state = sparsity.update_duty(DutyState.initial(2), S, tau=0.1)
        np.testing.assert_allclose(state.s_hat, [0.2, 0.1])
        np.testing.assert_array_equal(state.counts, [2.0, 1.0])
        assert state.epoch == 1

    def test_zero_tau_leaves_s_hat(self):
        state = sparsity.update_duty(DutyState.initial(3), np.ones((2, 3)), tau=0.0)
        np.testing.assert_array_equal(state.s_hat, np.zeros(3))
        np.testing.assert_array_equal(state.counts, [2.0, 2.0, 2.0])

    def test_identical_updates_double(self):
        S = np.array([[1.0, 0.0, 4.0]])
        once = sparsity.update_duty(DutyState.initial(3), S, tau=0.5)
        twice = sparsity.update_duty(once, S, tau=0.5)
        np.testing.assert_allclose(twice.s_hat, 2 * once.s_hat)

    def test_input_state_not_modified(self):
        state = DutyState.initial(2)
        sparsity.update_duty(state, np.ones((1, 2)), tau=1.0)
        np.testing.assert_array_equal(state.s_hat, [0.0, 0.0])

    def test_decay_variant(self):
        state = DutyState(np.array([1.0, 2.0]))
        out = sparsity.update_duty(state, np.array([[1.0, 0.0]]), tau=0.5, rho=0.5)
        np.testing.assert_allclose(out.s_hat, [1.0, 1.0])

    def test_width_mismatch(self):
        with pytest.raises(ContractError):
            sparsity.update_duty(DutyState.initial(3), np.ones((2, 2)), tau=0.1)

    def test_cv_of_balanced_counts_is_zero(self):
        assert sparsity.duty_cv(np.full(5, 7.0)) == 0.0
        assert sparsity.duty_cv(np.zeros(5)) == 0.0
        assert sparsity.duty_cv(np.array([0.0, 2.0])) == pytest.approx(1.0)


class TestAttentionMask:
    def test_zero_duty_gives_ones(self):
        mask = sparsity.attention_mask(DutyState.initial(4), gamma=3.0)
        np.testing.assert_array_equal(mask.b, np.ones(4))

    def test_exponential_value(self):
        mask = sparsity.attention_mask(DutyState(np.array([1.0, 0.0])), gamma=math.log(2))
        np.testing.assert_allclose(mask.b, [0.5, 1.0], rtol=1e-15)

    def test_zero_gamma_gives_ones(self):
        mask = sparsity.attention_mask(DutyState(np.array([5.0, 9.0])), gamma=0.0)
        np.testing.assert_array_equal(mask.b, [1.0, 1.0])

    def test_monotone_in_duty(self, rng):
        s_hat = rng.uniform(0, 10, size=20)
        b = sparsity.attention_mask(DutyState(s_hat), gamma=0.3).b
        order = np.argsort(s_hat)
        assert np.all(np.diff(b[order]) <= 0)

    def test_large_duty_stays_positive(self):
        b = sparsity.attention_mask(DutyState(np.array([1e4, 0.0])), gamma=1.0).b
        assert np.all(b > 0.0)
        assert b[0] == np.finfo(np.float64).tiny
        assert b[1] == 1.0

    @pytest.mark.parametrize("value", [1.5, 0.0, -0.1])
    def test_entries_outside_range_rejected(self, value):
        with pytest.raises(ContractError):
            AttentionMask(np.array([value]))


class TestSparseConfig:
    def test_k_alpha(self):
        assert SparseConfig(d_h=1024, alpha=0.1).k_alpha == 102

    @pytest.mark.parametrize("alpha,d_h", [(0.01, 10), (0.0, 10), (1.0, 10)])
    def test_invalid(self, alpha, d_h):
        with pytest.raises(ContractError):
            SparseConfig(d_h=d_h, alpha=alpha)

    def test_temporal_switch_zeroes_gamma_and_tau(self):
        cfg = SparseConfig(d_h=8, alpha=0.25, gamma=2.0, tau=1.0, temporal_enabled=False)
        assert cfg.effective_gamma == 0.0 and cfg.effective_tau == 0.0


class TestStLayerForward:
    def test_neutral_configuration_is_linear_gcn_layer(self, rng):
        op = normalize_adjacency(adjacency_from_edges(3, [0, 1], [1, 2]))
        cfg = SparseConfig(d_h=4, alpha=0.5)
        tape = Tape()
        s_in = tape.parameter(rng.normal(size=(3, 5)))
        w = tape.parameter(rng.normal(size=(5, 4)))
        out = sparsity.st_layer_forward(op, s_in, w, AttentionMask.ones(5), cfg, k=4)
        np.testing.assert_allclose(out.data, op.to_dense() @ s_in.data @ w.data, atol=1e-12)

    def test_single_node(self):
        cfg = SparseConfig(d_h=2, alpha=0.5)
        tape = Tape()
        out = sparsity.st_layer_forward(
            normalize_adjacency(CsrMatrix.empty(1, 1)),
            tape.parameter(np.array([[1.0, 0.0]])),
            tape.parameter(np.eye(2)),
            AttentionMask.ones(2),
            cfg,
        )
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_two_node_path_by_hand(self):
        op = normalize_adjacency(adjacency_from_edges(2, [0], [1]))
        cfg = SparseConfig(d_h=3, alpha=0.34)
        tape = Tape()
        s_in = tape.parameter(np.array([[1.0, 2.0], [3.0, 0.0]]))
        w = tape.parameter(np.array([[1.0, -1.0, 0.5], [2.0, 0.0, 1.0]]))
        out = sparsity.st_layer_forward(op, s_in, w, AttentionMask(np.array([1.0, 0.5])), cfg)
        # masked input [[1, 1], [3, 0]]; times W gives [[3, -1, 1.5], [3, -3, 1.5]]; averaged [3, -2, 1.5]
        np.testing.assert_allclose(out.data, [[3.0, 0.0, 0.0], [3.0, 0.0, 0.0]], atol=1e-15)

    def test_rows_respect_k(self, rng):
        op = normalize_adjacency(adjacency_from_edges(6, [0, 1, 2, 3, 4], [1, 2, 3, 4, 5]))
        cfg = SparseConfig(d_h=32, alpha=0.1)
        tape = Tape()
        out = sparsity.st_layer_forward(
            op, tape.parameter(rng.normal(size=(6, 8))), tape.parameter(rng.normal(size=(8, 32))), None, cfg
        )
        assert np.count_nonzero(out.data, axis=1).max() <= cfg.k_alpha
        assert sparsity.activation_ratio(out.data) <= cfg.alpha

    def test_raw_features_take_no_mask(self):
        cfg = SparseConfig(d_h=2, alpha=0.5)
        tape = Tape()
        features = CsrMatrix.from_dense(np.eye(2))
        with pytest.raises(ContractError):
            sparsity.st_layer_forward(
                normalize_adjacency(CsrMatrix.empty(2, 2)), features, tape.parameter(np.eye(2)), AttentionMask.ones(2), cfg
            )

    def test_width_mismatch(self):
        cfg = SparseConfig(d_h=4, alpha=0.5)
        tape = Tape()
        with pytest.raises(DimensionError):
            sparsity.st_layer_forward(
                normalize_adjacency(CsrMatrix.empty(1, 1)), tape.parameter(np.ones((1, 2))), tape.parameter(np.ones((2, 3))), None, cfg
            )


class TestActivationRatio:
    def test_all_zero(self):
        assert sparsity.activation_ratio(np.zeros((3, 4))) == 0.0

    def test_dense_positive(self):
        assert sparsity.activation_ratio(np.ones((3, 4))) == 1.0

    def test_post_topk_bound(self, rng):
        out, _ = sparsity.topk_rows(rng.normal(size=(10, 50)), 5)
        assert sparsity.activation_ratio(out) <= 5 / 50
