"""Tests for the Jaccard and SVD preprocessing defenses."""

import numpy as np
import pytest

from stsparse.errors import ContractError, UnsupportedFeaturesError
from stsparse.models.config import DefenseKind, DefenseSpec, ModelConfig, TrainConfig
from stsparse.services import defenses, networks

from conftest import make_graph


def _edge_set(g):
    return set(zip(*(a.tolist() for a in g.edge_list())))


class TestJaccardPrune:
    def test_drops_only_dissimilar_edge(self):
        g = make_graph(3, [(0, 1), (1, 2)], features=[[1, 1, 0], [1, 1, 0], [0, 0, 1]])
        out = defenses.jaccard_prune(g, 0.01)
        assert _edge_set(out) == {(0, 1)}
        assert out.n == 3

    def test_bridge_between_feature_clusters_removed(self, clusters8):
        out = defenses.jaccard_prune(clusters8, 0.01)
        assert out.edge_count == clusters8.edge_count - 1
        assert not out.has_edge(3, 4) and not out.has_edge(4, 3)

    def test_identical_features_always_survive(self):
        g = make_graph(3, [(0, 1), (1, 2)], features=[[1, 0, 1]] * 3)
        assert defenses.jaccard_prune(g, 1.0) == g

    def test_zero_threshold_keeps_every_edge(self, clusters8):
        assert defenses.jaccard_prune(clusters8, 0.0).edge_count == clusters8.edge_count

    def test_monotone_in_threshold(self, rng):
        n = 15
        upper = np.triu(rng.random((n, n)) < 0.35, k=1)
        edges = list(zip(*np.nonzero(upper)))
        g = make_graph(n, edges, features=(rng.random((n, 8)) < 0.4).astype(float))
        previous = _edge_set(g)
        for threshold in np.linspace(0.0, 1.0, 11):
            current = _edge_set(defenses.jaccard_prune(g, threshold))
            assert current <= previous
            previous = current

    def test_output_is_symmetric_subset(self, toy6):
        out = defenses.jaccard_prune(toy6, 0.3)
        dense = out.adjacency.to_dense()
        np.testing.assert_array_equal(dense, dense.T)
        assert _edge_set(out) <= _edge_set(toy6)

    def test_non_binary_features_rejected(self):
        g = make_graph(2, [(0, 1)], features=[[0.5, 1.0], [1.0, 0.0]])
        with pytest.raises(UnsupportedFeaturesError):
            defenses.jaccard_prune(g, 0.01)

    def test_negative_threshold_rejected(self, toy4):
        with pytest.raises(ContractError):
            defenses.jaccard_prune(toy4, -0.1)


class TestLowRank:
    def test_error_non_increasing_in_rank(self, clusters8):
        adj = clusters8.adjacency.to_dense()
        errors = [defenses.svd_reconstruction_error(adj, r) for r in range(1, clusters8.n + 1)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(errors, errors[1:]))

    def test_full_rank_is_exact(self, toy6):
        assert defenses.svd_reconstruction_error(toy6.adjacency.to_dense(), toy6.n) < 1e-8

    def test_rank_one_of_rank_one_matrix(self):
        v = np.array([1.0, 2.0, 0.5])
        assert defenses.svd_reconstruction_error(np.outer(v, v), 1) < 1e-12

    def test_error_matches_dropped_singular_values(self, rng):
        m = rng.normal(size=(5, 5))
        m = m + m.T
        s = np.linalg.svd(m, compute_uv=False)
        for rank in range(1, 5):
            expected = np.sqrt(np.sum(s[rank:] ** 2))
            assert defenses.svd_reconstruction_error(m, rank) == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("rank", [0, 5])
    def test_rank_out_of_range(self, toy4, rank):
        with pytest.raises(ContractError):
            defenses.low_rank_approximation(toy4.adjacency.to_dense(), rank)


class TestSvdDefense:
    def test_attaches_normalized_propagation(self, toy6):
        out = defenses.svd_lowrank(toy6, 2)
        assert out.propagation is not None
        np.testing.assert_allclose(out.propagation, out.propagation.T, atol=1e-12)
        assert np.all(out.propagation >= 0)
        assert out.adjacency == toy6.adjacency

    def test_full_rank_recovers_gcn_normalization(self, toy6):
        from stsparse.services.graph_ops import normalize_adjacency

        out = defenses.svd_lowrank(toy6, toy6.n)
        expected = normalize_adjacency(toy6.adjacency).to_dense()
        np.testing.assert_allclose(out.propagation, expected, atol=1e-10)

    def test_rank_above_n_rejected(self, toy4):
        with pytest.raises(ContractError):
            defenses.svd_lowrank(toy4, 5)

    def test_models_train_on_dense_propagation(self, clusters8):
        defended = defenses.svd_lowrank(clusters8, 2)
        model = networks.train(defended, ModelConfig(), TrainConfig(epochs=50, seed=0, log_every=0))
        assert 0.0 <= networks.evaluate(model, defended, defended.test_mask) <= 1.0


class TestApplyDefense:
    def test_none_is_identity(self, toy4):
        assert defenses.apply_defense(toy4, DefenseSpec()) is toy4

    def test_jaccard_dispatch(self, clusters8):
        out = defenses.apply_defense(clusters8, DefenseSpec(kind=DefenseKind.JACCARD))
        assert out.edge_count == clusters8.edge_count - 1

    def test_svd_rank_clamped_to_graph_size(self, toy4):
        out = defenses.apply_defense(toy4, DefenseSpec(kind=DefenseKind.SVD, svd_rank=10))
        assert out.propagation.shape == (4, 4)
