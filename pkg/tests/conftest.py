"""Shared fixtures for the test suite."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from stsparse.models.graph import Graph  # noqa: E402
from stsparse.services.datasets import (  # noqa: E402
    fixture_clusters8,
    fixture_path2,
    fixture_toy4,
    fixture_toy6,
)
from stsparse.services.graph_ops import adjacency_from_edges  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running checks; the desk-scale reproductions also need STSPARSE_DATA"
    )


def make_graph(n, edges, features=None, labels=None, train=(), val=(), test=()):
    """Small graph builder for ad-hoc cases."""
    features = np.eye(n) if features is None else np.asarray(features, dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)

    def mask(nodes):
        out = np.zeros(n, dtype=bool)
        out[list(nodes)] = True
        return out

    return Graph(
        adjacency=adjacency_from_edges(n, [e[0] for e in edges], [e[1] for e in edges]),
        features=features,
        labels=labels,
        train_mask=mask(train),
        val_mask=mask(val),
        test_mask=mask(test),
    )


@pytest.fixture
def path2():
    return fixture_path2()


@pytest.fixture
def toy4():
    return fixture_toy4()


@pytest.fixture
def toy6():
    return fixture_toy6()


@pytest.fixture
def clusters8():
    return fixture_clusters8()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def data_root():
    """Directory of converted bundles for the slow reproduction checks."""
    root = os.environ.get("STSPARSE_DATA")
    if not root:
        pytest.skip("STSPARSE_DATA is not set")
    return root
