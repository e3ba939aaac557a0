"""Tests for the SVG report charts."""

import numpy as np
import pandas as pd

from stsparse.ui import charts


def test_accuracy_chart_is_byte_stable(tmp_path):
    frame = pd.DataFrame(
        {"gcn/dice": [0.81, 0.78, 0.74], "st_sparse_gcn/dice": [0.82, 0.80, 0.79]},
        index=[0.0, 0.05, 0.10],
    )
    first = charts.plot_accuracy_vs_rate(frame, "cora", tmp_path / "a.svg").read_bytes()
    second = charts.plot_accuracy_vs_rate(frame, "cora", tmp_path / "b.svg").read_bytes()
    assert first == second
    assert b"<svg" in first
    assert b"gcn/dice" in first


def test_activation_chart(tmp_path):
    traces = {"cora/gcn": np.linspace(0.6, 0.4, 20), "cora/st_sparse_gcn": np.full(20, 0.1)}
    path = charts.plot_activation_ratio(traces, tmp_path / "nested" / "ratio.svg")
    assert path.exists()
    assert b"Date" not in path.read_bytes()
