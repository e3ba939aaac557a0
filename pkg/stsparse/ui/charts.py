"""
Report charts.

Renders the accuracy-versus-rate and activation-ratio plots as SVG files.
Output is byte-stable: the SVG id salt is fixed and no date is embedded.
"""

import logging
from pathlib import Path
from typing import Dict, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib import rcParams  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

COLORS = {
    "background": "#ffffff",
    "text": "#1f1f1f",
    "grid": "#c8c8c8",
    "series": ["#0078d4", "#d83b01", "#107c10", "#5c2d91", "#ffb900", "#008575", "#e3008c", "#767676"],
}

SVG_HASH_SALT = "stsparse"


def apply_style():
    """Set the rcParams every report chart shares."""
    rcParams["svg.hashsalt"] = SVG_HASH_SALT
    rcParams["svg.fonttype"] = "none"
    rcParams["figure.facecolor"] = COLORS["background"]
    rcParams["axes.facecolor"] = COLORS["background"]
    rcParams["text.color"] = COLORS["text"]
    rcParams["axes.labelcolor"] = COLORS["text"]
    rcParams["xtick.color"] = COLORS["text"]
    rcParams["ytick.color"] = COLORS["text"]
    rcParams["axes.edgecolor"] = COLORS["grid"]
    rcParams["grid.color"] = COLORS["grid"]
    rcParams["grid.alpha"] = 0.3


def _new_figure():
    apply_style()
    figure = plt.figure(figsize=(8, 6), dpi=100)
    axes = figure.add_subplot(111)
    axes.grid(True)
    return figure, axes


def _save(figure: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, format="svg", metadata={"Date": None})
    plt.close(figure)
    logging.debug(f"Wrote chart {path}")
    return path


def plot_accuracy_vs_rate(frame: pd.DataFrame, dataset: str, path: Union[str, Path]) -> Path:
    """
    One line per defender/attacker column of `frame`, indexed by perturbation rate.

    Args:
        frame: Seed-averaged accuracies, rates as index
        dataset: Dataset name used in the title
        path: Output SVG path
    """
    figure, axes = _new_figure()
    for i, column in enumerate(frame.columns):
        series = frame[column].dropna()
        axes.plot(
            series.index.to_numpy() * 100,
            series.to_numpy(),
            marker="o",
            linewidth=1.5,
            color=COLORS["series"][i % len(COLORS["series"])],
            label=column,
        )
    axes.set_title(f"Accuracy under poisoning: {dataset}", fontsize=14)
    axes.set_xlabel("Perturbation rate (%)", fontsize=12)
    axes.set_ylabel("Test accuracy", fontsize=12)
    if len(frame.columns):
        axes.legend(loc="lower left", framealpha=0.8, fontsize=8)
    figure.tight_layout()
    return _save(figure, path)


def plot_activation_ratio(traces: Dict[str, np.ndarray], path: Union[str, Path]) -> Path:
    """Per-epoch fraction of nonzero hidden activations, one line per dataset/defender."""
    figure, axes = _new_figure()
    for i, (label, trace) in enumerate(sorted(traces.items())):
        epochs = np.arange(1, len(trace) + 1)
        axes.plot(epochs, trace, linewidth=1.5, color=COLORS["series"][i % len(COLORS["series"])], label=label)
    axes.set_title("Hidden activation ratio during training", fontsize=14)
    axes.set_xlabel("Epoch", fontsize=12)
    axes.set_ylabel("Active fraction", fontsize=12)
    axes.set_ylim(bottom=0)
    if traces:
        axes.legend(loc="upper right", framealpha=0.8, fontsize=8)
    figure.tight_layout()
    return _save(figure, path)
