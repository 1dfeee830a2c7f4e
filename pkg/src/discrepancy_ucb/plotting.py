"""SVG figures: metric curves with min/max bands and control reward traces.

Output is byte-stable for identical inputs (fixed SVG id salt, no date stamp).
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}

METRIC_LABELS = {
    "max_variance": "max predictive variance on test grid",
    "mse": "MSE on test grid",
    "mean_visited_discrepancy": "mean prior discrepancy at visited points",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "discrepancy-ucb", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_bands(series: Mapping[str, Tuple[Sequence, Sequence, Sequence, Sequence]], ylabel: str, path,
               xlabel: str = "episode", logy: bool = False, title: str = "") -> Path:
    """One line per label with a shaded min/max band.

    ``series`` maps a label to ``(x, mean, lo, hi)``.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, mean, lo, hi) in series.items():
        x = np.asarray(x, dtype=float)
        line, = ax.plot(x, mean, label=label, lw=1.5)
        ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.2, lw=0)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_control(traces: Mapping[str, Sequence[float]], path, title: str = "swing-up") -> Path:
    """Cumulative reward against control step, one line per controller."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, trace in traces.items():
        trace = np.asarray(trace, dtype=float)
        ax.plot(np.arange(1, trace.size + 1), trace, label=label, lw=1.5)
    ax.set_xlabel("control step")
    ax.set_ylabel("cumulative reward")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
