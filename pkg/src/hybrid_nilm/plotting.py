"""Figure rendering for run reports (truth vs. prediction, loss curves)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib as mpl  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata carries the matplotlib version by default; drop it so reruns are byte-identical
_PNG_META = {"Software": None}

STYLE = {
    "axes.labelsize": 11,
    "axes.titlesize": 12,
    "font.size": 10,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.0,
    "savefig.dpi": 120,
}


def figure_size(width: float = 8.0, ratio: float | None = None) -> tuple[float, float]:
    if ratio is None:
        ratio = (np.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio * 0.7


def plot_disaggregation(unix_seconds, truth, pred, title: str, path, max_points: int = 20_000):
    """Overlay ground truth and predicted appliance power against elapsed hours."""
    t = np.asarray(unix_seconds, dtype=float)
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if t.size > max_points:
        step = int(np.ceil(t.size / max_points))
        t, truth, pred = t[::step], truth[::step], pred[::step]
    hours = (t - t[0]) / 3600.0 if t.size else t
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        ax.plot(hours, truth, color="0.2", label="ground truth")
        ax.plot(hours, pred, color="tab:red", alpha=0.8, label="prediction")
        ax.set_xlabel("time (h)")
        ax.set_ylabel("power (W)")
        ax.set_title(title)
        top = np.nanmax(np.concatenate([truth, pred])) if t.size else 0.0
        if np.isfinite(top) and top > 0:
            ax.set_ylim(bottom=min(0.0, ax.get_ylim()[0]), top=1.2 * top)  # room for the legend
        ax.legend(loc="upper right", ncol=2)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)


def plot_loss_history(epochs, train_loss, valid_loss, title: str, path):
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(6.0))
        ax.plot(epochs, train_loss, marker=".", label="train")
        ax.plot(epochs, valid_loss, marker=".", label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE (normalized)")
        ax.set_title(title)
        if len(train_loss) and min(min(train_loss), min(valid_loss)) > 0:
            ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
