"""Report figures (PNG via matplotlib's Agg backend) and PPM sample heatmaps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no version/date stamps, so identical inputs give identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def accuracy_figure(rows, selected: int, vote_accuracy: float | None, path) -> Path:
    """Held-out accuracy per ensemble member, with validation accuracy overlaid.

    ``rows`` are ``(label, val_accuracy, test_accuracy)`` tuples.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        x = np.arange(len(rows))
        test = [100 * r[2] for r in rows]
        colors = ["tab:orange" if i == selected else "tab:blue" for i in x]
        ax.bar(x, test, color=colors, width=0.6, label="held-out")
        ax.plot(x, [100 * r[1] for r in rows], "ko", ms=4, label="validation")
        if vote_accuracy is not None:
            ax.axhline(100 * vote_accuracy, color="0.4", ls="--", lw=1, label="majority vote")
        ax.set_xticks(x, [r[0] for r in rows])
        ax.set_ylim(0, 120)
        ax.set_yticks(range(0, 101, 20))
        ax.set_ylabel("accuracy (%)")
        ax.set_title("Leave-one-domain-out accuracy (selected in orange)")
        ax.legend(loc="upper center", ncol=3, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def training_figure(curves, path) -> Path:
    """Mean loss and mean transport cost per augmentation iteration.

    ``curves`` are ``(label, losses, costs)`` tuples.
    """
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_c) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for label, losses, costs in curves:
            it = np.arange(len(losses))
            ax_l.plot(it, losses, lw=1.2, label=label)
            ax_c.plot(it, costs, lw=1.2, label=label)
        for ax in (ax_l, ax_c):
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax_l.set_xlabel("iteration")
        ax_l.set_ylabel("mean minibatch loss")
        ax_c.set_xlabel("iteration")
        ax_c.set_ylabel("mean transport cost")
        if curves:
            ax_l.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def heatmap_rgb(data, cmap: str = "viridis") -> np.ndarray:
    """Map a 2-D array to 8-bit RGB, scaling its own min..max onto the colormap."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"heatmap needs a 2-D array, got shape {data.shape}")
    lo, hi = float(data.min()), float(data.max())
    norm = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    rgba = matplotlib.colormaps[cmap](norm)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Binary portable pixmap (P6) for an (H, W, 3) uint8 image."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def write_heatmap_ppm(data, path, transpose: bool = True) -> Path:
    """Save a sample's amplitudes as a PPM image, time running left to right by default."""
    data = np.asarray(data)
    path = Path(path)
    path.write_bytes(encode_ppm(heatmap_rgb(data.T if transpose else data)))
    return path
