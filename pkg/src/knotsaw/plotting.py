"""Figures for pipeline reports.

Everything is rendered off-screen with the Agg/SVG backends and saved with
fixed metadata and hash salt so re-runs produce identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "knotsaw",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
}


def _save(fig, path):
    fmt = str(path).rsplit(".", 1)[-1].lower()
    meta = {"Date": None, "Creator": None} if fmt == "svg" else {}
    if fmt == "png":
        meta = {"Software": None}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def plot_function(path, theta, values, title, ylabel, marker_deg=None):
    """Line plot of a circular function over 0..360 degrees."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        ax.plot(theta, values, color="C0")
        if marker_deg is not None:
            ax.axvline(marker_deg, color="C3", linestyle="--", linewidth=1.0,
                       label=f"{marker_deg:.1f} deg")
            ax.legend(loc="upper right", frameon=False)
        ax.set_xlim(0, 360)
        ax.set_xticks(np.arange(0, 361, 45))
        ax.set_xlabel("polar angle [deg]")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        _save(fig, path)


def plot_functions_overlay(path, theta, knot_values, pattern_values, angle_deg):
    """Knot function shifted by the chosen angle against the pattern function."""
    n = len(theta)
    shift = int(round(angle_deg / (360.0 / n))) % n
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        ax.plot(theta, pattern_values / (pattern_values.max() or 1.0), color="C1", label="pattern")
        shifted = np.roll(knot_values, -shift)
        ax.plot(theta, shifted / (shifted.max() or 1.0), color="C0", label="knots after sawing rotation")
        ax.set_xlim(0, 360)
        ax.set_xticks(np.arange(0, 361, 45))
        ax.set_xlabel("polar angle [deg]")
        ax.set_ylabel("scaled value")
        ax.legend(loc="upper right", frameon=False)
        _save(fig, path)


def plot_sweep(path, angles, counts, optimized_angle=None, ylabel="arris knots"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        ax.step(angles, counts, where="post", color="C0")
        ax.axhline(np.mean(counts), color="0.5", linestyle=":", label="all-angle mean")
        if optimized_angle is not None:
            ax.axvline(optimized_angle, color="C3", linestyle="--", label="optimized angle")
        ax.set_xlabel("sawing angle [deg]")
        ax.set_ylabel(ylabel)
        ax.legend(loc="upper right", frameon=False)
        _save(fig, path)


def plot_heightmap(path, values, l_extent, title="height map"):
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        im = ax.imshow(values, aspect="auto", origin="lower", cmap="viridis",
                       extent=(0, 360, 0, l_extent), interpolation="nearest")
        fig.colorbar(im, ax=ax, label="mm")
        ax.set_xlabel("polar angle [deg]")
        ax.set_ylabel("l [mm]")
        ax.set_title(title)
        _save(fig, path)
