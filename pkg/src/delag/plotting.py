"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["figure.facecolor"] = "white"
plt.rcParams["axes.facecolor"] = "white"
plt.rcParams["savefig.facecolor"] = "white"
plt.rcParams["font.size"] = 9


def plot_crosstrack(table, path) -> None:
    """Coverage ratio and overlap fraction against latitude."""
    lat, ratio, frac = (np.asarray(c) for c in zip(*table))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(lat, ratio, color="k", lw=1.5, label="coverage ratio")
    ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("latitude (deg)")
    ax.set_ylabel("ratio")
    ax2 = ax.twinx()
    ax2.plot(lat, frac, color="tab:red", lw=1.2, label="overlap fraction")
    ax2.set_ylabel("fraction seen twice per 16 days", color="tab:red")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_scatter(pred, truth, path, title: str = "") -> None:
    """Predicted vs. reference temperature with a 1:1 line."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    lo = float(min(pred.min(), truth.min()))
    hi = float(max(pred.max(), truth.max()))
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.scatter(truth, pred, s=3, alpha=0.4, color="k", linewidths=0)
    ax.plot([lo, hi], [lo, hi], color="tab:red", lw=0.8)
    ax.set_xlabel("reference (K)")
    ax.set_ylabel("predicted (K)")
    if title:
        ax.set_title(title)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_day(observed, mean, lower, upper, path, title: str = "") -> None:
    """Observed, reconstructed and 95% interval width maps for one day."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    vmin = np.nanmin(mean)
    vmax = np.nanmax(mean)
    for ax, arr, name, kw in (
        (axes[0], observed, "observed", {"vmin": vmin, "vmax": vmax, "cmap": "inferno"}),
        (axes[1], mean, "reconstructed", {"vmin": vmin, "vmax": vmax, "cmap": "inferno"}),
        (axes[2], np.asarray(upper) - np.asarray(lower), "95% width", {"cmap": "viridis"}),
    ):
        im = ax.imshow(arr, **kw)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
