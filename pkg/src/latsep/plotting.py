"""Figure emission: latent scatter plots, oracle-distance histograms,
STRIP entropy histograms and the opacity/ASR curve.

Convention throughout: red = poison (trigger-planted), blue = clean.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

POISON_COLOR = "red"
CLEAN_COLOR = "blue"
HIST_XRANGE = (-3.0, 3.0)
HIST_YMAX = 75
HIST_BINS = 60


def _save(fig, path):
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def scatter_projection(coords: np.ndarray, planted_mask: np.ndarray, path,
                       title: str = "") -> str:
    """2-D projection scatter: blue clean points under red poison points."""
    coords = np.asarray(coords)
    planted = np.asarray(planted_mask, dtype=bool)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(coords[~planted, 0], coords[~planted, 1], s=4, c=CLEAN_COLOR,
               alpha=0.5, label="clean", linewidths=0)
    if planted.any():
        ax.scatter(coords[planted, 0], coords[planted, 1], s=6, c=POISON_COLOR,
                   alpha=0.9, label="poison", linewidths=0)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(loc="upper right", fontsize=7, markerscale=2)
    return _save(fig, path)


def signed_distance_histogram(distances: np.ndarray, planted_mask: np.ndarray, path,
                              title: str = "") -> str:
    """Oracle-hyperplane distance histogram with the fixed axis convention:
    X in [-3, 3], Y in [0, 75]; taller bars are cut at the top."""
    distances = np.asarray(distances, dtype=np.float64)
    planted = np.asarray(planted_mask, dtype=bool)
    bins = np.linspace(*HIST_XRANGE, HIST_BINS + 1)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.hist(np.clip(distances[~planted], *HIST_XRANGE), bins=bins, color=CLEAN_COLOR,
            alpha=0.65, label="clean")
    if planted.any():
        ax.hist(np.clip(distances[planted], *HIST_XRANGE), bins=bins, color=POISON_COLOR,
                alpha=0.75, label="poison")
    ax.set_xlim(*HIST_XRANGE)
    ax.set_ylim(0, HIST_YMAX)
    ax.set_xlabel("signed distance to oracle hyperplane")
    ax.set_ylabel("samples")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    return _save(fig, path)


def entropy_histogram(clean_entropies: np.ndarray, poison_entropies: np.ndarray, path,
                      threshold: float | None = None, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    lo = min(np.min(clean_entropies), np.min(poison_entropies) if len(poison_entropies) else 0.0)
    hi = max(np.max(clean_entropies), np.max(poison_entropies) if len(poison_entropies) else 1.0)
    bins = np.linspace(lo, hi + 1e-9, 50)
    ax.hist(clean_entropies, bins=bins, color=CLEAN_COLOR, alpha=0.65, label="clean")
    if len(poison_entropies):
        ax.hist(poison_entropies, bins=bins, color=POISON_COLOR, alpha=0.75, label="poison")
    if threshold is not None:
        ax.axvline(threshold, color="black", linestyle="--", linewidth=1, label="threshold")
    ax.set_xlabel("normalized entropy")
    ax.set_ylabel("samples")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    return _save(fig, path)


def asr_opacity_curve(opacities, asrs, path, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(opacities, np.asarray(asrs) * 100.0, marker="o", color=POISON_COLOR)
    ax.set_xlabel("inference-time trigger opacity")
    ax.set_ylabel("ASR (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def trigger_gallery(masks: dict, patterns: dict, out_dir) -> list[str]:
    """One reversed-trigger image per class (mask-weighted pattern)."""
    from pathlib import Path

    paths = []
    for c in sorted(masks):
        m = np.asarray(masks[c])[..., None]
        p = np.asarray(patterns[c])
        img = np.clip(m * p, 0, 1)
        fig, ax = plt.subplots(figsize=(2, 2))
        ax.imshow(img)
        ax.set_title(f"class {c}", fontsize=8)
        ax.axis("off")
        paths.append(_save(fig, Path(out_dir) / f"reversed_trigger_class{c}.png"))
    return paths
