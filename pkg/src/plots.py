"""SVG figures (optional, ``--plot``): sample scatter, loss curves and
guidance target/achieved intensity overlays."""
from __future__ import annotations
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

# fixed salt and no date: reruns write byte-identical files
plt.rcParams["svg.hashsalt"] = "jumpdistill"
SVG_META = {"Date": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    logger.info("figure written to %s", path)
    return path


def scatter_samples(path: Path, samples: np.ndarray, labels: np.ndarray,
                    reference: Optional[np.ndarray] = None, title: str = "samples") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    if reference is not None:
        ax.scatter(reference[:, 0], reference[:, 1], s=3, c="lightgray", label="data")
    for lab in np.unique(labels):
        pts = samples[labels == lab]
        ax.scatter(pts[:, 0], pts[:, 1], s=4, label="null" if lab < 0 else f"label {lab}")
    ax.set_title(title)
    ax.legend(markerscale=3, fontsize=7)
    return _save(fig, path)


def loss_curves(path: Path, rows: Sequence[Dict[str, float]], keys: Sequence[str] = ("loss_ctm", "loss_dsm")) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    it = [r["iter"] for r in rows]
    for k in keys:
        ax.plot(it, [r[k] for r in rows], label=k, linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.legend()
    return _save(fig, path)


def intensity_overlay(path: Path, target: np.ndarray, achieved: Dict[str, np.ndarray], title: str) -> Path:
    """Target curve against the mean achieved curve of each method."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    frames = np.arange(target.shape[0])
    ax.plot(frames, target, "k--", label="target")
    for method, curves in achieved.items():
        ax.plot(frames, curves.mean(0), label=method)
    ax.set_xlabel("frame")
    ax.set_ylabel("dB")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


__all__: List[str] = ["scatter_samples", "loss_curves", "intensity_overlay"]
