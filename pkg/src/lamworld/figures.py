"""Matplotlib rendering for evaluation reports.

Each renderer writes one PNG next to the delimited output of its suite:
retrieval panels, migration strips, controllability grids, rollout strips,
predictiveness curves, and training curves.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalsuite import PredictivenessCurve, RetrievalResult
from .lam import TrainCurve


def _save(fig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _show(ax, frame: np.ndarray, title: str = "") -> None:
    ax.imshow(np.clip(frame, 0, 1), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=7)


def render_pair_grid(results: Sequence[RetrievalResult], path: Path | str) -> Path:
    """Rows of (query obs->goal | neighbor obs->goal ...) image pairs."""
    k = max(len(r.neighbors) for r in results)
    rows = len(results)
    fig, axes = plt.subplots(rows, 2 * (k + 1), figsize=(1.1 * 2 * (k + 1), 1.2 * rows))
    axes = np.atleast_2d(axes)
    for ri, res in enumerate(results):
        _show(axes[ri, 0], res.query.obs, "query obs")
        _show(axes[ri, 1], res.query.goal, "goal")
        for ni in range(k):
            col = 2 * (ni + 1)
            if ni < len(res.neighbors):
                pair, dist = res.neighbors[ni]
                _show(axes[ri, col], pair.obs, f"nn{ni + 1} d={dist:.2f}")
                _show(axes[ri, col + 1], pair.goal, "goal")
            else:
                axes[ri, col].axis("off")
                axes[ri, col + 1].axis("off")
    return _save(fig, path)


def render_frame_strips(
    strips: Sequence[tuple[str, np.ndarray]], path: Path | str
) -> Path:
    """One labeled row of frames per strip (sources, rollouts, migrations)."""
    rows = len(strips)
    cols = max(s.shape[0] for _, s in strips)
    fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols, 1.3 * rows))
    axes = np.atleast_2d(axes)
    for ri, (label, frames) in enumerate(strips):
        for ci in range(cols):
            if ci < frames.shape[0]:
                _show(axes[ri, ci], frames[ci], label if ci == 0 else f"t={ci}")
            else:
                axes[ri, ci].axis("off")
    return _save(fig, path)


def render_predictiveness(curve: PredictivenessCurve, path: Path | str) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for di, name in enumerate(curve.dim_names):
        ax.plot(curve.Ns, curve.normalized_std[:, di], marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.axhline(1.0, color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("neighborhood size N")
    ax.set_ylabel("normalized std of ground-truth actions")
    ax.legend()
    return _save(fig, path)


def render_training_curve(curve: TrainCurve, path: Path | str, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(curve.steps, curve.total, linewidth=0.8, label="train")
    if curve.val_steps:
        ax.plot(curve.val_steps, curve.val_loss, marker="o", label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend()
    return _save(fig, path)


def render_controllability(
    base_frame: np.ndarray, generated: Sequence[np.ndarray], labels: Sequence[str], path: Path | str
) -> Path:
    cols = len(generated) + 1
    fig, axes = plt.subplots(1, cols, figsize=(1.2 * cols, 1.5))
    _show(axes[0], base_frame, "initial")
    for i, (frame, label) in enumerate(zip(generated, labels)):
        _show(axes[i + 1], frame, label)
    return _save(fig, path)
