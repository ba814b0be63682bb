"""Figures drawn from training logs and evaluation results (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluator import CMCCurve  # noqa: E402
from .trainer import TrainingLog  # noqa: E402

# no creation timestamps, so reruns write identical files
_META = {"Software": None}


def plot_training(log: TrainingLog, path: Union[str, Path]) -> Path:
    """Two panels: training rank-1 CMC against step, center-loss value against step."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    series = log.rank1_series()
    ax1.plot([s for s, _ in series], [v for _, v in series], marker=".")
    ax1.set_xlabel("step")
    ax1.set_ylabel("training rank-1 CMC")
    ax1.set_ylim(0.0, 1.02)
    ax2.plot([r.step for r in log.records], [r.l_cs for r in log.records], linewidth=0.8)
    ax2.set_xlabel("step")
    ax2.set_ylabel("center loss")
    if any(r.l_cs > 0 for r in log.records):
        ax2.set_yscale("log")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_cmc(curve: CMCCurve, path: Union[str, Path], label: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ranks = range(1, len(curve.values) + 1)
    ax.plot(ranks, curve.values, marker=".", label=label or None)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0.0, 1.02)
    if label:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path
