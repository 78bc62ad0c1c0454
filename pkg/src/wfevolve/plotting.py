"""Accuracy-over-iterations figures. Uses the Agg backend; no display needed."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def plot_accuracy_curve(
    rows: Sequence[Mapping[str, float]],
    path: str | os.PathLike,
    ks: Sequence[int] = (1, 3, 5),
    title: str = "Validation accuracy by iteration",
) -> None:
    """Line plot of top-k accuracy against ``row["iteration"]``.

    PNG metadata is stripped so identical inputs give identical bytes.
    """
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        xs = [int(r["iteration"]) for r in rows]
        for k in ks:
            ax.plot(xs, [r[f"top{k}"] for r in rows], marker="o", ms=3, label=f"Top-{k}")
        ax.set_xlabel("Iteration")
        ax.set_ylabel("Accuracy")
        ax.set_ylim(0, 1.02)
        ax.set_xticks(xs)
        ax.set_title(title)
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None})
        plt.close(fig)


def plot_topk(top_k: Mapping[int, float | None], path: str | os.PathLike, title: str = "Top-k accuracy") -> None:
    """Accuracy against k for one evaluation."""
    ks = sorted(k for k, v in top_k.items() if v is not None)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(ks, [top_k[k] for k in ks], marker="o", ms=4, color="C0")
        for k in ks:
            ax.annotate(f"{top_k[k]:.2f}", (k, top_k[k]), textcoords="offset points", xytext=(0, 5), ha="center")
        ax.set_xlabel("k")
        ax.set_ylabel("Accuracy")
        ax.set_ylim(0, 1.08)
        ax.set_xticks(ks)
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None})
        plt.close(fig)
