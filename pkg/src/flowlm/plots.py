"""Static charts for the CLI's --plot flag."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def loss_curves(log: list, path) -> None:
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("sem_loss", "cfm_loss", "total"):
        if any(r.get(key) for r in log):
            ax.plot(steps, [r[key] for r in log], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), metadata={"Software": None})
    plt.close(fig)


def ablation_bars(rows: list, path) -> None:
    rows = [r for r in rows if not r.get("error")]
    labels = [r["cell"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, key, title in ((axes[0], "mean_lexical_acc", "lexical paired accuracy"),
                           (axes[1], "mean_ce", "held-out CE")):
        vals = [r.get(key) for r in rows]
        ax.bar(range(len(rows)), [v if v is not None else 0.0 for v in vals])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(Path(path), metadata={"Software": None})
    plt.close(fig)
