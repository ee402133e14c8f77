"""PNG figures written next to the CSV outputs (Agg backend, file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def training_curves(curves, path, window=100):
    """``curves`` maps a label to a moving-average series."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, series in curves.items():
        ax.plot(np.arange(1, len(series) + 1), series, label=label, lw=1.2)
    ax.set_xlabel("episode")
    ax.set_ylabel(f"normalized reward ({window}-episode moving average)")
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(frameon=False)
    _save(fig, path)


def matrix_histograms(cells, path, title=None):
    """``cells`` maps (agent, environment) to an EvalReport; draws a 2x2 grid."""
    agents = ["nominal", "robust"]
    envs = ["nominal", "adversarial"]
    fig, axes = plt.subplots(2, 2, figsize=(8.0, 6.0), sharex=True)
    for i, agent in enumerate(agents):
        for j, env in enumerate(envs):
            ax = axes[i][j]
            rep = cells.get((agent, env))
            if rep is None:
                ax.set_axis_off()
                continue
            edges = np.asarray(rep.hist_edges)
            ax.bar(edges[:-1], rep.hist_counts, width=np.diff(edges), align="edge",
                   color="tab:blue" if env == "nominal" else "tab:red", alpha=0.75)
            ax.axvline(rep.mean, color="k", lw=1, ls="--")
            ax.set_title(f"{agent} agent / {env} env: {rep.mean:.2f} ± {rep.std:.2f}",
                         fontsize=9)
            if i == 1:
                ax.set_xlabel("normalized episode reward")
            if j == 0:
                ax.set_ylabel("episodes")
    if title:
        fig.suptitle(title)
    _save(fig, path)
