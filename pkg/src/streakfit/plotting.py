"""Static PNG figures: fit overlays, loss traces and quartile charts."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def overlay(image, paths: dict, out_path, title: str = "") -> None:
    """Observed pixels with projected streak paths (label -> (n, 2) crop pixels)."""
    fig, ax = plt.subplots(figsize=(6, 6 * image.shape[0] / max(image.shape[1], 1) + 0.6))
    ax.imshow(image, cmap="gray", origin="upper", interpolation="nearest")
    colors = {"init": "tab:red", "converged": "tab:green", "truth": "tab:cyan"}
    for label, path in paths.items():
        path = np.asarray(path)
        ax.plot(path[:, 0], path[:, 1], lw=1.0, color=colors.get(label), label=label)
        ax.plot(path[0, 0], path[0, 1], "o", ms=3, color=colors.get(label))
    ax.set_xlim(-0.5, image.shape[1] - 0.5)
    ax.set_ylim(image.shape[0] - 0.5, -0.5)
    if paths:
        ax.legend(loc="upper right", fontsize=7)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def loss_trace(trace: list, out_path) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    its = [row["iteration"] for row in trace]
    ax.semilogy(its, [row["total"] for row in trace], lw=1.0, color="k", label="total")
    n = len(trace[0]["losses"]) if trace else 0
    for m in range(n):
        ax.semilogy(its, [row["losses"][m] for row in trace], lw=0.7, label=f"image {m + 1}")
    for i in range(1, len(trace)):
        if trace[i]["k"] != trace[i - 1]["k"]:
            ax.axvline(its[i], color="0.7", lw=0.6, ls="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def quartile_chart(rows, metric: str, out_path, title: str = "") -> None:
    """Median bars with Q1-Q3 whiskers for init and converged phases of every cell."""
    rows = [r for r in rows if r.metric == metric]
    cells = list(dict.fromkeys(r.cell for r in rows))
    if not cells:
        return
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(cells) + 2), 4))
    x = np.arange(len(cells))
    width = 0.38
    for offset, phase, color in ((-width / 2, "init", "tab:red"), (width / 2, "converged", "tab:green")):
        q = {r.cell: r for r in rows if r.phase == phase}
        med = np.array([q[c].q2 if c in q else np.nan for c in cells])
        lo = np.array([q[c].q2 - q[c].q1 if c in q else 0.0 for c in cells])
        hi = np.array([q[c].q3 - q[c].q2 if c in q else 0.0 for c in cells])
        ax.bar(x + offset, med, width, yerr=[lo.tolist(), hi.tolist()], color=color, alpha=0.8, capsize=2, label=phase)
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels([_short(c) for c in cells], rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def _short(label: str) -> str:
    keep = []
    for part in label.split(";"):
        key, _, value = part.partition("=")
        if key != "kind":
            keep.append(value if key in ("type", "mode", "level") else f"{key}{value}")
    return " ".join(keep)
