"""Figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def delta_chart(rows, names, path, title="P(y|do(x)) - P(y|x)"):
    """Horizontal bars of the ranked deltas, positive in one colour."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.3 * max(len(rows), 3) + 1))
        labels = [f"{names[r.y]} | {names[r.x]}" for r in rows][::-1]
        values = [r.delta for r in rows][::-1]
        ax.barh(range(len(values)), values, color=["tab:blue" if v >= 0 else "tab:red" for v in values])
        ax.set_yticks(range(len(values)), labels)
        ax.axvline(0, color="k", lw=0.6)
        ax.set_xlabel("delta")
        ax.set_title(title)
        _save(fig, path)


def prior_gap_chart(rows, names, x_name, path):
    """P(z) and P(z|x) side by side, ordered as in the report."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(rows) + 1), 3.2))
        pos = range(len(rows))
        ax.bar([p - 0.2 for p in pos], [r[1] for r in rows], width=0.4, label="P(z)")
        ax.bar([p + 0.2 for p in pos], [r[2] for r in rows], width=0.4, label=f"P(z|{x_name})")
        ax.set_xticks(list(pos), [names[r[0]] for r in rows], rotation=60, ha="right")
        ax.set_ylabel("probability")
        ax.legend(frameon=False)
        _save(fig, path)


def loss_chart(curve, path):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = [r[0] for r in curve]
        ax.plot(steps, [r[1] for r in curve], label="total")
        ax.plot(steps, [r[2] for r in curve], label="self", lw=0.8)
        ax.plot(steps, [r[3] for r in curve], label="context", lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)


def oracle_chart(cond, do, names, path):
    """Heatmaps of exact conditional and interventional presence."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
        for ax, table, title in zip(axes, (cond, do), ("P(y|x)", "P(y|do(x))")):
            im = ax.imshow(table, vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks(range(len(names)), names, rotation=60, ha="right")
            ax.set_yticks(range(len(names)), names)
            ax.set_title(title)
        fig.colorbar(im, ax=axes, shrink=0.8)
        fig.savefig(path, dpi=120)
        plt.close(fig)
