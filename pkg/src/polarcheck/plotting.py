"""Static figures for the experiment outputs.

Everything renders through the Agg backend with PNG metadata stripped, so
the same data always produces the same bytes.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
VIOLATOR, NON_VIOLATOR = "#c0392b", "#2e64a8"


def _save(fig, path) -> None:
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def violation_bars(rows, path) -> None:
    """``rows``: (group, method, AUCTP, Violation, ...)."""
    groups = sorted({r[0] for r in rows})
    methods = list(dict.fromkeys(r[1] for r in rows))
    lookup = {(r[0], r[1]): _num(r[3]) for r in rows}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(methods) * len(groups) + 2), 3))
        width = 0.8 / max(1, len(groups))
        x = np.arange(len(methods))
        for j, g in enumerate(groups):
            ax.bar(x + j * width, [lookup.get((g, m), math.nan) for m in methods], width, label=g)
        ax.set_xticks(x + width * (len(groups) - 1) / 2, methods, rotation=45, ha="right")
        ax.set_ylabel("violation ratio")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def ablation_bars(rows, path) -> None:
    """``rows``: (dataset, method, violation, ...)."""
    datasets = list(dict.fromkeys(r[0] for r in rows))
    methods = list(dict.fromkeys(r[1] for r in rows))
    lookup = {(r[0], r[1]): r[2] for r in rows}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        width = 0.8 / len(methods)
        x = np.arange(len(datasets))
        for j, m in enumerate(methods):
            ax.bar(x + j * width, [lookup[(d, m)] for d in datasets], width, label=m)
        ax.set_xticks(x + width * (len(methods) - 1) / 2, datasets)
        ax.set_ylabel("violation ratio")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def depth_curves(depths, methods, curve, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        for m in methods:
            ax.plot(depths, [curve[(d, m)] for d in depths], marker="o", label=m)
        ax.set_xticks(depths)
        ax.set_xlabel("classifier depth")
        ax.set_ylabel("violation ratio")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def datamap_scatter(rows, path) -> None:
    """``rows``: (..., method, strategy, example_id, rc, delta_c, violation);
    one panel per method, violators in red."""
    methods = list(dict.fromkeys(r[3] for r in rows))
    cols = min(4, max(1, len(methods)))
    nrows = max(1, math.ceil(len(methods) / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, cols, figsize=(2.4 * cols, 2.2 * nrows), squeeze=False)
        for ax in axes.flat[len(methods):]:
            ax.set_axis_off()
        for ax, m in zip(axes.flat, methods):
            pts = [(_num(r[6]), _num(r[7]), r[8]) for r in rows if r[3] == m]
            for flag, color in ((0, NON_VIOLATOR), (1, VIOLATOR)):
                xy = np.array([(x, y) for x, y, v in pts if v == flag and math.isfinite(x)
                               and math.isfinite(y)]).reshape(-1, 2)
                ax.scatter(xy[:, 0], xy[:, 1], s=3, c=color, alpha=0.6, linewidths=0)
            ax.set_title(m)
            ax.set_xlim(-1.05, 1.05)
            ax.set_xlabel("rank correlation")
            ax.set_ylabel(r"$\Delta C$ (top removed)")
        fig.tight_layout()
        _save(fig, path)


def behavior_bars(rows, max_len, path, ranks: int = 10) -> None:
    """Mean weight and confidence change per rank, pooled over all profile
    rows of each (group, quantity) by their example counts."""
    ranks = min(ranks, max_len)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(6, 4), sharex=True)
        for i, group in enumerate(("non-violator", "violator")):
            for j, quantity in enumerate(("weight", "delta_c")):
                ax = axes[j, i]
                sel = [r for r in rows if r[5] == group and r[6] == quantity and r[7]]
                vals = []
                for k in range(ranks):
                    pairs = [(_num(r[8 + k]), r[7]) for r in sel if math.isfinite(_num(r[8 + k]))]
                    tot = sum(n for _, n in pairs)
                    vals.append(sum(v * n for v, n in pairs) / tot if tot else 0.0)
                colors = [VIOLATOR if v < 0 else NON_VIOLATOR for v in vals]
                ax.bar(np.arange(1, ranks + 1), vals, color=colors)
                ax.axhline(0, color="black", linewidth=0.5)
                ax.set_title(f"{group}: {'weight' if quantity == 'weight' else 'ΔC'}")
                if j == 1:
                    ax.set_xlabel("rank by |weight|")
        fig.tight_layout()
        _save(fig, path)
