"""Optional PNG renderings of the tidy report files. The CSVs stay canonical."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps the bytes stable between runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _headline(rows: Sequence[dict]) -> str:
    metrics = {r["metric"] for r in rows}
    return "mape" if "mape" in metrics else "f1"


def sweep_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Seed-mean metric against missing rate, one line per method, one panel per task/label."""
    metric = _headline(rows)
    cells = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            cells[(r["task"], r["label"], r["method"], r["rate"])].append(r["value"])
    panels = sorted({(t, lab) for t, lab, _, _ in cells})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.2), sharey=True, squeeze=False)
        for ax, (t, lab) in zip(axes[0], panels):
            for method in sorted({m for tt, ll, m, _ in cells if (tt, ll) == (t, lab)}):
                rates = sorted(rt for tt, ll, m, rt in cells if (tt, ll, m) == (t, lab, method))
                ax.plot(rates, [np.mean(cells[(t, lab, method, rt)]) for rt in rates], marker="o", ms=3, label=method)
            ax.set_title(f"{t}-{lab}")
            ax.set_xlabel("missing rate")
        axes[0][0].set_ylabel(metric)
        axes[0][-1].legend(fontsize=7)
        return _save(fig, Path(path))


def history_figure(histories: dict, path: str | Path) -> Path:
    """Per-epoch loss terms, averaged over seeds."""
    keys = ("s1", "s2", "r1", "r2", "d", "total")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k in keys:
            curves = [[row[k] for row in h.rows] for h in histories.values()]
            if not curves or not np.any(curves):
                continue
            ax.plot(np.arange(1, len(curves[0]) + 1), np.mean(curves, axis=0), label=k, lw=1.8 if k == "total" else 1.0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss per sample")
        ax.set_yscale("log")
        ax.legend(ncol=3, fontsize=7)
        return _save(fig, Path(path))


def convergence_figure(rows: Sequence[dict], path: str | Path, max_iter: int | None = 50) -> Path:
    """Iterate metric per alternate-inference iteration, seed mean per label."""
    metric = _headline(rows)
    acc = defaultdict(list)
    for r in rows:
        if r["metric"] == metric and (max_iter is None or r["iteration"] <= max_iter):
            acc[(r["label"], r["iteration"])].append(r["value"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for lab in sorted({k[0] for k in acc}):
            its = sorted(i for ll, i in acc if ll == lab)
            ax.plot(its, [np.mean(acc[(lab, i)]) for i in its], label=lab)
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric)
        ax.legend()
        return _save(fig, Path(path))


def ablation_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Grouped bars of seed-mean F1 per stack, grouped by task/label."""
    acc = defaultdict(list)
    for r in rows:
        if r["metric"] == "f1":
            acc[(r["stack"], r["task"], r["label"])].append(r["value"])
    stacks = list(dict.fromkeys(r["stack"] for r in rows))
    groups = sorted({(t, lab) for _, t, lab in acc})
    width = 0.8 / max(len(stacks), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = np.arange(len(groups))
        for i, s in enumerate(stacks):
            ax.bar(xs + i * width, [np.mean(acc[(s, t, lab)]) for t, lab in groups], width, label=s)
        ax.set_xticks(xs + width * (len(stacks) - 1) / 2)
        ax.set_xticklabels([f"{t}-{lab}" for t, lab in groups])
        ax.set_ylabel("f1")
        ax.legend(fontsize=7)
        return _save(fig, Path(path))
