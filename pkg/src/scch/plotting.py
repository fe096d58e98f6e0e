"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_curve(curve: Sequence[dict], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, 2, figsize=(8, 3))
        ep = [r["epoch"] for r in curve]
        ax[0].semilogy(ep, [r["train_loss"] for r in curve], marker="o", ms=3)
        ax[0].set_xlabel("epoch")
        ax[0].set_ylabel("train loss")
        evals = [r for r in curve if r["eval_mae_avg"] is not None]
        if evals:
            e = [r["epoch"] for r in evals]
            ax[1].plot(e, [np.nan if r["eval_icc_avg"] is None else r["eval_icc_avg"] for r in evals], marker="o", ms=3, label="ICC")
            ax[1].plot(e, [r["eval_mae_avg"] for r in evals], marker="s", ms=3, label="MAE")
            ax[1].legend()
        ax[1].set_xlabel("epoch")
        ax[1].set_title("eval (avg over AUs)")
        _save(fig, path)


def au_scores(rows, path) -> None:
    per = [r for r in rows if r.au_id != "avg"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        x = np.arange(len(per))
        ax.bar(x - 0.2, [np.nan if r.icc is None else r.icc for r in per], 0.4, label="ICC(3,1)")
        ax.bar(x + 0.2, [r.mae for r in per], 0.4, label="MAE")
        ax.set_xticks(x, [f"AU{r.au_id}" for r in per])
        ax.legend()
        _save(fig, path)


def ablation(results, path) -> None:
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return
    labels = [
        f"scc={'on' if r.cell.scc else 'off'} DL={r.cell.deconv_layers}\n{r.cell.edge_variant} k={r.cell.k} s={r.cell.seed}"
        for r in ok
    ]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, 2, figsize=(max(6, 0.9 * len(ok) + 2), 3.5))
        x = np.arange(len(ok))
        ax[0].bar(x, [np.nan if r.avg_icc is None else r.avg_icc for r in ok], color="C0")
        ax[0].set_ylabel("avg ICC")
        ax[1].bar(x, [r.avg_mae for r in ok], color="C1")
        ax[1].set_ylabel("avg MAE")
        for a in ax:
            a.set_xticks(x, labels, rotation=60, ha="right", fontsize=6)
        _save(fig, path)


def k_sweep(results, path) -> bool:
    ok = [r for r in results if r.status == "ok" and r.cell.scc]
    ks = sorted({r.cell.k for r in ok})
    if len(ks) < 2:
        return False
    icc = [np.nanmean([np.nan if r.avg_icc is None else r.avg_icc for r in ok if r.cell.k == k]) for k in ks]
    err = [np.mean([r.avg_mae for r in ok if r.cell.k == k]) for k in ks]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(ks, icc, marker="o", label="ICC")
        ax.plot(ks, err, marker="s", label="MAE")
        ax.set_xlabel("nearest neighbours k")
        ax.legend()
        _save(fig, path)
    return True


def pattern_weights(rows: Sequence[tuple[int, int, float]], path) -> None:
    channels = max(r[0] for r in rows) + 1
    maps = max(r[1] for r in rows) + 1
    w = np.zeros((channels, maps))
    for j, i, v in rows:
        w[j, i] = v
    lim = np.abs(w).max() or 1.0
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3 + 0.3 * maps, 2 + 0.12 * channels))
        im = ax.imshow(w, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
        ax.set_xlabel("output map")
        ax.set_ylabel("feature channel")
        fig.colorbar(im, ax=ax, shrink=0.8)
        _save(fig, path)


def map_grid(maps: np.ndarray, path, titles: Sequence[str] | None = None, cols: int = 8) -> None:
    n = len(maps)
    cols = min(cols, n)
    rows = -(-n // cols)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.5 * rows), squeeze=False)
        for a in axes.flat:
            a.axis("off")
        for i, m in enumerate(maps):
            a = axes.flat[i]
            a.imshow(m, cmap="magma")
            if titles:
                a.set_title(titles[i], fontsize=7)
        _save(fig, path)
