"""Adam training loop, loss curves and the ablation harness."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError
from .heatmap import heatmap_loss
from .metrics import average, evaluate
from .network import HeatmapNet, ModelConfig, save_checkpoint
from .tensor import Parameter, Tensor, no_grad, scale

log = logging.getLogger(__name__)

EDGE_VARIANTS = ("both", "concat_raw", "local_only")
CURVE_HEADER = ["epoch", "train_loss", "eval_icc_avg", "eval_mae_avg"]


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    eval_every: int = 1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.eval_every < 0 or self.patience < 1:
            raise ConfigError("epochs and eval_every must be >= 0, patience >= 1")


class Adam:
    """Bias-corrected Adam over :class:`Parameter` moment buffers."""

    def __init__(self, params: Sequence[Parameter], lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self) -> None:
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            p.step += 1
            g = g.astype(p.data.dtype, copy=False)
            p.m *= self.beta1
            p.m += (1 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1 - self.beta2) * (g * g)
            if self.lr == 0:
                continue
            m_hat = p.m / (1 - self.beta1**p.step)
            v_hat = p.v / (1 - self.beta2**p.step)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.curve[-1]["train_loss"] if self.curve else float("nan")


def batch_loss(model: HeatmapNet, images: np.ndarray, targets: np.ndarray) -> Tensor:
    """Batch-mean of the per-sample summed squared heatmap error."""
    pred = model(Tensor(images))
    return scale(heatmap_loss(pred, Tensor(targets)), 1.0 / len(images))


def train(
    model: HeatmapNet,
    dataset,
    config: TrainConfig,
    eval_data=None,
    out_dir=None,
    progress=None,
) -> TrainResult:
    """Minimise batch-mean heatmap loss with Adam.

    Shuffling uses a generator seeded from ``config.seed`` so runs repeat
    exactly. With ``eval_data`` the model is scored every ``eval_every``
    epochs and training stops after ``patience`` evaluations without an
    improvement in average ICC.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    mc = model.config
    if dataset.roster.num_maps != mc.num_maps or dataset.roster.image_size != mc.input_size:
        raise ConfigError(
            f"dataset has {dataset.roster.num_maps} maps at {dataset.roster.image_size}px, "
            f"model expects {mc.num_maps} at {mc.input_size}px"
        )
    targets = dataset.targets(mc.heatmap_size, mc.sigma)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    best, stale = -math.inf, 0
    start = time.perf_counter()
    n = len(dataset)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = np.sort(order[s : s + config.batch_size])
            opt.zero_grad()
            loss = batch_loss(model, dataset.images[idx], targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            loss.backward()
            opt.step()
            result.steps += 1
            total += value * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": total / seen, "eval_icc_avg": None, "eval_mae_avg": None}
        if eval_data is not None and config.eval_every and epoch % config.eval_every == 0:
            avg = average(evaluate(model, eval_data))
            row["eval_icc_avg"], row["eval_mae_avg"] = avg.icc, avg.mae
            score = avg.icc if avg.icc is not None else -math.inf
            if score > best + 1e-4:
                best, stale = score, 0
            else:
                stale += 1
        result.curve.append(row)
        log.info("epoch %d loss %.6g icc %s mae %s", epoch, row["train_loss"], row["eval_icc_avg"], row["eval_mae_avg"])
        if progress:
            progress(row)
        if stale >= config.patience:
            result.stopped_early = True
            break

    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_curve(result.curve, out / "loss_curve.csv")
        save_checkpoint(model, out / "model.scch")
    return result


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_curve(curve: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for row in curve:
            w.writerow([row["epoch"], _fmt(row["train_loss"]), _fmt(row["eval_icc_avg"]), _fmt(row["eval_mae_avg"])])


# ---------------------------------------------------------------------------
# ablation grid

GRID_AXES = ("scc", "deconv_layers", "edge_variant", "k", "seed")
GRID_DEFAULTS = {"scc": ("on",), "deconv_layers": (3,), "edge_variant": ("both",), "k": (5,), "seed": (0,)}


@dataclass
class AblationCell:
    scc: bool
    deconv_layers: int
    edge_variant: str
    k: int
    seed: int

    def key(self, drop: str) -> tuple:
        return tuple(v for a, v in zip(GRID_AXES, self.values()) if a != drop)

    def values(self) -> tuple:
        return (self.scc, self.deconv_layers, self.edge_variant, self.k, self.seed)


def parse_grid(values: dict[str, str]) -> tuple[list[AblationCell], dict[str, str]]:
    """Split grid axes (comma lists) from pass-through training/model settings."""
    axes = {a: GRID_DEFAULTS[a] for a in GRID_AXES}
    rest = {}
    for key, text in values.items():
        if key in GRID_AXES:
            axes[key] = tuple(t.strip() for t in text.split(",") if t.strip())
        else:
            rest[key] = text
    try:
        scc = [str(v).lower() in ("on", "true", "1", "yes") for v in axes["scc"]]
        dls = [int(v) for v in axes["deconv_layers"]]
        ks = [int(v) for v in axes["k"]]
        seeds = [int(v) for v in axes["seed"]]
    except ValueError as exc:
        raise ConfigError(f"bad grid value: {exc}") from None
    variants = [str(v) for v in axes["edge_variant"]]
    for v in variants:
        if v not in EDGE_VARIANTS:
            raise ConfigError(f"unknown edge_variant {v!r}")
    cells = [AblationCell(*c) for c in itertools.product(scc, dls, variants, ks, seeds)]
    return cells, rest


@dataclass
class CellResult:
    cell: AblationCell
    status: str
    avg_icc: float | None = None
    avg_mae: float | None = None
    final_loss: float | None = None
    seconds: float = 0.0
    error: str = ""


def run_cell(cell: AblationCell, train_data, test_data, base_model: ModelConfig, base_train: TrainConfig) -> CellResult:
    start = time.perf_counter()
    try:
        mc = replace(
            base_model,
            scc_enabled=cell.scc,
            deconv_layers=cell.deconv_layers,
            edge_variant=cell.edge_variant,
            scc_k=cell.k,
            seed=cell.seed,
        )
        tc = replace(base_train, seed=cell.seed)
        model = HeatmapNet(mc)
        res = train(model, train_data, tc)
        avg = average(evaluate(model, test_data))
        return CellResult(cell, "ok", avg.icc, avg.mae, res.final_loss, time.perf_counter() - start)
    except Exception as exc:  # a failing cell must not abort the grid
        log.warning("ablation cell %s failed: %s", cell, exc)
        return CellResult(cell, "failed", seconds=time.perf_counter() - start, error=f"{type(exc).__name__}: {exc}")


def run_ablation(
    train_data,
    test_data,
    cells: Sequence[AblationCell],
    base_model: ModelConfig,
    base_train: TrainConfig,
    workers: int | None = None,
) -> list[CellResult]:
    """Train and evaluate every grid cell; cells in the same seed share init and shuffles."""
    workers = workers or int(os.environ.get("SCCH_THREADS", "1"))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(run_cell, c, train_data, test_data, base_model, base_train) for c in cells]
            return [f.result() for f in futs]
    return [run_cell(c, train_data, test_data, base_model, base_train) for c in cells]


def ablation_deltas(results: Sequence[CellResult]) -> list[dict]:
    """Pairwise differences: SCC on - off, DL 3 - 2, each edge variant - ``both``."""
    ok = [r for r in results if r.status == "ok"]
    out = []

    def pairs(axis: str, better, worse):
        i = GRID_AXES.index(axis)
        lookup = {(r.cell.key(axis), r.cell.values()[i]): r for r in ok}
        for r in ok:
            if r.cell.values()[i] != better:
                continue
            other = lookup.get((r.cell.key(axis), worse))
            if other is None:
                continue
            out.append(
                {
                    "comparison": f"{axis}:{better}-{worse}",
                    "context": "/".join(f"{a}={v}" for a, v in zip(GRID_AXES, r.cell.values()) if a != axis),
                    "delta_icc": None if r.avg_icc is None or other.avg_icc is None else r.avg_icc - other.avg_icc,
                    "delta_mae": r.avg_mae - other.avg_mae,
                }
            )

    pairs("scc", True, False)
    pairs("deconv_layers", 3, 2)
    for v in ("concat_raw", "local_only"):
        pairs("edge_variant", "both", v)
    return out


def write_ablation(results: Sequence[CellResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*GRID_AXES, "status", "avg_icc", "avg_mae", "final_loss", "seconds", "error"])
        for r in results:
            c = r.cell
            w.writerow(
                [
                    "on" if c.scc else "off",
                    c.deconv_layers,
                    c.edge_variant,
                    c.k,
                    c.seed,
                    r.status,
                    _fmt(r.avg_icc),
                    _fmt(r.avg_mae),
                    _fmt(r.final_loss),
                    f"{r.seconds:.2f}",
                    r.error,
                ]
            )


def write_deltas(deltas: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "context", "delta_icc", "delta_mae"])
        for d in deltas:
            w.writerow([d["comparison"], d["context"], _fmt(d["delta_icc"]), _fmt(d["delta_mae"])])


def predict_intensities(model: HeatmapNet, images: np.ndarray) -> np.ndarray:
    from .heatmap import decode_intensities

    cfg = model.config
    with no_grad():
        maps = model.predict(images)
    return decode_intensities(maps, cfg.location_index, cfg.sigma, cfg.calibrate_peaks)
