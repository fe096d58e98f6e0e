"""ICC(3,1) and MAE for AU intensity predictions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


def _pair(labels, predictions, min_n: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size < min_n:
        raise ValueError(f"need at least {min_n} targets, got {y.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(p))):
        raise ValueError("labels and predictions must be finite")
    return y, p


def icc31(labels: Sequence[float], predictions: Sequence[float]) -> float | None:
    """Two-way mixed, single-measure consistency ICC with two judges.

    Returns ``None`` when the table has no variance at all (BMS + EMS == 0).
    """
    y, p = _pair(labels, predictions, 2)
    table = np.stack([y, p], axis=1)
    n, k = table.shape
    grand = table.mean()
    ss_total = np.sum((table - grand) ** 2)
    ss_rows = k * np.sum((table.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((table.mean(axis=0) - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if denom <= 1e-12 * max(1.0, ss_total):
        return None
    return float(np.clip((bms - ems) / denom, -1.0, 1.0))


def mae(labels: Sequence[float], predictions: Sequence[float]) -> float:
    y, p = _pair(labels, predictions, 1)
    return float(np.mean(np.abs(y - p)))


@dataclass
class AUScore:
    au_id: str
    icc: float | None
    mae: float
    n: int

    def record(self) -> dict:
        return {
            "au": self.au_id,
            "icc": self.icc,
            "icc_defined": self.icc is not None,
            "mae": self.mae,
            "n": self.n,
        }


def score_table(labels: np.ndarray, predictions: np.ndarray, au_ids: Sequence[int]) -> list[AUScore]:
    """Per-AU scores plus an unweighted ``avg`` row (undefined ICCs are skipped)."""
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if labels.shape != predictions.shape or labels.ndim != 2:
        raise ValueError(f"expected matching (samples, AUs) tables, got {labels.shape} / {predictions.shape}")
    if labels.shape[0] == 0:
        raise ValueError("cannot evaluate an empty dataset")
    rows = [
        AUScore(str(au), icc31(labels[:, j], predictions[:, j]), mae(labels[:, j], predictions[:, j]), labels.shape[0])
        for j, au in enumerate(au_ids)
    ]
    defined = [r.icc for r in rows if r.icc is not None]
    avg_icc = float(np.mean(defined)) if defined else None
    rows.append(AUScore("avg", avg_icc, float(np.mean([r.mae for r in rows])), labels.shape[0]))
    return rows


def average(rows: Sequence[AUScore]) -> AUScore:
    return next(r for r in rows if r.au_id == "avg")


def evaluate(model, dataset, batch_size: int = 64) -> list[AUScore]:
    """Decode model heatmaps on ``dataset`` and score them against its labels."""
    from .heatmap import decode_intensities

    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    maps = model.predict(dataset.images, batch_size=batch_size)
    cfg = model.config
    preds = decode_intensities(maps, cfg.location_index, cfg.sigma, cfg.calibrate_peaks)
    return score_table(dataset.labels, preds, dataset.au_ids)


def write_report(rows: Sequence[AUScore], stem) -> tuple[Path, Path]:
    """JSON-lines report plus a CSV mirror: ``stem.jsonl`` and ``stem.csv``."""
    stem = Path(stem)
    jl, cs = stem.with_suffix(".jsonl"), stem.with_suffix(".csv")
    with open(jl, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")
    with open(cs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["au", "icc", "icc_defined", "mae", "n"])
        for r in rows:
            w.writerow([r.au_id, "" if r.icc is None else repr(r.icc), r.icc is not None, repr(r.mae), r.n])
    return jl, cs


def format_icc(value: float | None) -> str:
    return "undef" if value is None or math.isnan(value) else f"{value:.3f}"
