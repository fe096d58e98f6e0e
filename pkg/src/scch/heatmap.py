"""Gaussian heatmap targets for AU intensity and their decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, mse, save_tensor

EPSILON_ZERO = 1e-3
DEFAULT_SIGMA = 1.5
MAX_INTENSITY = 5


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class AUAnnotation:
    au_id: int
    locations: tuple[tuple[float, float], ...]  # (x, y) = (column, row) in heatmap pixels
    intensity: int

    def __post_init__(self):
        object.__setattr__(self, "locations", tuple((float(x), float(y)) for x, y in self.locations))
        if not 1 <= len(self.locations) <= 2:
            raise AnnotationError(f"AU {self.au_id}: expected 1 or 2 locations, got {len(self.locations)}")
        if self.intensity not in range(MAX_INTENSITY + 1):
            raise AnnotationError(f"AU {self.au_id}: intensity {self.intensity} outside 0..5")


@dataclass
class HeatmapSet:
    maps: np.ndarray  # (N, H, W)
    sigma: float
    location_index: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_maps(self) -> int:
        return self.maps.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass
class DecodedAU:
    au_id: int
    intensity: float
    locations: list[tuple[int, int]]


def location_index_for(annotations: Sequence[AUAnnotation]) -> dict[int, list[int]]:
    index: dict[int, list[int]] = {}
    nxt = 0
    for ann in annotations:
        index.setdefault(ann.au_id, []).extend(range(nxt, nxt + len(ann.locations)))
        nxt += len(ann.locations)
    return index


def gaussian_map(x0: float, y0: float, intensity: float, sigma: float, height: int, width: int) -> np.ndarray:
    """One target map: intensity / (2 pi sigma^2) * exp(-|x - x0|^2 / (2 sigma^2))."""
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    d2 = (xs - x0) ** 2 + (ys - y0) ** 2
    return intensity / (2 * math.pi * sigma**2) * np.exp(-d2 / (2 * sigma**2))


def encode(annotations: Sequence[AUAnnotation], sigma: float = DEFAULT_SIGMA, height: int = 64, width: int = 64) -> HeatmapSet:
    """Render one map per (AU, location) pair, in annotation order."""
    if sigma <= 0:
        raise AnnotationError(f"sigma must be positive, got {sigma}")
    n = sum(len(a.locations) for a in annotations)
    maps = np.zeros((n, height, width), dtype=np.float32)
    i = 0
    for ann in annotations:
        for x, y in ann.locations:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise AnnotationError(
                    f"AU {ann.au_id}: location ({x}, {y}) outside {width}x{height} heatmap"
                )
            if ann.intensity > 0:
                maps[i] = gaussian_map(x, y, ann.intensity, sigma, height, width)
            i += 1
    return HeatmapSet(maps, float(sigma), location_index_for(annotations))


def peaks(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Peak value and (x, y) argmax per map over the trailing two axes.

    Ties resolve to the lowest row-major index (numpy argmax semantics).
    """
    flat = maps.reshape(*maps.shape[:-2], -1)
    idx = np.argmax(flat, axis=-1)
    val = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    ys, xs = np.divmod(idx, maps.shape[-1])
    return val, xs, ys


def calibration(sigma: float) -> float:
    return 2 * math.pi * sigma**2


def decode(heatmaps: HeatmapSet, calibrate: bool = True, epsilon_zero: float = EPSILON_ZERO) -> list[DecodedAU]:
    """Per-AU intensity (mean of calibrated peaks) and argmax locations."""
    val, xs, ys = peaks(np.asarray(heatmaps.maps, dtype=np.float64))
    factor = calibration(heatmaps.sigma) if calibrate else 1.0
    out = []
    for au_id, idxs in heatmaps.location_index.items():
        intensity = float(np.mean([val[i] * factor for i in idxs]))
        locs = [] if intensity < epsilon_zero else [(int(xs[i]), int(ys[i])) for i in idxs]
        out.append(DecodedAU(au_id, intensity, locs))
    return out


def decode_intensities(maps: np.ndarray, location_index: dict[int, list[int]], sigma: float, calibrate: bool = True) -> np.ndarray:
    """Vectorised intensity readout for a batch of maps (B, N, H, W) -> (B, A)."""
    val, _, _ = peaks(np.asarray(maps, dtype=np.float64))
    factor = calibration(sigma) if calibrate else 1.0
    cols = [val[:, idxs].mean(axis=1) * factor for idxs in location_index.values()]
    return np.stack(cols, axis=1)


def heatmap_loss(pred: Tensor | HeatmapSet, truth: Tensor | HeatmapSet) -> Tensor:
    """Squared L2 distance summed over maps and pixels; differentiable in ``pred``."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred.maps)
    t = truth if isinstance(truth, Tensor) else Tensor(truth.maps)
    if p.shape != t.shape:
        raise ShapeError(f"heatmap_loss: prediction {p.shape} vs truth {t.shape}")
    return mse(p, t)


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """8-bit binary PGM with the map maximum scaled to 255; negatives clip to 0."""
    img = np.asarray(image, dtype=np.float64)
    top = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape) if top <= 0 else np.clip(img, 0, None) / top * 255.0
    pix = np.rint(scaled).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def dump_heatmaps(heatmaps: HeatmapSet, out_dir, stem: str = "heatmaps") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.tnsr"]
    save_tensor(paths[0], heatmaps.maps)
    for i, m in enumerate(heatmaps.maps):
        p = out / f"{stem}_{i:02d}.pgm"
        p.write_bytes(to_pgm_bytes(m))
        paths.append(p)
    return paths
