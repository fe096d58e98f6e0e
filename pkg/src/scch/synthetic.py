"""Procedural face-like images with coupled, imbalanced AU intensities.

A fixed template face (ellipse plus eyes, nose and mouth) is shifted by a
small random offset; every AU adds a blob or ridge whose amplitude is
proportional to its intensity. Intensities follow a decaying six-level
marginal, then a single coupling pass lets a high-intensity AU switch on its
partners.
"""

from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, format_value, parse_kv
from .heatmap import AUAnnotation

TEMPLATE_SIZE = 64
BASE_LEVELS = (0.55, 0.20, 0.12, 0.07, 0.04, 0.02)
SPLIT_TAGS = {"train": 1, "test": 2}


class RosterError(ConfigError):
    pass


@dataclass(frozen=True)
class SyntheticAUSpec:
    au_id: int
    locations: tuple[tuple[int, int], ...]  # template coordinates (x, y) on a 64x64 face
    appearance: str = "blob"  # blob | ridge
    couplings: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class Roster:
    aus: tuple[SyntheticAUSpec, ...]
    levels: tuple[float, ...] = BASE_LEVELS
    image_size: int = 64
    noise_std: float = 0.02
    contrast: float = 0.4
    jitter: int = 2

    def __post_init__(self):
        self.validate()

    @property
    def au_ids(self) -> list[int]:
        return [a.au_id for a in self.aus]

    @property
    def num_maps(self) -> int:
        return sum(len(a.locations) for a in self.aus)

    def location_index(self) -> dict[int, list[int]]:
        index, nxt = {}, 0
        for a in self.aus:
            index[a.au_id] = list(range(nxt, nxt + len(a.locations)))
            nxt += len(a.locations)
        return index

    def validate(self) -> None:
        ids = self.au_ids
        if not ids:
            raise RosterError("roster has no AUs")
        if len(set(ids)) != len(ids):
            raise RosterError(f"duplicate AU ids in {ids}")
        if len(self.levels) != 6 or any(p < 0 for p in self.levels) or not np.isclose(sum(self.levels), 1.0):
            raise RosterError(f"levels must be six probabilities summing to 1, got {self.levels}")
        if self.image_size < 32:
            raise RosterError(f"image_size must be >= 32, got {self.image_size}")
        if self.noise_std < 0 or self.contrast <= 0 or self.jitter < 0:
            raise RosterError("noise_std, jitter must be >= 0 and contrast > 0")
        for a in self.aus:
            if not 1 <= len(a.locations) <= 2:
                raise RosterError(f"AU {a.au_id}: needs 1 or 2 locations")
            if a.appearance not in ("blob", "ridge"):
                raise RosterError(f"AU {a.au_id}: unknown appearance {a.appearance!r}")
            for x, y in a.locations:
                lim = TEMPLATE_SIZE - 1 - self.jitter
                if not (self.jitter <= x <= lim and self.jitter <= y <= lim):
                    raise RosterError(f"AU {a.au_id}: location ({x}, {y}) too close to the border")
            for other, strength in a.couplings:
                if other == a.au_id:
                    raise RosterError(f"AU {a.au_id}: self-coupling")
                if other not in ids:
                    raise RosterError(f"AU {a.au_id}: coupled to unknown AU {other}")
                if not 0.0 <= strength <= 1.0:
                    raise RosterError(f"AU {a.au_id}: coupling strength {strength} outside [0, 1]")


def default_roster() -> Roster:
    """Six AUs; 1 and 3 are bilateral, 3<->1 couple strongly, 0->5 weakly."""
    return Roster(
        (
            SyntheticAUSpec(0, ((32, 12),), "ridge", ((5, 0.3),)),
            SyntheticAUSpec(1, ((18, 36), (46, 36)), "blob", ((3, 0.8),)),
            SyntheticAUSpec(2, ((32, 30),), "blob"),
            SyntheticAUSpec(3, ((22, 48), (42, 48)), "blob", ((1, 0.8),)),
            SyntheticAUSpec(4, ((32, 58),), "ridge"),
            SyntheticAUSpec(5, ((32, 40),), "blob"),
        )
    )


# ---------------------------------------------------------------------------
# roster text format


def format_roster(roster: Roster) -> str:
    lines = [
        f"image_size={roster.image_size}",
        f"noise_std={format_value(float(roster.noise_std))}",
        f"contrast={format_value(float(roster.contrast))}",
        f"jitter={roster.jitter}",
        f"levels={format_value(tuple(float(p) for p in roster.levels))}",
    ]
    for a in roster.aus:
        locs = " ".join(f"{x},{y}" for x, y in a.locations)
        lines.append(f"au={a.au_id} {a.appearance} {locs}")
    for a in roster.aus:
        for other, strength in a.couplings:
            lines.append(f"couple={a.au_id} {other} {format_value(float(strength))}")
    return "\n".join(lines) + "\n"


def parse_roster(text: str, source: str = "<roster>") -> Roster:
    """Parse ``key=value`` lines; ``au=`` and ``couple=`` may repeat."""
    settings: dict[str, str] = {}
    aus: list[tuple[int, str, tuple]] = []
    couples: list[tuple[int, int, float]] = []
    try:
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            parts = value.split()
            if key == "au":
                locs = tuple(tuple(int(v) for v in p.split(",")) for p in parts[2:])
                if any(len(p) != 2 for p in locs):
                    raise RosterError(f"{source}:{lineno}: locations must be x,y pairs")
                aus.append((int(parts[0]), parts[1], locs))
            elif key == "couple":
                couples.append((int(parts[0]), int(parts[1]), float(parts[2])))
            else:
                settings.update(parse_kv(line, f"{source}:{lineno}"))
    except (IndexError, ValueError) as exc:
        if isinstance(exc, RosterError):
            raise
        raise RosterError(f"{source}: {exc}") from None
    known = {"image_size", "noise_std", "contrast", "jitter", "levels"}
    unknown = set(settings) - known
    if unknown:
        raise RosterError(f"{source}: unknown keys {sorted(unknown)}")
    specs = []
    for au_id, kind, locs in aus:
        cpl = tuple((b, s) for a, b, s in couples if a == au_id)
        specs.append(SyntheticAUSpec(au_id, locs, kind, cpl))
    dangling = {a for a, _, _ in couples} - {s.au_id for s in specs}
    if dangling:
        raise RosterError(f"{source}: couplings from unknown AUs {sorted(dangling)}")
    try:
        kwargs = {}
        if "image_size" in settings:
            kwargs["image_size"] = int(settings["image_size"])
        if "noise_std" in settings:
            kwargs["noise_std"] = float(settings["noise_std"])
        if "contrast" in settings:
            kwargs["contrast"] = float(settings["contrast"])
        if "jitter" in settings:
            kwargs["jitter"] = int(settings["jitter"])
        if "levels" in settings:
            kwargs["levels"] = tuple(float(v) for v in settings["levels"].split(","))
    except ValueError as exc:
        raise RosterError(f"{source}: {exc}") from None
    return Roster(tuple(specs), **kwargs)


def roster_hash(roster: Roster) -> str:
    return hashlib.sha256(format_roster(roster).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# sampling


def sample_intensities(roster: Roster, rng: np.random.Generator) -> np.ndarray:
    """Base levels from the marginal, then one coupling pass on the base levels.

    If AU a starts at level >= 4, each partner b is raised to
    max(level_b, d) with probability ``strength``, where d is drawn from the
    marginal restricted to levels >= 2.
    """
    p = np.asarray(roster.levels, dtype=np.float64)
    base = rng.choice(6, size=len(roster.aus), p=p)
    levels = base.copy()
    high = p[2:] / p[2:].sum()
    pos = {a.au_id: i for i, a in enumerate(roster.aus)}
    for i, a in enumerate(roster.aus):
        if base[i] < 4:
            continue
        for other, strength in a.couplings:
            if rng.random() < strength:
                draw = 2 + rng.choice(4, p=high)
                j = pos[other]
                levels[j] = max(levels[j], draw)
    return levels.astype(np.int64)


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1], multiples of 1/255
    annotations: list[AUAnnotation]
    seed: int


def _template(size: int, dx: float, dy: float) -> np.ndarray:
    s = size / TEMPLATE_SIZE
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = (32 + dx) * s, (34 + dy) * s
    r = np.sqrt(((xs - cx) / (24 * s)) ** 2 + ((ys - cy) / (29 * s)) ** 2)
    img = 0.15 + 0.30 / (1 + np.exp((r - 1) * 12))

    def spot(x, y, sx, sy, amp):
        return amp * np.exp(-(((xs - (x + dx) * s) / (sx * s)) ** 2 + ((ys - (y + dy) * s) / (sy * s)) ** 2) / 2)

    img -= spot(22, 24, 3.0, 1.8, 0.18) + spot(42, 24, 3.0, 1.8, 0.18)  # eyes
    img -= spot(32, 52, 6.0, 1.0, 0.12)  # mouth
    img += spot(32, 33, 1.2, 4.0, 0.05)  # nose bridge
    return img


def _primitive(size: int, x: float, y: float, kind: str) -> np.ndarray:
    s = size / TEMPLATE_SIZE
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    sx, sy = (2.5, 2.5) if kind == "blob" else (5.0, 1.6)
    return np.exp(-(((xs - x) / (sx * s)) ** 2 + ((ys - y) / (sy * s)) ** 2) / 2)


def au_locations(roster: Roster, dx: int, dy: int) -> list[tuple[tuple[int, int], ...]]:
    s = roster.image_size / TEMPLATE_SIZE
    return [tuple((int(round((x + dx) * s)), int(round((y + dy) * s))) for x, y in a.locations) for a in roster.aus]


def render(intensities: Sequence[int], roster: Roster, rng: np.random.Generator, seed: int = 0, noise: bool = True, shift: tuple[int, int] | None = None) -> Sample:
    """Draw the template plus AU primitives; annotations are in image pixels."""
    size = roster.image_size
    if shift is None:
        steps = np.arange(-roster.jitter, roster.jitter + 1, 2) if roster.jitter else np.array([0])
        shift = (int(rng.choice(steps)), int(rng.choice(steps)))
    dx, dy = shift
    img = _template(size, dx, dy)
    anns = []
    for spec, locs, level in zip(roster.aus, au_locations(roster, dx, dy), intensities):
        amp = roster.contrast * int(level) / 5.0
        if amp > 0:
            for x, y in locs:
                img += amp * _primitive(size, x, y, spec.appearance)
        anns.append(AUAnnotation(spec.au_id, locs, int(level)))
    if noise and roster.noise_std > 0:
        img += rng.normal(0.0, roster.noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = (np.rint(img * 255) / 255).astype(np.float32)
    return Sample(img[None], anns, seed)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def sample_seed(dataset_seed: int, split: str, index: int) -> int:
    return (dataset_seed ^ _splitmix64((SPLIT_TAGS[split] << 40) | index)) & 0xFFFFFFFFFFFFFFFF


def generate_sample(roster: Roster, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    levels = sample_intensities(roster, rng)
    return render(levels, roster, rng, seed)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    roster: Roster
    images: np.ndarray  # (S, 1, H, W)
    annotations: list[list[AUAnnotation]]
    ids: list[str] = field(default_factory=list)
    _targets: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.annotations)

    @property
    def au_ids(self) -> list[int]:
        return self.roster.au_ids

    @property
    def labels(self) -> np.ndarray:
        return np.array([[a.intensity for a in anns] for anns in self.annotations], dtype=np.float64).reshape(len(self), len(self.au_ids))

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.roster, self.images[idx], [self.annotations[i] for i in idx], [self.ids[i] for i in idx] if self.ids else [])

    def targets(self, heatmap_size: int, sigma: float) -> np.ndarray:
        """Gaussian targets (S, N, hm, hm); locations rescaled from image pixels."""
        from .heatmap import encode

        key = (heatmap_size, float(sigma))
        if key not in self._targets:
            factor = heatmap_size / self.roster.image_size
            out = np.zeros((len(self), self.roster.num_maps, heatmap_size, heatmap_size), dtype=np.float32)
            for i, anns in enumerate(self.annotations):
                scaled = [AUAnnotation(a.au_id, tuple((x * factor, y * factor) for x, y in a.locations), a.intensity) for a in anns]
                out[i] = encode(scaled, sigma, heatmap_size, heatmap_size).maps
            self._targets[key] = out
        return self._targets[key]


def build_split(roster: Roster, n: int, seed: int, split: str, workers: int | None = None) -> Dataset:
    seeds = [sample_seed(seed, split, i) for i in range(n)]
    workers = workers or int(os.environ.get("SCCH_THREADS", "1"))
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(workers) as ex:
            samples = list(ex.map(lambda s: generate_sample(roster, s), seeds))
    else:
        samples = [generate_sample(roster, s) for s in seeds]
    size = roster.image_size
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, size, size), np.float32)
    return Dataset(roster, images, [s.annotations for s in samples], [f"{split}_{i:05d}" for i in range(n)])


def write_pgm(path, image: np.ndarray) -> None:
    pix = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM -> float32 (H, W) in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pix = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return (pix.reshape(h, w).astype(np.float64) / 255).astype(np.float32)


def generate_dataset(out_dir, n_train: int, n_test: int, roster: Roster | None = None, seed: int = 0, spec_source: str = "default") -> dict[str, str]:
    """Write ``images/*.pgm``, ``annotations.csv``, ``roster.txt`` and ``manifest.txt``."""
    roster = roster or default_roster()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    splits = {"train": build_split(roster, n_train, seed, "train"), "test": build_split(roster, n_test, seed, "test")}
    with open(out / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "au_id", "loc_x", "loc_y", "intensity"])
        for ds in splits.values():
            for image_id, img, anns in zip(ds.ids, ds.images, ds.annotations):
                write_pgm(out / "images" / f"{image_id}.pgm", img[0])
                for a in anns:
                    for x, y in a.locations:
                        w.writerow([image_id, a.au_id, int(x), int(y), a.intensity])
    (out / "roster.txt").write_text(format_roster(roster))
    manifest = {
        "n_train": str(n_train),
        "n_test": str(n_test),
        "seed": str(seed),
        "image_size": str(roster.image_size),
        "num_aus": str(len(roster.aus)),
        "num_maps": str(roster.num_maps),
        "spec_source": spec_source,
        "spec_hash": roster_hash(roster),
    }
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    return manifest


def load_dataset(data_dir) -> tuple[Dataset, Dataset]:
    """Read a directory written by :func:`generate_dataset` -> (train, test)."""
    root = Path(data_dir)
    manifest = parse_kv((root / "manifest.txt").read_text(), str(root / "manifest.txt"))
    roster = parse_roster((root / "roster.txt").read_text(), str(root / "roster.txt"))
    rows: dict[str, dict[int, list]] = {}
    with open(root / "annotations.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            entry = rows.setdefault(r["image_id"], {}).setdefault(int(r["au_id"]), [int(r["intensity"]), []])
            entry[1].append((int(r["loc_x"]), int(r["loc_y"])))
    out = []
    for split in ("train", "test"):
        n = int(manifest[f"n_{split}"])
        ids = [f"{split}_{i:05d}" for i in range(n)]
        size = roster.image_size
        images = np.zeros((n, 1, size, size), dtype=np.float32)
        anns = []
        for i, image_id in enumerate(ids):
            images[i, 0] = read_pgm(root / "images" / f"{image_id}.pgm")
            per = rows.get(image_id, {})
            anns.append([AUAnnotation(au, tuple(per[au][1]), per[au][0]) for au in roster.au_ids])
        out.append(Dataset(roster, images, anns, ids))
    return out[0], out[1]
