"""Encoder / deconvolution heatmap network with SCC after every deconv."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .heatmap import HeatmapSet, dump_heatmaps, to_pgm_bytes
from .scc import MODES, VARIANTS, FeatureGraph, SCCLayerParams, init_scc_params, scc_forward
from .tensor import (
    Parameter,
    Tensor,
    conv2d,
    deconv2d,
    no_grad,
    read_tensor,
    relu,
    reshape,
    save_tensor,
    transpose,
    write_tensor,
)

CHECKPOINT_MAGIC = b"SCCH1\n"
KERNEL = 4  # stride-2, pad-1 kernels halve / double the extent exactly


@dataclass
class ModelConfig:
    input_size: int = 64
    input_channels: int = 1
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    deconv_layers: int = 3
    deconv_channels: int = 32
    scc_enabled: bool = True
    scc_mode: str = "auto"  # dense | pointwise | auto (dense while L <= dense_max_length)
    dense_max_length: int = 256
    scc_k: int = 5
    edge_variant: str = "both"
    num_maps: int = 8
    sigma: float = 1.5
    calibrate_peaks: bool = True
    au_maps: str = ""  # "au:map,map;au:map" -- empty means one map per AU
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.validate()

    @property
    def bottleneck_size(self) -> int:
        return self.input_size >> len(self.encoder_channels)

    @property
    def heatmap_size(self) -> int:
        return self.bottleneck_size << self.deconv_layers

    @property
    def location_index(self) -> dict[int, list[int]]:
        if not self.au_maps:
            return {i: [i] for i in range(self.num_maps)}
        index = {}
        for item in self.au_maps.split(";"):
            au, maps = item.split(":")
            index[int(au)] = [int(m) for m in maps.split(",")]
        return index

    def level_modes(self) -> list[str]:
        modes = []
        for level in range(1, self.deconv_layers + 1):
            length = (self.bottleneck_size << level) ** 2
            if self.scc_mode == "auto":
                modes.append("dense" if length <= self.dense_max_length else "pointwise")
            else:
                modes.append(self.scc_mode)
        return modes

    def validate(self) -> None:
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        down = 1 << len(self.encoder_channels)
        if self.input_size % down or self.input_size < down:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{len(self.encoder_channels)}"
            )
        if self.deconv_layers not in (2, 3):
            raise ConfigError(f"deconv_layers must be 2 or 3, got {self.deconv_layers}")
        hm = self.heatmap_size
        if hm > self.input_size or self.input_size % hm:
            raise ConfigError(f"heatmap size {hm} must divide input size {self.input_size}")
        if self.scc_mode not in (*MODES, "auto"):
            raise ConfigError(f"unknown scc_mode {self.scc_mode!r}")
        if self.edge_variant not in VARIANTS:
            raise ConfigError(f"unknown edge_variant {self.edge_variant!r}")
        if self.scc_enabled and not 1 <= self.scc_k < self.deconv_channels:
            raise ConfigError(f"scc_k={self.scc_k} must lie in [1, deconv_channels)")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        idx = self.location_index
        used = sorted(m for maps in idx.values() for m in maps)
        if used != list(range(self.num_maps)):
            raise ConfigError(f"au_maps {self.au_maps!r} must cover maps 0..{self.num_maps - 1} once each")


def encode_location_index(index: dict[int, list[int]]) -> str:
    return ";".join(f"{au}:{','.join(str(m) for m in maps)}" for au, maps in index.items())


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # variance 2 / fan_in keeps ReLU activations at a stable scale through depth
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class HeatmapNet:
    """Strided-conv encoder, ``deconv_layers`` upsampling blocks, 1x1 projection.

    Every deconv block is ReLU(deconv) optionally followed by an SCC layer with
    its own parameters. ``last_graphs[level][sample]`` holds the graphs built
    by the most recent forward pass.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.scc: list[SCCLayerParams] = []
        self.last_graphs: list[list[FeatureGraph]] = []
        self.last_features: Tensor | None = None
        rng = np.random.default_rng(config.seed)
        k2 = KERNEL * KERNEL

        cin = config.input_channels
        for i, cout in enumerate(config.encoder_channels):
            self._add(f"enc{i}.w", _he(rng, (cout, cin, KERNEL, KERNEL), cin * k2), dtype)
            self._add(f"enc{i}.b", np.zeros(cout), dtype)
            cin = cout
        c = config.deconv_channels
        modes = config.level_modes()
        for i in range(config.deconv_layers):
            # a stride-2 transposed conv feeds each output pixel from k2 / 4 taps per channel
            self._add(f"dec{i}.w", _he(rng, (cin, c, KERNEL, KERNEL), cin * k2 // 4), dtype)
            self._add(f"dec{i}.b", np.zeros(c), dtype)
            cin = c
            if config.scc_enabled:
                length = (config.bottleneck_size << (i + 1)) ** 2
                p = init_scc_params(length, modes[i], config.scc_k, config.edge_variant, rng, name=f"scc{i}")
                p.phi = self._add(p.phi.name, p.phi.data, dtype)
                p.omega = self._add(p.omega.name, p.omega.data, dtype)
                self.scc.append(p)
        # zero projection: predictions start at the empty heatmap and the
        # first updates shape the projection before they reach the features
        self._add("proj.w", np.zeros((c, config.num_maps)), dtype)
        self._add("proj.b", np.zeros(config.num_maps), dtype)

    def _add(self, name: str, data, dtype) -> Parameter:
        p = Parameter(np.asarray(data, dtype=dtype), name=name, dtype=dtype)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, images: Tensor, graphs: Sequence[Sequence[FeatureGraph]] | None = None) -> Tensor:
        """(B, C_in, H, W) images -> (B, N, hm, hm) heatmaps.

        ``graphs`` (one list per SCC level) freezes neighbour selection.
        """
        cfg = self.config
        expect = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ConfigError(f"expected images of shape (B, {expect}), got {images.shape}")
        x = images
        for i in range(len(cfg.encoder_channels)):
            x = relu(conv2d(x, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"], stride=2, pad=1))
        self.last_graphs = []
        for i in range(cfg.deconv_layers):
            x = relu(deconv2d(x, self.params[f"dec{i}.w"], self.params[f"dec{i}.b"], stride=2, pad=1))
            if cfg.scc_enabled:
                x, g = scc_forward(x, self.scc[i], None if graphs is None else graphs[i])
                self.last_graphs.append(g)
        self.last_features = x
        w = self.params["proj.w"]
        kernel = reshape(transpose(w), (cfg.num_maps, cfg.deconv_channels, 1, 1))
        return conv2d(x, kernel, self.params["proj.b"])

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        with no_grad():
            for s in range(0, len(images), batch_size):
                outs.append(self.forward(Tensor(images[s : s + batch_size])).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.config.num_maps, 0, 0), np.float32)

    def heatmap_set(self, maps: np.ndarray) -> HeatmapSet:
        return HeatmapSet(np.asarray(maps), self.config.sigma, self.config.location_index)

    # -- inspection -------------------------------------------------------

    def pattern_weights(self) -> list[tuple[int, int, float]]:
        """Rows (channel j, map i, w_ji) of the final 1x1 projection, by channel."""
        w = self.params["proj.w"].data
        return [(j, i, float(w[j, i])) for j in range(w.shape[0]) for i in range(w.shape[1])]

    def channel_responses(self, image: np.ndarray) -> np.ndarray:
        """Last-stage feature maps (C, hm, hm) for a single (C_in, H, W) image."""
        with no_grad():
            self.forward(Tensor(np.asarray(image)[None]))
        return self.last_features.data[0]


def dump_pattern_weights(model: HeatmapNet, path=None) -> list[tuple[int, int, float]]:
    rows = model.pattern_weights()
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "map", "weight"])
            for j, i, v in rows:
                w.writerow([j, i, repr(v)])
    return rows


def dump_channel_response(model: HeatmapNet, image: np.ndarray, out_dir) -> np.ndarray:
    resp = model.channel_responses(image)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "responses.tnsr", resp)
    for j, m in enumerate(resp):
        (out / f"response_{j:02d}.pgm").write_bytes(to_pgm_bytes(m))
    return resp


def dump_predicted_heatmaps(model: HeatmapNet, image: np.ndarray, out_dir) -> HeatmapSet:
    maps = model.predict(np.asarray(image)[None])[0]
    hs = model.heatmap_set(maps)
    dump_heatmaps(hs, out_dir, "pred")
    return hs


# ---------------------------------------------------------------------------
# checkpoints: b"SCCH1\n", key=value header, blank line, then per parameter
# u32 name length, utf-8 name, TNSR block.


def save_checkpoint(model: HeatmapNet, path, extra: dict[str, str] | None = None) -> None:
    header = ["# scch checkpoint", *cfgmod.to_lines(model.config)]
    for k, v in (extra or {}).items():
        header.append(f"# {k}={v}")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(("\n".join(header) + "\n\n").encode("utf-8"))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, p)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> HeatmapNet:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an SCCH1 checkpoint")
    end = data.index(b"\n\n", len(CHECKPOINT_MAGIC))
    header = data[len(CHECKPOINT_MAGIC) : end].decode("utf-8")
    config = cfgmod.from_kv(ModelConfig, cfgmod.parse_kv(header, str(path)))
    model = HeatmapNet(config)
    fh = io.BytesIO(data[end + 2 :])
    seen = set()
    while True:
        head = fh.read(4)
        if not head:
            break
        (n,) = struct.unpack("<I", head)
        name = fh.read(n).decode("utf-8")
        t = read_tensor(fh)
        if name not in model.params:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        p = model.params[name]
        if p.shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {t.shape}, model expects {p.shape}")
        p.data = t.data.copy()
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return model


def with_overrides(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
