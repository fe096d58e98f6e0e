"""Central finite-difference checks for every differentiable op and the model.

Each check builds a scalar ``sum(op(...) * R)`` with a fixed random
projection ``R``, compares the tape gradient with
``(f(x + h) - f(x - h)) / 2h`` and reports the norm-wise relative error
``|g_tape - g_fd| / max(|g_tape|, |g_fd|)``. Op checks run in float32 with
``h = 1e-3``; inputs are re-drawn when they sit within reach of a ReLU or MAX
kink, where finite differences are not a valid oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .network import HeatmapNet, ModelConfig
from .scc import build_knn_graph, edge_conv, init_scc_params, max_aggregate, pairwise_sq_distances, pointwise_edge_max
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def compare_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float,
    rng: np.random.Generator,
    max_coords: int | None = None,
) -> float:
    """Relative error between tape and finite-difference gradients of ``sum(fn * R)``."""
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def value() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * proj))

    for t in inputs:
        t.grad = None
    T.sum_all(T.mul(out, Tensor(proj, dtype=out.data.dtype))).backward()
    analytic, numeric = [], []
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        grad = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(grad[i])
    return relative_error(analytic, numeric)


def _away_from_zero(rng, shape, margin=0.05, dtype=np.float32):
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)
    return Tensor(x.astype(dtype), requires_grad=True)


def _distinct_along(rng, shape, axis, gap=0.05, dtype=np.float32):
    """Random values whose entries along ``axis`` differ by at least ``gap``."""
    x = rng.standard_normal(shape)
    moved = np.moveaxis(x, axis, -1)
    order = np.argsort(moved, axis=-1)
    ranks = np.argsort(order, axis=-1)
    moved[...] = moved + ranks * gap
    return Tensor(x.astype(dtype), requires_grad=True)


def _edge_preactivations(F, nbr, params) -> np.ndarray:
    f = F.data.astype(np.float64)
    phi, om = params.phi.data.astype(np.float64), params.omega.data.astype(np.float64)
    cp, co, cn = {"both": (1, -1, 1), "concat_raw": (1, 0, 1), "local_only": (0, -1, 1)}[params.variant]
    cw = cp * phi + co * om
    if params.mode == "dense":
        return (f @ cw.T)[:, None, :] + cn * (f @ om.T)[nbr]
    return cw[None, None, :, None] * f[:, None, None, :] + cn * om[None, None, :, None] * f[nbr][:, :, None, :]


def _edge_case(rng, mode, variant, fused=False, dtype=np.float32, margin=0.01):
    n, length, k = (6, 9, 3) if mode == "dense" else (5, 4, 3)
    for _ in range(500):
        F = Tensor(rng.standard_normal((n, length)).astype(dtype), requires_grad=True)
        p = init_scc_params(length, mode, k, variant, rng, K=4 if mode == "dense" else 1)
        p.phi.data = rng.standard_normal(p.phi.shape).astype(dtype)
        p.omega.data = rng.standard_normal(p.omega.shape).astype(dtype)
        g = build_knn_graph(pairwise_sq_distances(F), k)
        pre = _edge_preactivations(F, g.neighbors, p)
        if fused:
            srt = np.sort(pre, axis=1)
            top, second = srt[:, -1], srt[:, -2]
            ok = np.all(np.abs(top) > margin) and np.all((top < 0) | (top - second > margin))
        else:
            ok = np.min(np.abs(pre)) > margin
        if ok:
            return F, g, p
    raise RuntimeError("could not draw a kink-free edge_conv instance")


def op_checks(seed: int = 0, h: float = 1e-3, tol: float = 1e-3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def run(name, fn, inputs):
        t0 = time.perf_counter()
        err = compare_gradients(fn, inputs, h, rng)
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))

    def rand(*shape):
        return Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)

    run("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1), [rand(1, 2, 4, 4), rand(2, 2, 3, 3), rand(2)])
    run("conv2d_stride2", lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), [rand(1, 2, 4, 4), rand(3, 2, 4, 4), rand(3)])
    run("deconv2d", lambda x, w, b: T.deconv2d(x, w, b, stride=2, pad=1), [rand(1, 2, 3, 3), rand(2, 2, 4, 4), rand(2)])
    run("relu", T.relu, [_away_from_zero(rng, (4, 8))])
    run("add", T.add, [rand(3, 5), rand(3, 5)])
    run("sub", T.sub, [rand(3, 5), rand(3, 5)])
    run("mul", T.mul, [rand(3, 5), rand(3, 5)])
    run("scale", lambda a: T.scale(a, 1.7), [rand(12)])
    run("matmul", T.matmul, [rand(3, 4), rand(4, 5)])
    run("reshape", lambda a: T.reshape(a, (6, 4)), [rand(2, 3, 4)])
    run("transpose", lambda a: T.transpose(a, (2, 0, 1)), [rand(2, 3, 4)])
    run("reduce_max", lambda a: T.reduce_max(a, axis=1), [_distinct_along(rng, (4, 5, 3), 1)])
    run("sum_all", T.sum_all, [rand(4, 6)])
    run("mse", T.mse, [rand(4, 6), rand(4, 6)])
    run("max_aggregate", max_aggregate, [_distinct_along(rng, (6, 3, 4), 1)])
    for mode in ("dense", "pointwise"):
        for variant in ("both", "concat_raw", "local_only"):
            F, g, p = _edge_case(rng, mode, variant)
            run(f"edge_conv_{mode}_{variant}", lambda F, a, b, g=g, p=p: edge_conv(F, g, p), [F, p.phi, p.omega])
    F, g, p = _edge_case(rng, "pointwise", "both", fused=True)
    run("pointwise_edge_max", lambda F, a, b, g=g, p=p: pointwise_edge_max(F, g, p), [F, p.phi, p.omega])
    return results


def gradcheck_model_config() -> ModelConfig:
    """16x16 input, dense SCC at 8x8 and pointwise SCC at 16x16."""
    return ModelConfig(
        input_size=16,
        encoder_channels=(4, 8),
        deconv_layers=2,
        deconv_channels=6,
        scc_k=3,
        dense_max_length=64,
        num_maps=3,
        seed=0,
    )


def model_check(seed: int = 0, tol: float = 1e-3, h: float = 1e-6, max_coords: int = 24) -> CheckResult:
    """End-to-end check with frozen graphs, in float64 to keep FD noise below tol."""
    rng = np.random.default_rng(seed)
    cfg = gradcheck_model_config()
    model = HeatmapNet(cfg, dtype=np.float64)
    for p in model.params.values():  # nonzero biases so no unit sits exactly at a ReLU kink
        if p.name.endswith(".b"):
            p.data[...] = rng.uniform(0.05, 0.2, p.shape)
    proj = model.params["proj.w"]  # zero at init, which would hide every upstream gradient
    proj.data[...] = rng.uniform(-0.5, 0.5, proj.shape)
    x = Tensor(rng.uniform(0, 1, (2, cfg.input_channels, 16, 16)))
    target = Tensor(rng.uniform(0, 0.3, (2, cfg.num_maps, cfg.heatmap_size, cfg.heatmap_size)))
    with T.no_grad():
        model(x)
    frozen = model.last_graphs
    params = model.parameters()

    def loss() -> Tensor:
        return T.scale(T.mse(model(x, graphs=frozen), target), 0.5)

    t0 = time.perf_counter()
    model.zero_grad()
    loss().backward()
    errs = []
    for p in params:
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num, ana = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
            num.append((up - down) / (2 * h))
            ana.append(grad[i])
        errs.append(relative_error(ana, num))
    return CheckResult("model_frozen_graphs", max(errs), tol, time.perf_counter() - t0)


def run_all(scope: str = "ops", tol: float = 1e-3, seed: int = 0) -> list[CheckResult]:
    results = []
    if scope in ("ops", "all"):
        results += op_checks(seed, tol=tol)
    if scope in ("model", "all"):
        results.append(model_check(seed, tol=tol))
    return results
