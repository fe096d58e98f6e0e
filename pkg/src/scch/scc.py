"""Semantic correspondence convolution over feature channels.

Each channel map is flattened into a node vector, a k-NN graph over the
channels is rebuilt from squared Euclidean distances on every call, edge
features combine the centre node with its neighbour offsets, and a MAX over
neighbour slots produces the new channel.

Batched inputs fold the batch into the node axis: a ``(B, n, M, M)`` input is
processed as ``B * n`` rows whose neighbour indices never cross sample
boundaries, so each sample keeps its own graph.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy import sparse

from .config import ConfigError
from .tensor import Parameter, ShapeError, Tensor, _result, reduce_max, reshape

MODES = ("dense", "pointwise")
VARIANTS = ("both", "concat_raw", "local_only")


@dataclass
class FeatureGraph:
    n: int
    k: int
    distances: np.ndarray  # (n, n) squared Euclidean, float64
    neighbors: np.ndarray  # (n, k) int64, ascending distance

    def rows(self, layer: int = 0):
        for i in range(self.n):
            for rank, j in enumerate(self.neighbors[i]):
                yield layer, i, rank, int(j), float(self.distances[i, j])


@dataclass
class SCCLayerParams:
    mode: str
    K: int
    phi: Parameter
    omega: Parameter
    k: int
    variant: str = "both"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown SCC mode {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown edge-feature variant {self.variant!r}")
        want = (self.K,) if self.mode == "pointwise" else (self.K, self.phi.shape[-1])
        if self.phi.shape != want or self.omega.shape != self.phi.shape:
            raise ConfigError(
                f"{self.mode} SCC expects phi/omega of shape {want}, got {self.phi.shape}/{self.omega.shape}"
            )
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @property
    def parameters(self) -> list[Parameter]:
        return [self.phi, self.omega]


def init_scc_params(
    length: int,
    mode: str = "dense",
    k: int = 5,
    variant: str = "both",
    rng: np.random.Generator | None = None,
    K: int | None = None,
    name: str = "scc",
) -> SCCLayerParams:
    """Near-identity initialisation: phi starts at the identity, omega small.

    With nonnegative inputs the layer then begins as (approximately) a
    pass-through, so inserting it does not scramble the spatial maps.
    """
    rng = rng or np.random.default_rng(0)
    if mode == "dense":
        K = length if K is None else K
        bound = np.sqrt(6.0 / (K + length))
        phi = np.eye(K, length) + rng.uniform(-0.1 * bound, 0.1 * bound, (K, length))
        omega = rng.uniform(-0.1 * bound, 0.1 * bound, (K, length))
    elif mode == "pointwise":
        K = 1 if K is None else K
        phi = np.ones(K) + rng.uniform(-0.05, 0.05, K)
        omega = rng.uniform(-0.1, 0.1, K)
    else:
        raise ConfigError(f"unknown SCC mode {mode!r}")
    return SCCLayerParams(
        mode, K, Parameter(phi, name=f"{name}.phi"), Parameter(omega, name=f"{name}.omega"), k, variant
    )


# ---------------------------------------------------------------------------
# graph construction (no gradients)


def flatten_channels(features: Tensor) -> Tensor:
    """(..., n, M, M) -> (..., n, M*M), row-major per channel."""
    *lead, m1, m2 = features.shape
    if m1 != m2:
        raise ShapeError(f"flatten_channels: maps must be square, got {m1}x{m2}")
    return reshape(features, (*lead, m1 * m2))


def unflatten_channels(flat: Tensor, m: int | None = None) -> Tensor:
    *lead, length = flat.shape
    m = int(round(np.sqrt(length))) if m is None else m
    if m * m != length:
        raise ShapeError(f"unflatten_channels: length {length} is not a square")
    return reshape(flat, (*lead, m, m))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def pairwise_sq_distances(F) -> Tensor:
    """D[i, j] = |f_i - f_j|^2 for (n, L) or batched (B, n, L) input."""
    f = _as_array(F).astype(np.float64)
    if f.shape[-2] < 2:
        raise ShapeError("pairwise_sq_distances: need at least two nodes")
    gram = f @ np.swapaxes(f, -1, -2)
    sq = np.diagonal(gram, axis1=-2, axis2=-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * gram
    d = 0.5 * (d + np.swapaxes(d, -1, -2))
    np.maximum(d, 0.0, out=d)
    idx = np.arange(d.shape[-1])
    d[..., idx, idx] = 0.0
    return Tensor(d, dtype=np.float64)


def knn_indices(D, k: int) -> np.ndarray:
    """k nearest off-diagonal indices per row, ascending, ties to the lower index."""
    d = np.array(_as_array(D), dtype=np.float64)
    n = d.shape[-1]
    if not 1 <= k <= n - 1:
        raise ConfigError(f"k={k} out of range for {n} nodes (need 1 <= k <= {n - 1})")
    idx = np.arange(n)
    d[..., idx, idx] = np.inf
    return np.argsort(d, axis=-1, kind="stable")[..., :k]


def build_knn_graph(D, k: int) -> FeatureGraph:
    d = np.asarray(_as_array(D), dtype=np.float64)
    return FeatureGraph(d.shape[0], k, d, knn_indices(d, k))


# ---------------------------------------------------------------------------
# edge convolution


def _coefficients(variant: str) -> tuple[float, float, float]:
    # centre weight = c_phi * phi + c_omega * omega, neighbour weight = omega
    return {"both": (1.0, -1.0, 1.0), "concat_raw": (1.0, 0.0, 1.0), "local_only": (0.0, -1.0, 1.0)}[variant]


def _scatter_matrix(nbr: np.ndarray, rows: int, dtype) -> sparse.csr_matrix:
    """(rows, rows*k) matrix S with S @ X summing X[r, s] into row nbr[r, s]."""
    flat = nbr.reshape(-1)
    return sparse.csr_matrix(
        (np.ones(flat.size, dtype=dtype), (flat, np.arange(flat.size))), shape=(rows, flat.size)
    )


def _neighbor_array(graph, rows: int) -> np.ndarray:
    nbr = graph.neighbors if isinstance(graph, FeatureGraph) else np.asarray(graph)
    nbr = np.asarray(nbr, dtype=np.int64)
    if nbr.ndim != 2 or nbr.shape[0] != rows:
        raise ShapeError(f"edge_conv: neighbor table {nbr.shape} does not match {rows} nodes")
    return nbr


def edge_conv(F: Tensor, graph, params: SCCLayerParams) -> Tensor:
    """Edge features ReLU(phi . f_i + omega . (f_j - f_i)) for every graph edge.

    ``graph`` is a :class:`FeatureGraph` or an ``(n, k)`` neighbour table.
    Dense mode returns (n, k, K); pointwise mode returns (n, k, K, L) with
    scalar weights applied at every spatial position.
    """
    if F.ndim != 2:
        raise ShapeError(f"edge_conv: expected (n, L) features, got {F.shape}")
    rows, length = F.shape
    nbr = _neighbor_array(graph, rows)
    if params.mode == "dense" and params.phi.shape[1] != length:
        raise ConfigError(f"dense SCC weights expect L={params.phi.shape[1]}, features have L={length}")
    cp, co, cn = _coefficients(params.variant)
    f = F.data
    phi, omega = params.phi.data.astype(f.dtype), params.omega.data.astype(f.dtype)
    centre_w = cp * phi + co * omega
    scatter = _scatter_matrix(nbr, rows, f.dtype)

    if params.mode == "dense":
        a = f @ centre_w.T  # (rows, K)
        q = f @ omega.T
        pre = a[:, None, :] + cn * q[nbr]
        mask = pre > 0
        out = np.maximum(pre, 0, out=pre)

        def backward(g):
            gm = g * mask
            da = gm.sum(axis=1)
            dq = cn * np.asarray(scatter @ gm.reshape(-1, gm.shape[-1]), dtype=f.dtype)
            gf = da @ centre_w + dq @ omega
            dcw = da.T @ f
            dom = dq.T @ f
            return gf, cp * dcw, co * dcw + dom

    else:
        fn = f[nbr]  # (rows, k, L)
        pre = np.multiply((cn * omega)[None, None, :, None], fn[:, :, None, :])
        pre += centre_w[None, None, :, None] * f[:, None, None, :]
        mask = pre > 0
        out = np.maximum(pre, 0, out=pre)

        def backward(g):
            gm = g * mask  # (rows, k, K, L)
            gsum = gm.sum(axis=1)  # (rows, K, L)
            gf = np.einsum("c,rcl->rl", centre_w, gsum)
            gnb = cn * np.einsum("c,rscl->rsl", omega, gm)
            gf = gf + np.asarray(scatter @ gnb.reshape(-1, length), dtype=f.dtype)
            dcw = np.einsum("rcl,rl->c", gsum, f)
            dom = cn * np.einsum("rscl,rsl->c", gm, fn)
            return gf, cp * dcw, co * dcw + dom

    return _result(out, (F, params.phi, params.omega), backward)


@njit(cache=True)
def _pw_forward(f, nbr, cw, nw, out, slot):
    rows, length = f.shape
    k = nbr.shape[1]
    for r in range(rows):
        for c in range(cw.shape[0]):
            for x in range(length):
                centre = cw[c] * f[r, x]
                best = centre + nw[c] * f[nbr[r, 0], x]
                arg = 0
                for s in range(1, k):
                    v = centre + nw[c] * f[nbr[r, s], x]
                    if v > best or v != v:  # NaN sticks, like np.max
                        best = v
                        arg = s
                out[r, c, x] = best if best > 0 or best != best else 0.0
                slot[r, c, x] = arg


@njit(cache=True)
def _pw_backward(g, f, nbr, slot, out, cw, nw, gf, dcw, dnw):
    rows, length = f.shape
    for r in range(rows):
        for c in range(cw.shape[0]):
            acc_c = 0.0
            acc_n = 0.0
            for x in range(length):
                if out[r, c, x] > 0:
                    gv = g[r, c, x]
                    j = nbr[r, slot[r, c, x]]
                    gf[r, x] += cw[c] * gv
                    gf[j, x] += nw[c] * gv
                    acc_c += gv * f[r, x]
                    acc_n += gv * f[j, x]
            dcw[c] += acc_c
            dnw[c] += acc_n


def pointwise_edge_max(F: Tensor, graph, params: SCCLayerParams) -> Tensor:
    """Fused ``max_aggregate(edge_conv(F, graph, params))`` for pointwise mode.

    Streams over neighbour slots instead of materialising the (n, k, K, L)
    edge tensor. Values and gradients (first winner on ties) match the
    unfused composition.
    """
    if params.mode != "pointwise":
        raise ConfigError("pointwise_edge_max needs a pointwise SCC layer")
    rows, length = F.shape
    nbr = _neighbor_array(graph, rows)
    cp, co, cn = _coefficients(params.variant)
    f = F.data
    phi, omega = params.phi.data.astype(f.dtype), params.omega.data.astype(f.dtype)
    centre_w = cp * phi + co * omega
    nw = cn * omega
    out = np.empty((rows, params.K, length), dtype=f.dtype)
    slot = np.empty(out.shape, dtype=np.int8)
    _pw_forward(f, nbr, centre_w, nw, out, slot)

    def backward(g):
        gf = np.zeros_like(f)
        dcw = np.zeros(params.K)
        dnw = np.zeros(params.K)
        _pw_backward(np.ascontiguousarray(g, dtype=f.dtype), f, nbr, slot, out, centre_w, nw, gf, dcw, dnw)
        dcw = dcw.astype(f.dtype)
        return gf, cp * dcw, co * dcw + cn * dnw.astype(f.dtype)

    return _result(out, (F, params.phi, params.omega), backward)


def max_aggregate(edges: Tensor) -> Tensor:
    """MAX over the neighbour-slot axis (axis 1)."""
    if edges.ndim < 2 or edges.shape[1] < 1:
        raise ShapeError(f"max_aggregate: expected (n, k, ...) edges, got {edges.shape}")
    return reduce_max(edges, axis=1)


# ---------------------------------------------------------------------------
# full layer


def _check_shape_preserving(params: SCCLayerParams, length: int) -> None:
    if params.mode == "dense" and params.K != length:
        raise ConfigError(f"dense SCC needs K == L to keep map shape (K={params.K}, L={length})")
    if params.mode == "pointwise" and params.K != 1:
        raise ConfigError(f"pointwise SCC needs K == 1 to keep map shape (K={params.K})")


def scc_forward(
    features: Tensor,
    params: SCCLayerParams,
    graphs: Sequence[FeatureGraph] | None = None,
) -> tuple[Tensor, list[FeatureGraph]]:
    """Apply one SCC layer to (n, M, M) or (B, n, M, M) features.

    Graphs are rebuilt from the current features unless ``graphs`` is given
    (one per sample), which freezes neighbour selection for gradient checks.
    Returns the output (same shape as the input) and the graphs used.
    """
    batched = features.ndim == 4
    if features.ndim not in (3, 4):
        raise ShapeError(f"scc_forward: expected (n, M, M) or (B, n, M, M), got {features.shape}")
    b = features.shape[0] if batched else 1
    n, m = features.shape[-3], features.shape[-1]
    length = m * m
    _check_shape_preserving(params, length)
    if not 1 <= params.k <= n - 1:
        raise ConfigError(f"k={params.k} out of range for {n} channels")

    flat = flatten_channels(features)  # (B, n, L) or (n, L)
    if graphs is None:
        d = pairwise_sq_distances(flat).data.reshape(b, n, n)
        nbr = knn_indices(d, params.k)
        graphs = [FeatureGraph(n, params.k, d[i], nbr[i]) for i in range(b)]
    elif len(graphs) != b:
        raise ShapeError(f"scc_forward: got {len(graphs)} graphs for batch of {b}")
    offsets = (np.arange(b) * n)[:, None, None]
    table = (np.stack([g.neighbors for g in graphs]) + offsets).reshape(b * n, params.k)

    rows = reshape(flat, (b * n, length))
    if params.mode == "pointwise":
        agg = pointwise_edge_max(rows, table, params)  # (B*n, 1, L)
    else:
        agg = max_aggregate(edge_conv(rows, table, params))  # (B*n, K)
    out = reshape(agg, features.shape)
    return out, list(graphs)


def write_graph_trace(path, graphs_by_layer: Sequence[Sequence[FeatureGraph]], sample: int = 0) -> int:
    """CSV rows (layer, node, rank, neighbor, squared_distance) for one sample."""
    count = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "node", "rank", "neighbor", "squared_distance"])
        for layer, graphs in enumerate(graphs_by_layer):
            for row in graphs[sample].rows(layer):
                w.writerow([*row[:4], repr(row[4])])
                count += 1
    return count
