import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scch import tensor as T
from scch.config import ConfigError
from scch.scc import (
    FeatureGraph,
    build_knn_graph,
    edge_conv,
    flatten_channels,
    init_scc_params,
    knn_indices,
    max_aggregate,
    pairwise_sq_distances,
    pointwise_edge_max,
    scc_forward,
    unflatten_channels,
    write_graph_trace,
)
from scch.tensor import ShapeError, Tensor

COEF = {"both": (1, -1, 1), "concat_raw": (1, 0, 1), "local_only": (0, -1, 1)}


def brute_knn(f, k):
    n = len(f)
    d = [[sum((f[i][t] - f[j][t]) ** 2 for t in range(len(f[i]))) for j in range(n)] for i in range(n)]
    return [[j for _, j in sorted((d[i][j], j) for j in range(n) if j != i)[:k]] for i in range(n)], d


def naive_edge_conv(f, nbr, phi, omega, variant, mode):
    """Per-edge ReLU(phi . f_i + omega . (f_j - f_i)) with the variant's term selection."""
    use_global, use_local, raw_neighbor = {
        "both": (True, True, False),
        "concat_raw": (True, False, True),
        "local_only": (False, True, False),
    }[variant]
    n, k = nbr.shape
    length = f.shape[1]
    K = phi.shape[0]
    shape = (n, k, K) if mode == "dense" else (n, k, K, length)
    out = np.zeros(shape)
    for i in range(n):
        for s in range(k):
            j = nbr[i, s]
            for c in range(K):
                if mode == "dense":
                    v = 0.0
                    if use_global:
                        v += sum(phi[c, t] * f[i, t] for t in range(length))
                    if use_local:
                        v += sum(omega[c, t] * (f[j, t] - f[i, t]) for t in range(length))
                    if raw_neighbor:
                        v += sum(omega[c, t] * f[j, t] for t in range(length))
                    out[i, s, c] = max(v, 0.0)
                else:
                    for t in range(length):
                        v = 0.0
                        if use_global:
                            v += phi[c] * f[i, t]
                        if use_local:
                            v += omega[c] * (f[j, t] - f[i, t])
                        if raw_neighbor:
                            v += omega[c] * f[j, t]
                        out[i, s, c, t] = max(v, 0.0)
    return out


def test_knn_line_example():
    # points 0, 1, 5 on a line: nearest of 0 is 1, of 1 is 0, of 5 is 1
    F = np.array([[0.0], [1.0], [5.0]])
    g = build_knn_graph(pairwise_sq_distances(F), 1)
    assert g.neighbors.tolist() == [[1], [0], [1]]
    g2 = build_knn_graph(pairwise_sq_distances(F), 2)
    assert g2.neighbors.tolist() == [[1, 2], [0, 2], [1, 0]]
    assert g2.distances[2].tolist() == [25.0, 16.0, 0.0]


def test_knn_ties_go_to_lower_index():
    F = np.array([[0.0], [1.0], [-1.0], [1.0]])
    assert knn_indices(pairwise_sq_distances(F), 3)[0].tolist() == [1, 2, 3]


def test_knn_excludes_self_even_with_duplicates():
    F = np.zeros((4, 3))
    nbr = knn_indices(pairwise_sq_distances(F), 3)
    for i in range(4):
        assert i not in nbr[i]
        assert nbr[i].tolist() == [j for j in range(4) if j != i]


@pytest.mark.parametrize("k", [0, 4])
def test_knn_k_out_of_range(k):
    with pytest.raises(ConfigError):
        knn_indices(pairwise_sq_distances(np.eye(4)), k)


def test_distances_need_two_nodes():
    with pytest.raises(ShapeError):
        pairwise_sq_distances(np.ones((1, 3)))


@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_knn_matches_brute_force(n, length, seed):
    f = np.random.default_rng(seed).standard_normal((n, length))
    k = min(3, n - 1)
    want, d = brute_knn(f.tolist(), k)
    g = build_knn_graph(pairwise_sq_distances(f), k)
    assert g.neighbors.tolist() == want
    np.testing.assert_allclose(g.distances, d, atol=1e-9)


def test_distances_are_symmetric_nonnegative(rng):
    f = rng.standard_normal((3, 10, 20)) * 100
    d = pairwise_sq_distances(f).data
    assert d.dtype == np.float64
    assert np.array_equal(d, np.swapaxes(d, 1, 2))
    assert (d >= 0).all() and not np.diagonal(d, axis1=1, axis2=2).any()


@pytest.mark.parametrize("variant", ["both", "concat_raw", "local_only"])
@pytest.mark.parametrize("mode", ["dense", "pointwise"])
def test_edge_conv_matches_naive(rng, mode, variant):
    n, length, k = 7, 5, 3
    f = rng.standard_normal((n, length))
    p = init_scc_params(length, mode, k, variant, rng, K=3 if mode == "dense" else 2)
    p.phi.data = rng.standard_normal(p.phi.shape)
    p.omega.data = rng.standard_normal(p.omega.shape)
    g = build_knn_graph(pairwise_sq_distances(f), k)
    got = edge_conv(Tensor(f), g, p).data
    want = naive_edge_conv(f, g.neighbors, p.phi.data, p.omega.data, variant, mode)
    np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("variant", ["both", "concat_raw", "local_only"])
def test_fused_pointwise_equals_composed(rng, variant):
    n, length, k = 9, 16, 4
    f = rng.standard_normal((n, length)).astype(np.float32)
    p = init_scc_params(length, "pointwise", k, variant, rng)
    p.phi.data = rng.standard_normal(1).astype(np.float32)
    p.omega.data = rng.standard_normal(1).astype(np.float32)
    g = build_knn_graph(pairwise_sq_distances(f), k)
    seed = rng.standard_normal((n, 1, length))

    results = []
    for fn in (lambda F: pointwise_edge_max(F, g, p), lambda F: max_aggregate(edge_conv(F, g, p))):
        F = Tensor(f, requires_grad=True)
        p.phi.grad = p.omega.grad = None
        out = fn(F)
        T.sum_all(T.mul(out, Tensor(seed.astype(np.float32)))).backward()
        results.append((out.data.copy(), F.grad.copy(), p.phi.grad.copy(), p.omega.grad.copy()))
    for a, b in zip(*results):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


def test_max_aggregate_shapes():
    e = Tensor(np.arange(24.0).reshape(2, 3, 4))
    np.testing.assert_array_equal(max_aggregate(e).data, e.data[:, 2, :])


def test_flatten_roundtrip(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(unflatten_channels(flatten_channels(x)).data, x.data)
    with pytest.raises(ShapeError):
        flatten_channels(Tensor(np.ones((2, 3, 4))))


@pytest.mark.parametrize("mode,m", [("dense", 3), ("pointwise", 6)])
def test_scc_forward_preserves_shape(rng, mode, m):
    x = Tensor(np.abs(rng.standard_normal((2, 6, m, m))))
    p = init_scc_params(m * m, mode, 2, "both", rng)
    out, graphs = scc_forward(x, p)
    assert out.shape == x.shape
    assert len(graphs) == 2 and graphs[0].neighbors.shape == (6, 2)


def test_scc_forward_batch_equals_per_sample(rng):
    x = rng.standard_normal((3, 5, 4, 4)).astype(np.float32)
    for mode in ("dense", "pointwise"):
        p = init_scc_params(16, mode, 2, "both", rng)
        batched, _ = scc_forward(Tensor(x), p)
        for b in range(3):
            single, _ = scc_forward(Tensor(x[b]), p)
            np.testing.assert_allclose(batched.data[b], single.data, rtol=1e-6, atol=1e-6)


def test_graph_is_rebuilt_every_forward(rng):
    p = init_scc_params(4, "dense", 1, "both", rng)
    a = np.zeros((3, 2, 2), np.float32)
    a[1] += 0.1
    a[2] += 1.0
    b = a.copy()
    b[2] = 0.05
    _, ga = scc_forward(Tensor(a), p)
    _, gb = scc_forward(Tensor(b), p)
    assert ga[0].neighbors[0].tolist() == [1]
    assert gb[0].neighbors[0].tolist() == [2]


def test_frozen_graphs_are_used(rng):
    x = Tensor(rng.standard_normal((5, 3, 3)).astype(np.float32))
    p = init_scc_params(9, "dense", 2, "both", rng)
    _, graphs = scc_forward(x, p)
    fixed = [FeatureGraph(5, 2, graphs[0].distances, np.array([[1, 2], [2, 3], [3, 4], [4, 0], [0, 1]]))]
    _, used = scc_forward(x, p, fixed)
    assert used[0] is fixed[0]


def test_shape_preservation_is_enforced(rng):
    p = init_scc_params(9, "dense", 2, "both", rng, K=4)
    with pytest.raises(ConfigError):
        scc_forward(Tensor(np.ones((4, 3, 3))), p)
    p = init_scc_params(9, "dense", 4, "both", rng)
    with pytest.raises(ConfigError):
        scc_forward(Tensor(np.ones((4, 3, 3))), p)


def test_params_validate_shapes(rng):
    p = init_scc_params(9, "dense", 2)
    with pytest.raises(ConfigError):
        type(p)("dense", 9, p.phi, T.Parameter(np.zeros((9, 4))), 2)
    with pytest.raises(ConfigError):
        init_scc_params(9, "sparse")
    with pytest.raises(ConfigError):
        init_scc_params(9, "dense", 2, "concat")


def test_no_gradient_flows_through_graph_construction(rng):
    x = Tensor(rng.standard_normal((4, 2, 2)).astype(np.float32), requires_grad=True)
    p = init_scc_params(4, "dense", 2, "both", rng)
    out, _ = scc_forward(x, p)
    T.sum_all(out).backward()
    d = pairwise_sq_distances(x)
    assert not d.requires_grad
    assert x.grad.shape == x.shape


def test_write_graph_trace_counts(tmp_path, rng):
    x = Tensor(rng.standard_normal((2, 6, 2, 2)).astype(np.float32))
    p = init_scc_params(4, "dense", 3, "both", rng)
    _, graphs = scc_forward(x, p)
    n = write_graph_trace(tmp_path / "g.csv", [graphs, graphs])
    assert n == 2 * 6 * 3
    rows = list(csv.DictReader(open(tmp_path / "g.csv")))
    assert len(rows) == n and rows[0].keys() == {"layer", "node", "rank", "neighbor", "squared_distance"}
