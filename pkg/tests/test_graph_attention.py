import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equigat import autodiff as ad
from equigat.attention import (
    AttentionConfig,
    ConfigError,
    EquivariantGraphAttention,
    RadialMLP,
    attn_dropout,
    segment_softmax,
)
from equigat.graph import AtomisticGraph, DegenerateGeometryError, batch_graphs, build_graph, radial_basis, radius_graph
from equigat.irreps import IrrepsFeature, transform_array
from equigat.so3 import DomainError, random_quaternion, rotation_matrix, spherical_harmonics

VARIANTS = [(a, m) for a in ("mlp", "dot") for m in ("linear", "nonlinear")]


# ---------------------------------------------------------------------------
# radius graph


def test_two_atoms_connected():
    dst, src = radius_graph([[0, 0, 0], [1.0, 0, 0]], 5.0)
    assert list(zip(dst, src)) == [(0, 1), (1, 0)]


def test_two_atoms_too_far():
    dst, src = radius_graph([[0, 0, 0], [6.0, 0, 0]], 5.0)
    assert len(dst) == 0 and len(src) == 0


def test_three_collinear_atoms():
    dst, src = radius_graph([[0, 0, 0], [3.0, 0, 0], [6.0, 0, 0]], 5.0)
    assert list(zip(dst, src)) == [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_coincident_atoms_raise():
    with pytest.raises(DegenerateGeometryError):
        radius_graph([[0, 0, 0], [1, 1, 1], [0, 0, 0]], 5.0)


def test_edge_vectors_follow_positions():
    g = build_graph([1, 1], [[0, 0, 0], [1.0, 2.0, 2.0]], 5.0)
    np.testing.assert_array_equal(g.edge_vectors().data, [[1, 2, 2], [-1, -2, -2]])
    np.testing.assert_array_equal(g.edge_lengths().data, [3.0, 3.0])
    moved = g.with_positions(np.array([[0, 0, 0], [0, 0, 4.0]]))
    np.testing.assert_array_equal(moved.edge_lengths().data, [4.0, 4.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000), st.floats(0.5, 4.0))
def test_radius_graph_properties(n, seed, cutoff):
    pos = np.random.default_rng(seed).uniform(-2, 2, (n, 3))
    dst, src = radius_graph(pos, cutoff)
    assert np.all(dst != src)
    d = np.linalg.norm(pos[src] - pos[dst], axis=1)
    assert np.all(d <= cutoff)
    assert list(zip(dst, src)) == sorted(zip(dst, src))
    # every in-range pair is present, in both directions
    expected = sum(1 for i in range(n) for j in range(n) if i != j and np.linalg.norm(pos[i] - pos[j]) <= cutoff)
    assert len(dst) == expected


def test_batch_keeps_graphs_disjoint():
    a = build_graph([1, 6], [[0, 0, 0], [1, 0, 0]], 5.0)
    b = build_graph([8, 8, 1], [[0, 0, 0], [1, 0, 0], [0, 1, 0]], 5.0)
    g = batch_graphs([a, b])
    assert g.num_atoms == 5 and g.num_graphs == 2
    assert g.graph_index.tolist() == [0, 0, 1, 1, 1]
    assert np.all(g.graph_index[g.dst] == g.graph_index[g.src])


# ---------------------------------------------------------------------------
# radial basis


def test_gaussian_peaks_at_centers():
    cutoff, count = 5.0, 11
    centers = np.linspace(0, cutoff, count)
    vals = radial_basis(centers[1:], "gaussian", count, cutoff).data
    for k in range(1, count):
        assert vals[k - 1, k] == 1.0


def test_bessel_vanishes_at_cutoff():
    np.testing.assert_allclose(radial_basis(np.array([5.0]), "bessel", 8, 5.0).data, 0.0, atol=1e-15)


def test_bessel_half_cutoff_formula():
    c = 5.0
    v = radial_basis(np.array([c / 2]), "bessel", 3, c).data[0, 0]
    assert v == pytest.approx(2 * math.sqrt(2 / c) / c, rel=1e-14)


@pytest.mark.parametrize("kind", ["gaussian", "bessel"])
def test_basis_rejects_non_positive_distance(kind):
    with pytest.raises(DomainError):
        radial_basis(np.array([0.5, 0.0]), kind, 4, 5.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 5.0), st.sampled_from(["gaussian", "bessel"]))
def test_basis_finite_on_domain(d, kind):
    assert np.all(np.isfinite(radial_basis(np.array([d]), kind, 16, 5.0).data))


def test_spherical_harmonics_reject_zero_vector():
    with pytest.raises(DomainError):
        spherical_harmonics([0, 1], np.array([[0.0, 0.0, 0.0]]))


# ---------------------------------------------------------------------------
# radial MLP


def test_radial_mlp_zero_final_layer():
    mlp = RadialMLP("r", 8, 16, 2, 5)
    p = mlp.init(np.random.default_rng(0))
    p["r.2.w"][:] = 0.0
    out = mlp({k: ad.Tensor(v) for k, v in p.items()}, ad.Tensor(np.random.default_rng(1).random((4, 8))))
    assert out.shape == (4, 5) and not np.any(out.data)
    assert "r.2.b" not in p


def test_radial_mlp_gradient():
    rng = np.random.default_rng(2)
    mlp = RadialMLP("r", 6, 8, 2, 3)
    params = {k: ad.Tensor(v, name=k) for k, v in mlp.init(rng).items()}
    basis = ad.Tensor(rng.random((5, 6)), name="basis")
    u = rng.standard_normal((5, 3))
    rep = ad.grad_check(lambda: ad.sum_(mlp(params, basis) * u), [basis, *params.values()])
    assert rep.passed, rep.lines()


def test_radial_weights_depend_only_on_length():
    mlp = RadialMLP("r", 16, 8, 2, 4)
    params = {k: ad.Tensor(v) for k, v in mlp.init(np.random.default_rng(3)).items()}
    rng = np.random.default_rng(4)
    v = rng.standard_normal(3)
    R = rotation_matrix(random_quaternion(rng))
    f = lambda vec: mlp(params, radial_basis(np.array([np.linalg.norm(vec)]), "gaussian", 16, 5.0)).data  # noqa: E731
    np.testing.assert_array_equal(f(v), f(v))
    np.testing.assert_allclose(f(R @ v), f(v), atol=1e-13)


# ---------------------------------------------------------------------------
# softmax and dropout


def test_softmax_sums_to_one_per_segment():
    rng = np.random.default_rng(5)
    idx = np.array([0, 0, 1, 2, 2, 2])
    w = segment_softmax(ad.Tensor(rng.standard_normal((6, 3)) * 50), idx, 4).data
    sums = np.zeros((4, 3))
    np.add.at(sums, idx, w)
    np.testing.assert_allclose(sums[:3], 1.0, atol=1e-12)
    assert np.all(sums[3] == 0)


def test_softmax_is_overflow_safe():
    w = segment_softmax(ad.Tensor(np.array([[1000.0], [999.0]])), np.array([0, 0]), 1).data
    assert np.all(np.isfinite(w))
    assert w[0, 0] == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-12)


def test_dropout_identity_cases():
    w = ad.Tensor(np.random.default_rng(6).random((5, 2)))
    assert attn_dropout(w, 0.0, np.random.default_rng(0), True) is w
    assert attn_dropout(w, 0.7, np.random.default_rng(0), False) is w


def test_dropout_preserves_mean():
    w = ad.Tensor(np.array([[0.3, 0.7]]))
    rng = np.random.default_rng(7)
    trials = 100_000
    masked = attn_dropout(ad.Tensor(np.broadcast_to(w.data, (trials, 2)).copy()), 0.3, rng, True).data
    np.testing.assert_allclose(masked.mean(axis=0), w.data[0], rtol=0.02)
    assert set(np.unique(np.round(masked[:, 0], 12))) <= {0.0, round(0.3 / 0.7, 12)}


# ---------------------------------------------------------------------------
# attention block


def _config(attn_kind, message_kind, mode="se3", **kw):
    if mode == "se3":
        irreps = dict(irreps_node="[(8,0),(4,1),(2,2)]", irreps_sh="[(1,0),(1,1),(1,2)]", d_head="[(4,0),(2,1),(1,2)]")
    else:
        irreps = dict(irreps_node="[(8,0,e),(2,0,o),(4,1,o),(2,1,e),(2,2,e)]", irreps_sh="[(1,0,e),(1,1,o),(1,2,e)]",
                      d_head="[(4,0,e),(1,0,o),(2,1,o),(1,1,e),(1,2,e)]")
    return AttentionConfig(heads=2, lmax=2, attn_kind=attn_kind, message_kind=message_kind, basis_count=8,
                           radial_hidden=16, **irreps, **kw)


def _setup(cfg, positions, seed=0):
    rng = np.random.default_rng(seed)
    attn = EquivariantGraphAttention("attn", cfg)
    params = {k: ad.Tensor(v) for k, v in attn.init(rng).items()}
    graph = build_graph(np.ones(len(positions), dtype=int), positions, 5.0)
    x = IrrepsFeature.random(cfg.irreps_node, len(positions), rng)
    return attn, params, graph, x


def _geometry(cfg, graph):
    v = graph.edge_vectors()
    sh = IrrepsFeature(cfg.irreps_sh, spherical_harmonics([b.L for b in cfg.irreps_sh], v))
    return sh, radial_basis(graph.edge_lengths(v), "gaussian", cfg.basis_count, 5.0)


POS = np.array([[0.0, 0.0, 0.0], [1.2, 0.3, -0.4], [-0.5, 1.1, 0.6], [0.4, -0.9, 1.3], [7.0, 7.0, 7.0]])


@pytest.mark.parametrize("attn_kind, message_kind", VARIANTS)
@pytest.mark.parametrize("mode", ["se3", "e3"])
def test_attention_equivariance(attn_kind, message_kind, mode):
    cfg = _config(attn_kind, message_kind, mode)
    attn, params, graph, x = _setup(cfg, POS)
    y, a = attn(params, x, graph, *_geometry(cfg, graph), return_attention=True)
    rng = np.random.default_rng(9)
    for _ in range(5):
        R = rotation_matrix(random_quaternion(rng))
        g_r = build_graph(graph.species, POS @ R.T, 5.0)
        x_r = IrrepsFeature(x.irreps, transform_array(x.irreps, x.numpy(), R))
        y_r, a_r = attn(params, x_r, g_r, *_geometry(cfg, g_r), return_attention=True)
        assert np.max(np.abs(y_r.numpy() - transform_array(y.irreps, y.numpy(), R))) <= 1e-8
        assert np.max(np.abs(a_r.data - a.data)) <= 1e-10
    if mode == "e3":
        g_i = build_graph(graph.species, -POS, 5.0)
        x_i = IrrepsFeature(x.irreps, transform_array(x.irreps, x.numpy(), None, True))
        y_i = attn(params, x_i, g_i, *_geometry(cfg, g_i))
        assert np.max(np.abs(y_i.numpy() - transform_array(y.irreps, y.numpy(), None, True))) <= 1e-8


@pytest.mark.parametrize("attn_kind, message_kind", VARIANTS)
def test_attention_weights_normalized_and_isolated_node_zero(attn_kind, message_kind):
    cfg = _config(attn_kind, message_kind)
    attn, params, graph, x = _setup(cfg, POS)
    y, a = attn(params, x, graph, *_geometry(cfg, graph), return_attention=True)
    sums = np.zeros((graph.num_atoms, cfg.heads))
    np.add.at(sums, graph.dst, a.data)
    np.testing.assert_allclose(sums[:4], 1.0, atol=1e-12)
    # atom 4 sits outside every cutoff sphere
    assert graph.degrees()[4] == 0 and not np.any(y.numpy()[4])


@pytest.mark.parametrize("attn_kind, message_kind", VARIANTS)
def test_single_neighbor_weight_is_one(attn_kind, message_kind):
    cfg = _config(attn_kind, message_kind)
    attn, params, graph, x = _setup(cfg, POS[:2])
    _, a = attn(params, x, graph, *_geometry(cfg, graph), return_attention=True)
    assert np.all(a.data == 1.0)


def test_no_edges_gives_zero_output():
    cfg = _config("mlp", "nonlinear")
    attn, params, graph, x = _setup(cfg, np.array([[0.0, 0, 0], [9.0, 0, 0]]))
    y = attn(params, x, graph, IrrepsFeature.zeros(cfg.irreps_sh, 0), ad.Tensor(np.zeros((0, cfg.basis_count))))
    assert y.numpy().shape == (2, cfg.irreps_node.dim) and not np.any(y.numpy())


@pytest.mark.parametrize("attn_kind, message_kind", VARIANTS)
def test_edge_order_does_not_change_output(attn_kind, message_kind):
    cfg = _config(attn_kind, message_kind)
    attn, params, graph, x = _setup(cfg, POS)
    y = attn(params, x, graph, *_geometry(cfg, graph)).numpy()
    perm = np.random.default_rng(10).permutation(graph.num_edges)
    shuffled = AtomisticGraph(graph.species, graph.positions, graph.dst[perm], graph.src[perm],
                              graph.graph_index, 1)
    y2 = attn(params, x, shuffled, *_geometry(cfg, shuffled)).numpy()
    assert np.array_equal(y, y2)


def test_nonlinear_messages_use_two_tensor_products():
    lin = EquivariantGraphAttention("a", _config("mlp", "linear"))
    non = EquivariantGraphAttention("a", _config("mlp", "nonlinear"))
    assert len(lin.tensor_products) == 1 and len(non.tensor_products) == 2
    assert sum(p.weight_count for p in non.tensor_products) > sum(p.weight_count for p in lin.tensor_products)


@pytest.mark.parametrize(
    "kw",
    [dict(heads=0), dict(leaky_slope=1.0), dict(attn_dropout=1.0), dict(attn_kind="softmax")],
)
def test_config_validation(kw):
    base = dict(irreps_node="[(8,0),(4,1)]", irreps_sh="[(1,0),(1,1)]", d_head="[(4,0),(2,1)]", heads=2, lmax=1)
    base.update(kw)
    with pytest.raises(ConfigError):
        EquivariantGraphAttention("a", AttentionConfig(**base))


def test_dot_logits_scaled_by_head_dimension():
    cfg = _config("dot", "linear")
    attn, params, graph, x = _setup(cfg, POS[:3])
    # with zero keys every logit is zero and the weights are uniform over neighbors
    for k in list(params):
        if k.startswith("attn.f_key"):
            params[k] = ad.Tensor(np.zeros_like(params[k].data))
    _, a = attn(params, x, graph, *_geometry(cfg, graph), return_attention=True)
    np.testing.assert_allclose(a.data, 0.5, atol=1e-15)
