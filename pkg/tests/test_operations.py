import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equigat import autodiff as ad
from equigat.irreps import Irreps, IrrepsFeature, LayoutError, kind_label, transform_array
from equigat.operations import (
    LN_EPS,
    Gate,
    Linear,
    apply_dtp,
    build_dtp_plan,
    equivariant_layer_norm,
    equivariant_linear,
    gate,
    gate_input_irreps,
)
from equigat.so3 import Parity, clebsch_gordan, random_quaternion, rotation_matrix


def _rot(x: IrrepsFeature, R, inversion=False) -> IrrepsFeature:
    return IrrepsFeature(x.irreps, transform_array(x.irreps, x.numpy(), R, inversion))


def _random_weights(irreps_in, irreps_out, rng):
    irreps_in, irreps_out = Irreps(irreps_in), Irreps(irreps_out)
    return {kind_label(k): rng.standard_normal((irreps_out.count(k), irreps_in.count(k))) for k in irreps_out.kinds()}


SE3 = Irreps("[(4,0),(3,1),(2,2)]")
E3 = Irreps("[(4,0,e),(2,0,o),(3,1,o),(2,1,e),(2,2,e)]")


# ---------------------------------------------------------------------------
# linear


def test_linear_identity():
    rng = np.random.default_rng(0)
    x = IrrepsFeature.random(SE3, 3, rng)
    w = {kind_label(k): np.eye(SE3.count(k)) for k in SE3.kinds()}
    y = equivariant_linear(x, w, SE3, bias=np.zeros(4))
    np.testing.assert_array_equal(y.numpy(), x.numpy())


def test_linear_mean_example():
    x = IrrepsFeature("[(2,0)]", np.array([[1.0, 3.0]]))
    y = equivariant_linear(x, {"0": np.array([[0.5, 0.5]])}, "[(1,0)]", bias=np.array([0.0]))
    assert y.numpy().tolist() == [[2.0]]


def test_linear_bias_only_on_scalars():
    x = IrrepsFeature.zeros("[(1,0),(1,1)]", 2)
    y = equivariant_linear(x, {"0": np.ones((1, 1)), "1": np.ones((1, 1))}, "[(1,0),(1,1)]", bias=np.array([2.5]))
    np.testing.assert_array_equal(y.numpy(), [[2.5, 0, 0, 0]] * 2)


def test_linear_missing_kind_is_layout_error():
    x = IrrepsFeature.zeros("[(2,0)]", 1)
    with pytest.raises(LayoutError):
        equivariant_linear(x, {"0": np.ones((1, 2))}, "[(1,0),(1,1)]")
    with pytest.raises(LayoutError):
        Linear("lin", "[(2,0)]", "[(1,1)]")


@pytest.mark.parametrize("irreps", [SE3, E3], ids=["se3", "e3"])
def test_linear_equivariance(irreps):
    rng = np.random.default_rng(1)
    out = Irreps(irreps).times(2)
    w = _random_weights(irreps, out, rng)
    b = rng.standard_normal(out.num_scalars())
    x = IrrepsFeature.random(irreps, 4, rng)
    y = equivariant_linear(x, w, out, bias=b)
    for _ in range(20):
        R = rotation_matrix(random_quaternion(rng))
        y_r = equivariant_linear(_rot(x, R), w, out, bias=b)
        assert np.max(np.abs(y_r.numpy() - transform_array(out, y.numpy(), R))) <= 1e-10
    if irreps.has_parity:
        y_i = equivariant_linear(_rot(x, None, True), w, out, bias=b)
        assert np.max(np.abs(y_i.numpy() - transform_array(out, y.numpy(), None, True))) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_linear_is_exactly_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = _random_weights(SE3, SE3, rng)
    x, y = IrrepsFeature.random(SE3, 2, rng), IrrepsFeature.random(SE3, 2, rng)
    combo = IrrepsFeature(SE3, a * x.numpy() + b * y.numpy())
    lhs = equivariant_linear(combo, w, SE3).numpy()
    rhs = a * equivariant_linear(x, w, SE3).numpy() + b * equivariant_linear(y, w, SE3).numpy()
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_equal_scalars_give_beta():
    x = IrrepsFeature("[(3,0)]", np.full((2, 3), 4.2))
    beta = np.array([0.1, -0.2, 0.3])
    y = equivariant_layer_norm(x, np.ones(3), beta)
    np.testing.assert_allclose(y.numpy(), np.tile(beta, (2, 1)), atol=1e-15)


def test_layer_norm_single_vector_is_unit():
    v = np.array([[0.3, -1.2, 2.0]])
    y = equivariant_layer_norm(IrrepsFeature("[(1,1)]", v), np.ones(1))
    np.testing.assert_allclose(y.numpy(), v / np.linalg.norm(v), atol=1e-15)


def test_layer_norm_scalar_statistics():
    rng = np.random.default_rng(3)
    s = rng.standard_normal((5, 6))
    y = equivariant_layer_norm(IrrepsFeature("[(6,0)]", s), np.ones(6), np.zeros(6)).numpy()
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-14)
    np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-12)


def test_layer_norm_vector_rms_is_gamma():
    rng = np.random.default_rng(4)
    x = IrrepsFeature.random("[(4,2)]", 3, rng)
    y = equivariant_layer_norm(x, np.ones(4)).block(0).data
    rms = np.sqrt(np.mean(np.sum(y * y, axis=2), axis=1))
    np.testing.assert_allclose(rms, 1.0, atol=1e-12)


def test_layer_norm_zero_input_is_finite():
    y = equivariant_layer_norm(IrrepsFeature.zeros(SE3, 2), np.ones(SE3.num_channels), np.zeros(4))
    assert np.all(np.isfinite(y.numpy())) and not np.any(y.numpy())
    assert LN_EPS > 0


@pytest.mark.parametrize("irreps", [SE3, E3], ids=["se3", "e3"])
def test_layer_norm_equivariance(irreps):
    rng = np.random.default_rng(5)
    gamma = rng.uniform(0.5, 1.5, irreps.num_channels)
    beta = rng.standard_normal(irreps.num_scalars())
    x = IrrepsFeature.random(irreps, 4, rng)
    y = equivariant_layer_norm(x, gamma, beta).numpy()
    for _ in range(20):
        R = rotation_matrix(random_quaternion(rng))
        y_r = equivariant_layer_norm(_rot(x, R), gamma, beta).numpy()
        assert np.max(np.abs(y_r - transform_array(irreps, y, R))) <= 1e-9
    if irreps.has_parity:
        y_i = equivariant_layer_norm(_rot(x, None, True), gamma, beta).numpy()
        assert np.max(np.abs(y_i - transform_array(irreps, y, None, True))) <= 1e-9


# ---------------------------------------------------------------------------
# gate


def test_gate_zero_gates_halve_vectors():
    v = np.array([1.0, -2.0, 3.0])
    x = IrrepsFeature("[(1,0),(1,1)]", np.concatenate([[0.0], v])[None])
    y = gate(x)
    assert str(y.irreps) == "[(1,1)]"
    np.testing.assert_allclose(y.numpy()[0], 0.5 * v)


def test_gate_example():
    s = 0.7
    v = np.array([0.2, 0.4, -0.1])
    x = IrrepsFeature("[(2,0),(1,1)]", np.concatenate([[s, 0.0], v])[None])
    y = gate(x)
    assert str(y.irreps) == "[(1,0),(1,1)]"
    silu = s / (1 + math.exp(-s))
    np.testing.assert_allclose(y.numpy()[0], np.concatenate([[silu], 0.5 * v]), atol=1e-15)


def test_gate_scalar_count_mismatch():
    with pytest.raises(LayoutError):
        gate(IrrepsFeature.zeros("[(1,0),(2,1)]", 1))
    with pytest.raises(LayoutError):
        gate(IrrepsFeature.zeros("[(3,0),(2,1)]", 1), "[(2,0),(2,1)]")


@pytest.mark.parametrize("out", [SE3, E3], ids=["se3", "e3"])
def test_gate_channel_contract(out):
    g = Gate(out)
    assert g.irreps_in.num_scalars() == out.num_scalars() + out.non_scalars().num_channels
    y = gate(IrrepsFeature.random(g.irreps_in, 2, np.random.default_rng(6)))
    assert y.irreps.num_scalars() == out.num_scalars()
    assert y.irreps.non_scalars() == out.non_scalars()


def test_e3_gate_treats_pseudoscalars_as_gated():
    out = Irreps("[(2,0,e),(3,0,o)]")
    assert str(gate_input_irreps(out)) == "[(5,0,e),(3,0,o)]"


@pytest.mark.parametrize("out", [SE3, E3], ids=["se3", "e3"])
def test_gate_equivariance(out):
    rng = np.random.default_rng(7)
    x = IrrepsFeature.random(gate_input_irreps(out), 3, rng)
    y = gate(x).numpy()
    for _ in range(20):
        R = rotation_matrix(random_quaternion(rng))
        assert np.max(np.abs(gate(_rot(x, R)).numpy() - transform_array(out, y, R))) <= 1e-9
    if out.has_parity:
        y_i = gate(_rot(x, None, True)).numpy()
        assert np.max(np.abs(y_i - transform_array(out, y, None, True))) <= 1e-9


# ---------------------------------------------------------------------------
# depth-wise tensor product plans


def test_plan_ten_path_example():
    plan = build_dtp_plan("[(2,0),(2,1)]", "[(1,0),(1,1)]", 1)
    assert plan.weight_count == 10
    got = [(p.c1, p.l1, p.l2, p.l3) for p in plan.paths]
    expected = []
    for c1, l1 in enumerate([0, 0, 1, 1]):
        if l1 == 0:
            expected += [(c1, 0, 0, 0), (c1, 0, 1, 1)]
        else:
            expected += [(c1, 1, 0, 1), (c1, 1, 1, 0), (c1, 1, 1, 1)]
    assert got == expected
    assert [p.slot for p in plan.paths] == list(range(10))


def test_plan_scalar_pair_has_one_path():
    for lmax in range(4):
        plan = build_dtp_plan("[(1,0)]", "[(1,0)]", lmax)
        assert [(p.l1, p.l2, p.l3) for p in plan.paths] == [(0, 0, 0)]


def test_plan_e3_odd_times_odd_is_even():
    plan = build_dtp_plan("[(1,1,o)]", "[(1,1,o)]", 2)
    assert {p.p3 for p in plan.paths} == {Parity.e}
    assert str(plan.irreps_out) == "[(1,0,e),(1,1,e),(1,2,e)]"


def test_plan_rejects_mixed_modes():
    with pytest.raises(LayoutError):
        build_dtp_plan("[(1,0,e)]", "[(1,0)]", 1)


def _brute_force_paths(in1, in2, lmax):
    # independent enumeration over channel pairs and all candidate output degrees
    d1 = [L for m, L in in1 for _ in range(m)]
    d2 = [L for m, L in in2 for _ in range(m)]
    return sum(1 for a in d1 for b in d2 for l3 in range(0, 2 * 4) if l3 <= lmax and abs(a - b) <= l3 <= a + b)


def test_plan_counts_match_brute_force_on_50_pairs():
    rng = np.random.default_rng(8)
    for _ in range(50):
        in1 = [(int(rng.integers(1, 4)), int(L)) for L in rng.choice(4, size=rng.integers(1, 4), replace=False)]
        in2 = [(int(rng.integers(1, 3)), int(L)) for L in rng.choice(4, size=rng.integers(1, 4), replace=False)]
        lmax = int(rng.integers(0, 4))
        plan = build_dtp_plan(in1, in2, lmax)
        assert plan.weight_count == _brute_force_paths(in1, in2, lmax)
        assert all(abs(p.l1 - p.l2) <= p.l3 <= min(p.l1 + p.l2, lmax) for p in plan.paths)


def test_plan_is_depthwise():
    # every output channel traces back to exactly one input-1 channel
    plan = build_dtp_plan(SE3, "[(1,0),(1,1),(1,2)]", 2)
    rng = np.random.default_rng(9)
    x = IrrepsFeature.random(SE3, 1, rng)
    y = IrrepsFeature.random("[(1,0),(1,1),(1,2)]", 1, rng)
    w = rng.standard_normal(plan.weight_count)
    with ad.Tape() as tape:
        xt = tape.leaf(x.numpy())
        out = apply_dtp(plan, IrrepsFeature(SE3, xt), y, w)
    chan_of_col = np.concatenate([np.full(b.dim, c) for c, b in enumerate(
        [type(b)(1, b.L, b.p) for b in SE3 for _ in range(b.mul)])])
    for col in range(plan.irreps_out.dim):
        g = ad.backward(tape, ad.slice_axis(out.data, col, col + 1, axis=1).sum())[xt][0]
        assert len(set(chan_of_col[np.abs(g) > 0])) <= 1


def test_apply_dtp_scalar_product():
    plan = build_dtp_plan("[(1,0)]", "[(1,0)]", 0)
    y = apply_dtp(plan, IrrepsFeature("[(1,0)]", [[2.0]]), IrrepsFeature("[(1,0)]", [[3.0]]), np.array([1.0]))
    assert y.numpy().tolist() == [[6.0]]


def test_apply_dtp_dot_path_matches_dense_cg():
    plan = build_dtp_plan("[(1,1)]", "[(1,1)]", 0)
    rng = np.random.default_rng(10)
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    out = apply_dtp(plan, IrrepsFeature("[(1,1)]", a[None]), IrrepsFeature("[(1,1)]", b[None]), np.array([1.5]))
    dense = 1.5 * np.einsum("i,j,ijk->k", a, b, clebsch_gordan(1, 1, 0))
    np.testing.assert_allclose(out.numpy()[0], dense, atol=1e-15)
    assert out.numpy()[0, 0] == pytest.approx(1.5 * np.dot(a, b) / math.sqrt(3.0), abs=1e-14)


def test_apply_dtp_layout_errors():
    plan = build_dtp_plan("[(1,1)]", "[(1,1)]", 1)
    x = IrrepsFeature.zeros("[(1,1)]", 2)
    with pytest.raises(LayoutError):
        apply_dtp(plan, x, IrrepsFeature.zeros("[(1,0)]", 2), np.ones(plan.weight_count))
    with pytest.raises(LayoutError):
        apply_dtp(plan, x, x, np.ones(plan.weight_count + 1))
    with pytest.raises(LayoutError):
        apply_dtp(plan, x, IrrepsFeature.zeros("[(1,1)]", 3), np.ones(plan.weight_count))


@pytest.mark.parametrize("in1, in2", [(SE3, "[(1,0),(1,1),(1,2)]"), (E3, "[(1,0,e),(1,1,o),(1,2,e)]")],
                         ids=["se3", "e3"])
def test_apply_dtp_equivariance(in1, in2):
    rng = np.random.default_rng(11)
    plan = build_dtp_plan(in1, in2, 2)
    x = IrrepsFeature.random(in1, 3, rng)
    y = IrrepsFeature.random(in2, 3, rng)
    w = rng.standard_normal((3, plan.weight_count))
    out = apply_dtp(plan, x, y, w).numpy()
    for _ in range(20):
        R = rotation_matrix(random_quaternion(rng))
        o_r = apply_dtp(plan, _rot(x, R), _rot(y, R), w).numpy()
        assert np.max(np.abs(o_r - transform_array(plan.irreps_out, out, R))) <= 1e-9
    if plan.irreps_out.has_parity:
        o_i = apply_dtp(plan, _rot(x, None, True), _rot(y, None, True), w).numpy()
        assert np.max(np.abs(o_i - transform_array(plan.irreps_out, out, None, True))) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_apply_dtp_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    plan = build_dtp_plan(SE3, "[(1,0),(1,1)]", 2)
    x = IrrepsFeature.random(SE3, 2, rng)
    y = IrrepsFeature.random("[(1,0),(1,1)]", 2, rng)
    w1, w2 = rng.standard_normal(plan.weight_count), rng.standard_normal(plan.weight_count)
    lhs = apply_dtp(plan, x, y, w1 + w2).numpy()
    rhs = apply_dtp(plan, x, y, w1).numpy() + apply_dtp(plan, x, y, w2).numpy()
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_shared_and_per_row_weights_agree():
    rng = np.random.default_rng(12)
    plan = build_dtp_plan("[(2,0),(2,1)]", "[(1,0),(1,1)]", 1)
    x = IrrepsFeature.random(plan.irreps_in1, 4, rng)
    y = IrrepsFeature.random(plan.irreps_in2, 4, rng)
    w = rng.standard_normal(plan.weight_count)
    np.testing.assert_allclose(apply_dtp(plan, x, y, w).numpy(), apply_dtp(plan, x, y, np.tile(w, (4, 1))).numpy(),
                               atol=1e-15)
