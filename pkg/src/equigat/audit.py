"""Invariant suites: equivariance, gradient checks, path enumeration, forces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, EquivariantGraphAttention, RadialMLP, segment_softmax
from .graph import AtomisticGraph, build_graph, radial_basis
from .irreps import Irreps, IrrepsFeature, LayoutError, kind_label, transform_array
from .model import EquivariantTransformer, ModelConfig, build_model
from .operations import (
    apply_dtp,
    build_dtp_plan,
    equivariant_layer_norm,
    equivariant_linear,
    gate,
    gate_input_irreps,
)
from .so3 import poly_eval, random_quaternion, rotation_matrix, sh_polynomial, spherical_harmonics

__all__ = [
    "Check",
    "AuditReport",
    "audit_geometry",
    "equivariance_audit",
    "gradcheck_audit",
    "paths_audit",
    "forces_audit",
    "count_paths_brute_force",
    "check_gate_channels",
    "RULE_CASES",
    "COMPOSITE_CASES",
]

EQUIVARIANCE_TOL = 1e-8
GRAD_TOL = 1e-4
GRAD_STEP = 1e-4


@dataclass
class Check:
    name: str
    value: float
    tol: float
    exact: bool = False
    note: str = ""

    @property
    def passed(self) -> bool:
        if self.exact:
            return self.value == 0.0
        return bool(self.value <= self.tol)

    def line(self) -> str:
        bound = "== 0" if self.exact else f"<= {self.tol:.0e}"
        status = "pass" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        return f"{status}  {self.name:<40s} {self.value:.3e}  {bound}{extra}"


@dataclass
class AuditReport:
    title: str
    checks: list[Check] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, name: str, value: float, tol: float, exact: bool = False, note: str = "") -> Check:
        c = Check(name, float(value), tol, exact, note)
        self.checks.append(c)
        return c

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def text(self) -> str:
        lines = [f"# {self.title}"] + [c.line() for c in self.checks] + [f"# {n}" for n in self.notes]
        lines.append(f"# {'ALL PASS' if self.passed else f'{len(self.failures())} FAILED'}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# geometry helpers


def audit_geometry(rng: np.random.Generator, n_atoms: int = 5, species_count: int = 10,
                   cutoff: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Species and dyadic positions (multiples of 1/32 A), all pairs closer than the cutoff.

    Dyadic coordinates make adding a dyadic translation exact in floating point,
    so translated and original edge vectors are bit-identical.
    """
    span = min(1.5, cutoff / (2 * math.sqrt(3)))
    top = max(species_count, 2)
    while True:
        pos = rng.integers(-int(span * 32), int(span * 32) + 1, size=(n_atoms, 3)) / 32.0
        d = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
        off = d[~np.eye(n_atoms, dtype=bool)]
        if off.min() > 0.7 and off.max() <= cutoff:
            break
    species = rng.integers(1, top, size=n_atoms) if top > 1 else np.zeros(n_atoms, dtype=int)
    return species, pos


def _rotate_feature(x: IrrepsFeature, R, inversion=False) -> IrrepsFeature:
    return IrrepsFeature(x.irreps, transform_array(x.irreps, x.numpy(), R, inversion))


def _err(a: IrrepsFeature | np.ndarray, b: np.ndarray) -> float:
    a = a.numpy() if isinstance(a, IrrepsFeature) else np.asarray(a)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


# ---------------------------------------------------------------------------
# gate channel-count contract


def check_gate_channels(gate_fn: Callable[[IrrepsFeature], IrrepsFeature], irreps_out,
                        rng: np.random.Generator | None = None) -> tuple[bool, str]:
    """Does ``gate_fn`` keep exactly ``C_0`` scalars and every non-scalar block?"""
    rng = rng or np.random.default_rng(0)
    irreps_out = Irreps(irreps_out)
    x = IrrepsFeature.random(gate_input_irreps(irreps_out), 2, rng)
    try:
        y = gate_fn(x)
    except LayoutError as exc:
        return False, f"gate raised {exc}"
    ok = y.irreps.num_scalars() == irreps_out.num_scalars() and y.irreps.non_scalars() == irreps_out.non_scalars()
    return ok, f"gate output {y.irreps}, expected {irreps_out}"


# ---------------------------------------------------------------------------
# equivariance


def equivariance_audit(config: ModelConfig, seed: int = 0, rotations: int = 20,
                       gate_fn: Callable[[IrrepsFeature], IrrepsFeature] = gate,
                       tol: float = EQUIVARIANCE_TOL) -> AuditReport:
    """Per-op and end-to-end equivariance of a randomly initialized model.

    Rotations: every op and the energy/forces/attention weights.  Translation:
    the energy must not change at all.  Inversion (E(3) layouts only): every
    block picks up its parity sign.  Permutation: energy unchanged, forces
    permuted.
    """
    config = replace(config, attn_dropout=0.0)
    report = AuditReport(f"equivariance  mode={config.mode}  attn={config.attn_kind}  messages={config.message_kind}")
    rng = np.random.default_rng(seed)
    model, store = build_model(config, seed)
    params = store.tensors()
    e3 = config.mode == "e3"
    species, pos = audit_geometry(rng, species_count=config.species_count, cutoff=config.cutoff)
    graph = build_graph(species, pos, config.cutoff)

    d_embed = model.d_embed
    block = model.blocks[0]
    attn = block.attn
    x = IrrepsFeature.random(d_embed, graph.num_atoms, rng)
    sh, basis = model.geometry(graph)
    dtp_w = rng.standard_normal((graph.num_edges, attn.dtp.weight_count))
    x_edge = IrrepsFeature.random(d_embed, graph.num_edges, rng)
    gate_in = IrrepsFeature.random(block.ffn.gate.irreps_in, graph.num_atoms, rng)

    def ops(g: AtomisticGraph, xs: IrrepsFeature, xe: IrrepsFeature, gi: IrrepsFeature):
        sh_g, basis_g = model.geometry(g)
        out = {
            "spherical_harmonics": sh_g,
            "equivariant_linear": block.ffn.lin1(params, xs),
            "equivariant_layer_norm": block.norm1(params, xs),
            "gate": gate_fn(gi),
            "depthwise_tensor_product": apply_dtp(attn.dtp, xe, sh_g, dtp_w),
            "attention_block": attn(params, xs, g, sh_g, basis_g),
            "edge_degree_embedding": model.edge_degree_embedding(params, g),
            "feed_forward": block.ffn(params, xs),
            "transformer_block": block(params, xs, g, sh_g, basis_g),
        }
        out["attention_weights"] = attn(params, block.norm1(params, xs), g, sh_g, basis_g, return_attention=True)[1]
        return out

    ref = ops(graph, x, x_edge, gate_in)
    energy, forces = model.energy_and_forces(params, graph)
    e0, f0 = energy.data, forces.data
    scale = max(float(np.max(np.abs(e0))), 1.0)

    worst: dict[str, float] = {k: 0.0 for k in ref}
    worst["energy (relative)"] = 0.0
    worst["forces"] = 0.0
    for _ in range(rotations):
        R = rotation_matrix(random_quaternion(rng))
        g_rot = build_graph(species, pos @ R.T, config.cutoff)
        rot = ops(g_rot, _rotate_feature(x, R), _rotate_feature(x_edge, R), _rotate_feature(gate_in, R))
        for name, val in rot.items():
            if name == "attention_weights":
                worst[name] = max(worst[name], _err(val.data, ref[name].data))
            else:
                worst[name] = max(worst[name], _err(val, transform_array(val.irreps, ref[name].numpy(), R)))
        e_r, f_r = model.energy_and_forces(params, g_rot)
        worst["energy (relative)"] = max(worst["energy (relative)"], float(np.max(np.abs(e_r.data - e0))) / scale)
        worst["forces"] = max(worst["forces"], _err(f_r.data, f0 @ R.T))
    for name, val in worst.items():
        report.add(f"rotation/{name}", val, tol)

    sums = ad.segment_sum(ref["attention_weights"], graph.dst, graph.num_atoms).data
    has_nb = graph.degrees() > 0
    report.add("attention weights sum to 1", float(np.max(np.abs(sums[has_nb] - 1.0))) if has_nb.any() else 0.0, 1e-12)

    # translation: dyadic shift keeps every edge vector bit-identical
    shift = rng.integers(-256, 257, size=3) / 64.0
    e_t = model(params, build_graph(species, pos + shift, config.cutoff)).data
    report.add("translation/energy change", float(np.max(np.abs(e_t - e0))), 0.0, exact=True)
    shift_any = rng.standard_normal(3) * 3.0
    e_t2 = model(params, build_graph(species, pos + shift_any, config.cutoff)).data
    report.add("translation/energy (non-dyadic shift)", float(np.max(np.abs(e_t2 - e0))) / scale, 1e-12)
    report.add("net force", float(np.max(np.abs(f0.sum(axis=0)))), tol)

    if e3:
        g_inv = build_graph(species, -pos, config.cutoff)
        inv = ops(g_inv, _rotate_feature(x, None, True), _rotate_feature(x_edge, None, True),
                  _rotate_feature(gate_in, None, True))
        worst_inv = 0.0
        for name, val in inv.items():
            if name == "attention_weights":
                err = _err(val.data, ref[name].data)
            else:
                err = _err(val, transform_array(val.irreps, ref[name].numpy(), None, True))
            worst_inv = max(worst_inv, err)
            report.add(f"inversion/{name}", err, tol)
        e_i, f_i = model.energy_and_forces(params, g_inv)
        report.add("inversion/energy (relative)", float(np.max(np.abs(e_i.data - e0))) / scale, tol)
        report.add("inversion/forces", _err(f_i.data, -f0), tol)
    else:
        report.notes.append("inversion not asserted: SE(3) layouts carry no parity")

    perm = rng.permutation(graph.num_atoms)
    e_p, f_p = model.energy_and_forces(params, build_graph(species[perm], pos[perm], config.cutoff))
    report.add("permutation/energy", float(np.max(np.abs(e_p.data - e0))), 1e-10)
    report.add("permutation/forces", _err(f_p.data, f0[perm]), 1e-10)

    ok, msg = check_gate_channels(gate_fn, block.ffn.gate.irreps_out, rng)
    report.add("gate channel count", 0.0 if ok else 1.0, 0.0, exact=True, note=msg if not ok else "")
    return report


# ---------------------------------------------------------------------------
# gradient checks: one random instance generator per registered rule


def _leaf(data, name: str) -> ad.Tensor:
    return ad.Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _away_from(rng, shape, points=(0.0,), gap=0.2, lo=-2.0, hi=2.0) -> np.ndarray:
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-300) * gap * (1 + rng.uniform(size=near.sum()))
    return x


def _case(fn_of_leaves: Callable[..., ad.Tensor], leaves: list[ad.Tensor], rng) -> tuple[Callable, list]:
    with ad.no_record():
        shape = fn_of_leaves(*leaves).shape
    w = rng.standard_normal(shape)
    return (lambda: ad.sum_(fn_of_leaves(*leaves) * w)), leaves


def _unary(op, **kw):
    def make(rng):
        x = _leaf(kw.get("sample", lambda r: r.uniform(-2, 2, (3, 4)))(rng), "x")
        return _case(op, [x], rng)

    return make


def _binary(op, denom=False):
    def make(rng):
        a = _leaf(rng.uniform(-2, 2, (3, 4)), "a")
        bdata = rng.uniform(0.5, 2.0, (4,)) * rng.choice([-1, 1], 4) if denom else rng.uniform(-2, 2, (4,))
        b = _leaf(bdata, "b")
        return _case(op, [a, b], rng)

    return make


def _poly_case(rng):
    exps, coefs = sh_polynomial(2)
    v = _leaf(rng.standard_normal((4, 3)), "vectors")
    return _case(lambda t: poly_eval(t, exps, coefs), [v], rng)


def _einsum_case(rng):
    a = _leaf(rng.standard_normal((2, 3, 4)), "a")
    b = _leaf(rng.standard_normal((3, 5)), "b")
    c = _leaf(rng.standard_normal((5,)), "c")
    return _case(lambda x, y, z: ad.einsum("abc,bd,d->acd", x, y, z), [a, b, c], rng)


def _take_case(rng):
    x = _leaf(rng.standard_normal((4, 3)), "x")
    idx = np.array([0, 2, 2, 3, 0, 1])
    return _case(lambda t: ad.take(t, idx, axis=0), [x], rng)


def _segment_case(rng):
    x = _leaf(rng.standard_normal((6, 2, 3)), "x")
    idx = np.array([0, 2, 2, 3, 0, 1])
    return _case(lambda t: ad.segment_sum(t, idx, 5, axis=0), [x], rng)


def _concat_case(rng):
    a = _leaf(rng.standard_normal((2, 3)), "a")
    b = _leaf(rng.standard_normal((2, 2)), "b")
    return _case(lambda x, y: ad.concat([x, y], axis=1), [a, b], rng)


RULE_CASES: dict[str, Callable[[np.random.Generator], tuple[Callable, list]]] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, denom=True),
    "neg": _unary(ad.neg),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, sample=lambda r: r.uniform(0.3, 3.0, (3, 4))),
    "sqrt": _unary(ad.sqrt, sample=lambda r: r.uniform(0.3, 3.0, (3, 4))),
    "sin": _unary(ad.sin),
    "cos": _unary(ad.cos),
    "sigmoid": _unary(ad.sigmoid),
    "silu": _unary(ad.silu),
    "leaky_relu": _unary(lambda t: ad.leaky_relu(t, 0.2), sample=lambda r: _away_from(r, (3, 4))),
    "abs": _unary(ad.abs_, sample=lambda r: _away_from(r, (3, 4))),
    "power": _unary(lambda t: ad.power(t, 3)),
    "clip_min": _unary(lambda t: ad.clip_min(t, 0.1), sample=lambda r: _away_from(r, (3, 4), (0.1,))),
    "sum": _unary(lambda t: ad.sum_(t, axis=1, keepdims=True)),
    "sum_to": _unary(lambda t: ad.sum_to(t, (1, 4))),
    "broadcast_to": _unary(lambda t: ad.broadcast_to(t, (2, 3, 4))),
    "reshape": _unary(lambda t: ad.reshape(t, (2, 6))),
    "transpose": _unary(lambda t: ad.transpose(t, (1, 0))),
    "einsum": _einsum_case,
    "take": _take_case,
    "segment_sum": _segment_case,
    "concat": _concat_case,
    "slice": _unary(lambda t: ad.slice_axis(t, 1, 3, axis=1)),
    "pad": _unary(lambda t: ad.pad_axis(t, 1, 2, axis=0)),
    "poly": _poly_case,
}


# composite operations whose backward is assembled from the rules above


def _small_irreps(rng, mode: str) -> tuple[Irreps, Irreps]:
    if mode == "e3":
        return Irreps("[(4,0,e),(2,0,o),(2,1,o),(2,1,e),(2,2,e)]"), Irreps("[(1,0,e),(1,1,o),(1,2,e)]")
    return Irreps("[(4,0),(2,1),(2,2)]"), Irreps("[(1,0),(1,1),(1,2)]")


def _composite_cases(mode: str) -> dict[str, Callable]:
    def linear(rng):
        ir, _ = _small_irreps(rng, mode)
        x = _leaf(rng.standard_normal((3, ir.dim)), "x")
        ws = {f"w{k}": _leaf(rng.standard_normal((ir.count(k), ir.count(k))), f"w.{k[0]}") for k in ir.kinds()}
        b = _leaf(rng.standard_normal(ir.num_scalars()), "bias")
        kinds = ir.kinds()

        def f(x, b, *w):
            weights = {kind_label(k): wk for k, wk in zip(kinds, w)}
            return equivariant_linear(IrrepsFeature(ir, x), weights, ir, bias=b).data

        return _case(f, [x, b, *ws.values()], rng)

    def layer_norm(rng):
        ir, _ = _small_irreps(rng, mode)
        x = _leaf(rng.standard_normal((3, ir.dim)), "x")
        g = _leaf(rng.uniform(0.5, 1.5, ir.num_channels), "gamma")
        b = _leaf(rng.standard_normal(ir.num_scalars()), "beta")
        return _case(lambda x, g, b: equivariant_layer_norm(IrrepsFeature(ir, x), g, b).data, [x, g, b], rng)

    def gate_case(rng):
        ir, _ = _small_irreps(rng, mode)
        gi = gate_input_irreps(ir)
        x = _leaf(rng.standard_normal((3, gi.dim)), "x")
        return _case(lambda x: gate(IrrepsFeature(gi, x)).data, [x], rng)

    def dtp(rng):
        ir, sh = _small_irreps(rng, mode)
        plan = build_dtp_plan(ir, sh, 2)
        x = _leaf(rng.standard_normal((3, ir.dim)), "x")
        y = _leaf(rng.standard_normal((3, sh.dim)), "y")
        w = _leaf(rng.standard_normal((3, plan.weight_count)), "w")
        return _case(lambda x, y, w: apply_dtp(plan, IrrepsFeature(ir, x), IrrepsFeature(sh, y), w).data, [x, y, w], rng)

    def sph(rng):
        v = _leaf(rng.standard_normal((4, 3)), "vectors")
        return _case(lambda v: spherical_harmonics((0, 1, 2, 3), v), [v], rng)

    def gaussian(rng):
        d = _leaf(rng.uniform(0.5, 4.5, 5), "d")
        return _case(lambda d: radial_basis(d, "gaussian", 8, 5.0), [d], rng)

    def bessel(rng):
        d = _leaf(rng.uniform(0.5, 4.5, 5), "d")
        return _case(lambda d: radial_basis(d, "bessel", 8, 5.0), [d], rng)

    def radial(rng):
        mlp = RadialMLP("r", 6, 8, 2, 5)
        params = {k: _leaf(v + 0.1 * rng.standard_normal(v.shape), k) for k, v in mlp.init(rng).items()}
        basis = _leaf(rng.standard_normal((4, 6)), "basis")
        names = list(params)

        def f(b, *ps):
            return mlp(dict(zip(names, ps)), b)

        return _case(f, [basis, *params.values()], rng)

    def softmax(rng):
        z = _leaf(rng.standard_normal((6, 2)), "logits")
        idx = np.array([0, 0, 1, 2, 2, 2])
        return _case(lambda z: segment_softmax(z, idx, 4), [z], rng)

    def attention(rng):
        ir, sh_ir = _small_irreps(rng, mode)
        head = Irreps("[(2,0,e),(1,0,o),(1,1,o),(1,1,e),(1,2,e)]") if mode == "e3" else Irreps("[(2,0),(1,1),(1,2)]")
        species, pos = audit_geometry(rng, 4)
        graph = build_graph(species, pos, 5.0)
        out = {}
        for ak in ("mlp", "dot"):
            for mk in ("linear", "nonlinear"):
                cfg = AttentionConfig(ir, sh_ir, head, 2, 2, ak, mk, basis_count=6, radial_hidden=8)
                out[f"{ak}/{mk}"] = cfg
        return graph, out

    cases = {
        "equivariant_linear": linear,
        "equivariant_layer_norm": layer_norm,
        "gate": gate_case,
        "depthwise_tensor_product": dtp,
        "spherical_harmonics": sph,
        "radial_basis/gaussian": gaussian,
        "radial_basis/bessel": bessel,
        "radial_mlp": radial,
        "segment_softmax": softmax,
    }

    def attention_variant(key):
        def make(rng):
            graph, cfgs = attention(rng)
            block = EquivariantGraphAttention("a", cfgs[key])
            params = {k: _leaf(v + 0.05 * rng.standard_normal(v.shape), k) for k, v in block.init(rng).items()}
            names = list(params)
            ir = cfgs[key].irreps_node
            x = _leaf(rng.standard_normal((graph.num_atoms, ir.dim)), "x")
            pos = _leaf(graph.positions.data, "positions")
            sh_ls = tuple(b.L for b in cfgs[key].irreps_sh)

            def f(x, pos, *ps):
                g = graph.with_positions(pos)
                vec = g.edge_vectors()
                sh = IrrepsFeature(cfgs[key].irreps_sh, spherical_harmonics(sh_ls, vec))
                basis = radial_basis(g.edge_lengths(vec), "gaussian", 6, 5.0)
                return block(dict(zip(names, ps)), IrrepsFeature(ir, x), g, sh, basis).data

            return _case(f, [x, pos, *params.values()], rng)

        return make

    for key in ("mlp/linear", "mlp/nonlinear", "dot/linear", "dot/nonlinear"):
        cases[f"attention_block/{key}"] = attention_variant(key)
    return cases


COMPOSITE_CASES = _composite_cases("se3")


def _second_order(fn: Callable[[], ad.Tensor], leaves: list[ad.Tensor], rng) -> Callable[[], ad.Tensor]:
    """Scalar ``sum_k <d fn / d leaf_k, u_k>``; checking its gradient exercises double backward."""
    us = [rng.standard_normal(leaf.shape) for leaf in leaves]

    def g():
        tape = ad.current_tape()
        if tape is not None and tape.recording:
            grads = ad.backward(tape, fn(), create_graph=True, wrt=leaves)
        else:
            with ad.Tape() as local:
                y = fn()
            grads = ad.backward(local, y, wrt=leaves)
        total = None
        for leaf, u in zip(leaves, us):
            term = ad.sum_(grads.tensor(leaf) * u)
            total = term if total is None else total + term
        return total

    return g


def _model_leaves(store) -> dict[str, ad.Tensor]:
    return {k: _leaf(v, k) for k, v in store.items()}


def gradcheck_audit(config: ModelConfig, seed: int = 0, instances: int = 3, entries: int = 2,
                    directions: int = 1, second_order: bool = True, end_to_end: bool = True,
                    rules: bool = True, h: float = GRAD_STEP, tol: float = GRAD_TOL) -> AuditReport:
    """Central finite differences against the tape.

    Every registered rule and every composite op is checked on ``instances``
    random inputs (and through double backward when ``second_order``).  End
    to end, the energy is checked against every parameter array (``entries``
    sampled coordinates plus ``directions`` random directional probes each) and
    against all position coordinates; the energy + force loss is checked too.
    Composite and end-to-end probes retry at ``h / 10`` across kinks; rule
    checks do not.
    """
    config = replace(config, attn_dropout=0.0)
    report = AuditReport(f"gradcheck  mode={config.mode}  attn={config.attn_kind}  messages={config.message_kind}  h={h:g}")
    rng = np.random.default_rng(seed)
    cases = {}
    if rules:
        missing = sorted(set(ad.RULES) - set(RULE_CASES))
        report.add("rules without a check", float(len(missing)), 0.0, exact=True, note=", ".join(missing))
        cases.update({f"rule/{k}": v for k, v in RULE_CASES.items()})
    cases.update({f"op/{k}": v for k, v in _composite_cases(config.mode).items()})
    for name, make in cases.items():
        worst = 0.0
        worst2 = 0.0
        for _ in range(instances):
            fn, leaves = make(rng)
            rep = ad.grad_check(fn, leaves, h=h, tol=tol, rng=rng, max_entries=12, directions=1,
                                kink_retry=name.startswith("op/"))
            worst = max(worst, rep.max_error)
            if second_order and name.startswith("rule/"):
                g = _second_order(fn, leaves, rng)
                worst2 = max(worst2, ad.grad_check(g, leaves, h=h, tol=tol, rng=rng, max_entries=12, directions=1).max_error)
        report.add(name, worst, tol)
        if second_order and name.startswith("rule/"):
            report.add(f"{name} (double backward)", worst2, tol)

    if end_to_end:
        model, store = build_model(config, seed)
        species, pos = audit_geometry(rng, species_count=config.species_count, cutoff=config.cutoff)
        graph = build_graph(species, pos, config.cutoff)
        params = _model_leaves(store)
        positions = _leaf(pos, "positions")

        def energy():
            return ad.sum_(model(params, graph.with_positions(positions)))

        rep = ad.grad_check(energy, [positions, *params.values()], h=h, tol=tol, rng=rng,
                            max_entries=entries, directions=directions, kink_retry=True)
        report.add("energy/positions", rep.errors["positions"], tol)
        param_errors = {k: v for k, v in rep.errors.items() if k != "positions"}
        worst_name = max(param_errors, key=param_errors.get)
        report.add(f"energy/parameters ({len(param_errors)} arrays)", param_errors[worst_name], tol,
                   note=f"worst {worst_name}")

        # forces from the tape against finite differences of the energy, all coordinates
        _, forces = model.energy_and_forces(params, graph)
        fd = _fd_forces(model, params, graph, forces.data, h, tol)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(forces.data)), 1e-6)
        report.add("forces vs -dE/dr (finite differences)", float(np.max(np.abs(forces.data - fd)) / scale), tol)
        report.add("net force", float(np.max(np.abs(forces.data.sum(axis=0)))), EQUIVARIANCE_TOL)

        f_target = rng.standard_normal(pos.shape)

        def force_loss():
            e, f = model.energy_and_forces(params, graph.with_positions(positions), create_graph=True)
            return ad.sum_(e) + ad.sum_((f - f_target) * (f - f_target)) * 0.5

        rep = ad.grad_check(force_loss, [positions, *params.values()], h=h, tol=tol, rng=rng,
                            max_entries=1, directions=directions, kink_retry=True)
        report.add("energy+force loss (double backward)", rep.max_error, tol,
                   note=f"worst {max(rep.errors, key=rep.errors.get)}")
    return report


# ---------------------------------------------------------------------------
# paths


def count_paths_brute_force(irreps_in1, irreps_in2, lmax: int) -> int:
    """Count depth-wise paths by scanning every output degree for every channel pair."""
    in1, in2 = Irreps(irreps_in1), Irreps(irreps_in2)
    degrees1 = [b.L for b in in1 for _ in range(b.mul)]
    degrees2 = [b.L for b in in2 for _ in range(b.mul)]
    total = 0
    for l1 in degrees1:
        for l2 in degrees2:
            for l3 in range(lmax + 1):
                if abs(l1 - l2) <= l3 <= l1 + l2:
                    total += 1
    return total


def paths_audit(irreps_in1, irreps_in2, lmax: int, verbose: bool = True) -> tuple[AuditReport, str]:
    """Enumerate a DTP plan and compare its size with the brute-force count."""
    plan = build_dtp_plan(irreps_in1, irreps_in2, lmax)
    report = AuditReport(f"paths  {plan.irreps_in1} x {plan.irreps_in2}  lmax={lmax}")
    expected = count_paths_brute_force(irreps_in1, irreps_in2, lmax)
    report.add("path count vs brute force", float(abs(plan.weight_count - expected)), 0.0, exact=True,
               note=f"plan {plan.weight_count}, brute force {expected}")
    parity_bad = 0
    if plan.irreps_in1.has_parity:
        ch1 = [b.p for b in plan.irreps_in1 for _ in range(b.mul)]
        ch2 = [b.p for b in plan.irreps_in2 for _ in range(b.mul)]
        parity_bad = sum(p.p3 != ch1[p.c1] * ch2[p.c2] for p in plan.paths)
    report.add("parity rule violations", float(parity_bad), 0.0, exact=True)
    text = plan.describe() if verbose else plan.describe().splitlines()[0]
    return report, text


def model_plans(model: EquivariantTransformer) -> list[tuple[str, object]]:
    plans = [("edge_degree_embedding", model.deg_dtp)]
    for n, block in enumerate(model.blocks):
        for k, plan in enumerate(block.attn.tensor_products):
            plans.append((f"block{n}.attn.dtp{k + 1}", plan))
    return plans


# ---------------------------------------------------------------------------
# forces


def _fd_forces(model, params, graph: AtomisticGraph, forces: np.ndarray, h: float, tol: float) -> np.ndarray:
    """``-dE/dr`` by central differences, one coordinate at a time, retrying across kinks."""
    pos = graph.positions.data
    fd = np.zeros_like(pos)
    for idx in np.ndindex(pos.shape):

        def energy_at(step, idx=idx):
            shifted = pos.copy()
            shifted[idx] += step
            with ad.no_record():
                return float(ad.sum_(model(params, graph.with_positions(shifted))).data)

        fd[idx] = -ad.central_difference(energy_at, h, -forces[idx], tol, kink_retry=True)
    return fd


def forces_audit(config: ModelConfig, seed: int = 0, h: float = GRAD_STEP, tol: float = GRAD_TOL) -> AuditReport:
    """Tape forces against central differences of the energy (retrying across kinks), net force and rotation."""
    config = replace(config, attn_dropout=0.0)
    report = AuditReport(f"forces  mode={config.mode}  h={h:g}")
    rng = np.random.default_rng(seed)
    model, store = build_model(config, seed)
    params = store.tensors()
    species, pos = audit_geometry(rng, species_count=config.species_count, cutoff=config.cutoff)
    graph = build_graph(species, pos, config.cutoff)
    _, forces = model.energy_and_forces(params, graph)
    fd = _fd_forces(model, params, graph, forces.data, h, tol)
    scale = max(np.max(np.abs(fd)), np.max(np.abs(forces.data)), 1e-6)
    report.add("forces vs finite differences (relative)", float(np.max(np.abs(forces.data - fd)) / scale), tol)
    report.add("net force", float(np.max(np.abs(forces.data.sum(axis=0)))), EQUIVARIANCE_TOL)
    R = rotation_matrix(random_quaternion(rng))
    _, f_rot = model.energy_and_forces(params, build_graph(species, pos @ R.T, config.cutoff))
    report.add("force equivariance", _err(f_rot.data, forces.data @ R.T), 1e-7)
    return report
