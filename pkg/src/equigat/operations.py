"""Point-wise equivariant operations on irreps features.

Functional forms (``equivariant_linear``, ``equivariant_layer_norm``, ``gate``,
``build_dtp_plan`` / ``apply_dtp``) take explicit weights.  The small module
classes at the bottom own parameter names, shapes and initialization; they
read their weights from a flat ``{name: Tensor}`` mapping at call time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .irreps import Block, Irreps, IrrepsFeature, LayoutError, is_scalar_kind, kind_label
from .so3 import Parity, clebsch_gordan

__all__ = [
    "equivariant_linear",
    "equivariant_layer_norm",
    "gate",
    "gate_input_irreps",
    "Path",
    "TensorProductPlan",
    "build_dtp_plan",
    "apply_dtp",
    "Linear",
    "LayerNorm",
    "Gate",
    "DepthwiseTensorProduct",
    "LN_EPS",
]

LN_EPS = 1e-3


# ---------------------------------------------------------------------------
# linear


def _scalar_kind(irreps: Irreps):
    return (0, Parity.e) if irreps.has_parity else (0, None)


def equivariant_linear(
    x: IrrepsFeature,
    weights: Mapping[str, ad.Tensor],
    irreps_out,
    bias=None,
    strict: bool = True,
) -> IrrepsFeature:
    """Mix channels of each block kind separately.

    ``weights[kind_label]`` has shape ``(C_out, C_in)`` for that kind; the
    same weights act on all ``2L+1`` orders.  ``bias`` (length = number of
    scalar output channels) is added to scalar channels only.  With
    ``strict=False`` output kinds absent from the input are zero.
    """
    irreps_out = Irreps(irreps_out)
    per_kind = {}
    for kind in irreps_out.kinds():
        c_out = irreps_out.count(kind)
        if x.irreps.count(kind) == 0:
            if strict:
                raise LayoutError(f"input {x.irreps} has no block of kind {kind_label(kind)}")
            per_kind[kind] = ad.Tensor(np.zeros((x.rows, c_out, 2 * kind[0] + 1)))
            continue
        w = weights[kind_label(kind)]
        per_kind[kind] = ad.einsum("ncd,oc->nod", x.kind_view(kind), w)
    if bias is not None:
        skind = _scalar_kind(irreps_out)
        if skind in per_kind:
            b = ad.as_tensor(bias)
            per_kind[skind] = per_kind[skind] + ad.reshape(b, (1, b.shape[0], 1))
    return IrrepsFeature.from_kinds(irreps_out, per_kind)


# ---------------------------------------------------------------------------
# layer norm


def _channel_index(irreps: Irreps, kind) -> np.ndarray:
    idx, start = [], 0
    for b in irreps:
        if b.kind == kind:
            idx.extend(range(start, start + b.mul))
        start += b.mul
    return np.array(idx, dtype=np.intp)


def _scalar_channel_index(irreps: Irreps, kind) -> np.ndarray:
    idx, start = [], 0
    for b in irreps:
        if b.is_scalar:
            if b.kind == kind:
                idx.extend(range(start, start + b.mul))
            start += b.mul
    return np.array(idx, dtype=np.intp)


def equivariant_layer_norm(x: IrrepsFeature, gamma, beta=None, eps: float = LN_EPS) -> IrrepsFeature:
    """Layer norm over channels, per block kind.

    Scalars: ``(x - mean) / std * gamma + beta``.  Other kinds: each vector is
    divided by the RMS over channels of the per-channel L2 norms, times gamma.
    Denominators are clamped at ``eps``.
    """
    gamma = ad.as_tensor(gamma)
    per_kind = {}
    for kind in x.irreps.kinds():
        v = x.kind_view(kind)
        g = ad.take(gamma, _channel_index(x.irreps, kind))
        g = ad.reshape(g, (1, g.shape[0], 1))
        if is_scalar_kind(kind):
            centered = v - ad.sum_(v, axis=(1, 2), keepdims=True) * (1.0 / v.shape[1])
            var = ad.sum_(centered * centered, axis=(1, 2), keepdims=True) * (1.0 / v.shape[1])
            out = centered / ad.sqrt(ad.clip_min(var, eps * eps)) * g
            if beta is not None:
                b = ad.take(beta, _scalar_channel_index(x.irreps, kind))
                out = out + ad.reshape(b, (1, b.shape[0], 1))
        else:
            ms = ad.sum_(v * v, axis=(1, 2), keepdims=True) * (1.0 / v.shape[1])
            out = v / ad.sqrt(ad.clip_min(ms, eps * eps)) * g
        per_kind[kind] = out
    return IrrepsFeature.from_kinds(x.irreps, per_kind)


# ---------------------------------------------------------------------------
# gate


def gate_input_irreps(irreps_out) -> Irreps:
    """Layout a gate needs to produce ``irreps_out``: scalars, then one gate
    scalar per non-scalar channel, then the non-scalar blocks."""
    irreps_out = Irreps(irreps_out)
    n_gated = irreps_out.non_scalars().num_channels
    n_scalar = irreps_out.num_scalars() + n_gated
    p = Parity.e if irreps_out.has_parity else None
    return Irreps([Block(n_scalar, 0, p)]) + irreps_out.non_scalars()


def gate(x: IrrepsFeature, irreps_out=None) -> IrrepsFeature:
    """SiLU on the first ``C_0`` scalars, sigmoid gates on every non-scalar channel.

    Pseudo-scalars ``(0, o)`` count as gated channels.  The output keeps the
    non-scalar blocks and only ``C_0`` scalars.
    """
    gated = x.irreps.non_scalars()
    n_scalar = x.irreps.num_scalars()
    c0 = n_scalar - gated.num_channels
    if c0 < 0:
        raise LayoutError(
            f"gate input {x.irreps} has {n_scalar} scalars but needs at least {gated.num_channels}"
        )
    expected = Irreps(
        ([Block(c0, 0, Parity.e if x.irreps.has_parity else None)] if c0 else []) + list(gated)
    )
    if irreps_out is not None and Irreps(irreps_out) != expected:
        raise LayoutError(f"gate of {x.irreps} yields {expected}, not {Irreps(irreps_out)}")
    blocks = []
    if n_scalar:
        skind = _scalar_kind(x.irreps)
        s = x.kind_view(skind)
        if c0:
            blocks.append(ad.silu(ad.slice_axis(s, 0, c0, axis=1)))
        gates = ad.sigmoid(ad.slice_axis(s, c0, n_scalar, axis=1)) if gated else None
    start = 0
    for i, b in enumerate(x.irreps):
        if b.is_scalar:
            continue
        g = ad.slice_axis(gates, start, start + b.mul, axis=1)
        blocks.append(x.block(i) * g)
        start += b.mul
    return IrrepsFeature.from_blocks(expected, blocks)


# ---------------------------------------------------------------------------
# depth-wise tensor product


@dataclass(frozen=True)
class Path:
    c1: int
    l1: int
    c2: int
    l2: int
    l3: int
    p3: Parity | None
    slot: int

    def __str__(self) -> str:
        p = "" if self.p3 is None else f",{self.p3}"
        return f"c1={self.c1} l1={self.l1} c2={self.c2} l2={self.l2} -> ({self.l3}{p}) w[{self.slot}]"


@dataclass
class _Group:
    kind1: tuple
    kind2: tuple
    kind3: tuple
    idx1: np.ndarray
    idx2: np.ndarray
    slots: np.ndarray


@dataclass
class TensorProductPlan:
    irreps_in1: Irreps
    irreps_in2: Irreps
    irreps_out: Irreps
    paths: tuple[Path, ...]
    lmax: int
    groups: list[_Group] = field(repr=False, default_factory=list)
    order: dict = field(repr=False, default_factory=dict)

    @property
    def weight_count(self) -> int:
        return len(self.paths)

    def describe(self) -> str:
        head = (
            f"in1={self.irreps_in1} in2={self.irreps_in2} lmax={self.lmax} "
            f"out={self.irreps_out} paths={len(self.paths)} weights={self.weight_count}"
        )
        return "\n".join([head] + [str(p) for p in self.paths])


def build_dtp_plan(irreps_in1, irreps_in2, lmax: int, mode: str | None = None) -> TensorProductPlan:
    """Enumerate depth-wise paths ``(c1, l1) x (c2, l2) -> l3``, ordered by ``(c1, c2, l3)``.

    Each path owns one weight and one output channel, so every output channel
    depends on exactly one channel of each input.
    """
    in1, in2 = Irreps(irreps_in1), Irreps(irreps_in2)
    modes = {ir.mode for ir in (in1, in2) if len(ir)}
    if mode is not None:
        modes.add(mode)
    if len(modes) > 1:
        raise LayoutError(f"mixed SE(3)/E(3) inputs: {in1} and {in2}")
    e3 = modes == {"e3"}
    ch1 = [(b, u) for b in in1 for u in range(b.mul)]
    ch2 = [(b, u) for b in in2 for u in range(b.mul)]
    paths = []
    for c1, (b1, _) in enumerate(ch1):
        for c2, (b2, _) in enumerate(ch2):
            for l3 in range(abs(b1.L - b2.L), min(b1.L + b2.L, lmax) + 1):
                p3 = b1.p * b2.p if e3 else None
                paths.append(Path(c1, b1.L, c2, b2.L, l3, p3, len(paths)))
    out_kinds = sorted(
        {(p.l3, p.p3) for p in paths}, key=lambda k: (k[0], 0 if k[1] in (None, Parity.e) else 1)
    )
    out_count = {k: 0 for k in out_kinds}
    out_pos = []
    for p in paths:
        k = (p.l3, p.p3)
        out_pos.append(out_count[k])
        out_count[k] += 1
    irreps_out = Irreps([Block(out_count[k], k[0], k[1]) for k in out_kinds])

    # kind-local channel indices used by apply_dtp
    local1 = _kind_local(in1)
    local2 = _kind_local(in2)
    buckets: dict[tuple, list[int]] = {}
    for n, p in enumerate(paths):
        k1, k2 = ch1[p.c1][0].kind, ch2[p.c2][0].kind
        buckets.setdefault((k1, k2, (p.l3, p.p3)), []).append(n)
    groups, order = [], {k: [] for k in out_kinds}
    for (k1, k2, k3), members in buckets.items():
        groups.append(
            _Group(
                k1,
                k2,
                k3,
                np.array([local1[paths[n].c1] for n in members], dtype=np.intp),
                np.array([local2[paths[n].c2] for n in members], dtype=np.intp),
                np.array(members, dtype=np.intp),
            )
        )
        order[k3].extend(out_pos[n] for n in members)
    order = {k: np.argsort(np.array(v, dtype=np.intp), kind="stable") for k, v in order.items()}
    return TensorProductPlan(in1, in2, irreps_out, tuple(paths), lmax, groups, order)


def _kind_local(irreps: Irreps) -> list[int]:
    counters: dict = {}
    out = []
    for b in irreps:
        for _ in range(b.mul):
            out.append(counters.get(b.kind, 0))
            counters[b.kind] = out[-1] + 1
    return out


def apply_dtp(plan: TensorProductPlan, x: IrrepsFeature, y: IrrepsFeature, weights) -> IrrepsFeature:
    """Weighted depth-wise tensor product.

    ``weights`` is either one shared vector ``(weight_count,)`` or one row per
    feature row ``(rows, weight_count)`` (e.g. produced from edge lengths).
    """
    if x.irreps != plan.irreps_in1 or y.irreps != plan.irreps_in2:
        raise LayoutError(
            f"inputs {x.irreps}, {y.irreps} do not match plan {plan.irreps_in1}, {plan.irreps_in2}"
        )
    if x.rows != y.rows:
        raise LayoutError(f"row mismatch {x.rows} vs {y.rows}")
    w = ad.as_tensor(weights)
    per_row = w.ndim == 2
    if w.shape[-1] != plan.weight_count or (per_row and w.shape[0] != x.rows):
        raise LayoutError(f"weights of shape {w.shape} do not match {plan.weight_count} paths")
    views1: dict = {}
    views2: dict = {}
    outputs: dict = {k: [] for k in plan.order}
    for g in plan.groups:
        if g.kind1 not in views1:
            views1[g.kind1] = x.kind_view(g.kind1)
        if g.kind2 not in views2:
            views2[g.kind2] = y.kind_view(g.kind2)
        v1, v2 = views1[g.kind1], views2[g.kind2]
        cg = clebsch_gordan(g.kind1[0], g.kind2[0], g.kind3[0])
        if _is_arange(g.idx1, v1.shape[1]):
            xg = v1
        else:
            xg = ad.take(v1, g.idx1, axis=1)
        wg = ad.take(w, g.slots, axis=1 if per_row else 0)
        wspec = "np" if per_row else "p"
        if v2.shape[1] == 1:
            y1 = ad.reshape(v2, (v2.shape[0], v2.shape[2]))
            out = ad.einsum(f"npi,nj,ijk,{wspec}->npk", xg, y1, cg, wg)
        else:
            yg = ad.take(v2, g.idx2, axis=1)
            out = ad.einsum(f"npi,npj,ijk,{wspec}->npk", xg, yg, cg, wg)
        outputs[g.kind3].append(out)
    per_kind = {}
    for k, parts in outputs.items():
        t = ad.concat(parts, axis=1)
        perm = plan.order[k]
        per_kind[k] = t if _is_arange(perm, len(perm)) else ad.take(t, perm, axis=1)
    return IrrepsFeature.from_kinds(plan.irreps_out, per_kind)


def _is_arange(idx: np.ndarray, n: int) -> bool:
    return len(idx) == n and bool(np.all(idx == np.arange(n)))


# ---------------------------------------------------------------------------
# modules


class Linear:
    """Equivariant linear layer with named parameters ``{prefix}.w.{kind}`` and ``{prefix}.b``."""

    def __init__(self, prefix: str, irreps_in, irreps_out, bias: bool = True, strict: bool = True):
        self.prefix = prefix
        self.irreps_in = Irreps(irreps_in)
        self.irreps_out = Irreps(irreps_out)
        self.strict = strict
        self.kinds = [k for k in self.irreps_out.kinds() if self.irreps_in.count(k)]
        if strict and len(self.kinds) != len(self.irreps_out.kinds()):
            missing = [kind_label(k) for k in self.irreps_out.kinds() if k not in self.kinds]
            raise LayoutError(f"{prefix}: input {self.irreps_in} lacks kinds {missing}")
        self.bias = bias and self.irreps_out.num_scalars() > 0

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out = {}
        for k in self.kinds:
            fan_in = self.irreps_in.count(k)
            bound = 1.0 / math.sqrt(fan_in)
            out[f"{self.prefix}.w.{kind_label(k)}"] = rng.uniform(
                -bound, bound, size=(self.irreps_out.count(k), fan_in)
            )
        if self.bias:
            out[f"{self.prefix}.b"] = np.zeros(self.irreps_out.num_scalars())
        return out

    def __call__(self, params: Mapping[str, ad.Tensor], x: IrrepsFeature) -> IrrepsFeature:
        weights = {kind_label(k): params[f"{self.prefix}.w.{kind_label(k)}"] for k in self.kinds}
        bias = params[f"{self.prefix}.b"] if self.bias else None
        return equivariant_linear(x, weights, self.irreps_out, bias=bias, strict=self.strict)


class LayerNorm:
    def __init__(self, prefix: str, irreps):
        self.prefix = prefix
        self.irreps = Irreps(irreps)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out = {f"{self.prefix}.gamma": np.ones(self.irreps.num_channels)}
        if self.irreps.num_scalars():
            out[f"{self.prefix}.beta"] = np.zeros(self.irreps.num_scalars())
        return out

    def __call__(self, params, x: IrrepsFeature) -> IrrepsFeature:
        return equivariant_layer_norm(
            x, params[f"{self.prefix}.gamma"], params.get(f"{self.prefix}.beta")
        )


class Gate:
    def __init__(self, irreps_out):
        self.irreps_out = Irreps(irreps_out)
        self.irreps_in = gate_input_irreps(self.irreps_out)

    def init(self, rng) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, params, x: IrrepsFeature) -> IrrepsFeature:
        return gate(x)


class DepthwiseTensorProduct:
    """DTP with shared, input-independent weights ``{prefix}.w``.

    Radially conditioned DTPs use the plan directly with per-edge weights.
    """

    def __init__(self, prefix: str, irreps_in1, irreps_in2, lmax: int):
        self.prefix = prefix
        self.plan = build_dtp_plan(irreps_in1, irreps_in2, lmax)

    @property
    def irreps_out(self) -> Irreps:
        return self.plan.irreps_out

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        # one path per output channel, so std 1/sqrt(1)
        return {f"{self.prefix}.w": rng.standard_normal(self.plan.weight_count)}

    def __call__(self, params, x: IrrepsFeature, y: IrrepsFeature) -> IrrepsFeature:
        return apply_dtp(self.plan, x, y, params[f"{self.prefix}.w"])
