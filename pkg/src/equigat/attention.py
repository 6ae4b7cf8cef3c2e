"""Equivariant graph attention.

Per directed edge ``i <- j``:

* ``x_ij = Linear_dst(x_i) + Linear_src(x_j)``
* ``x'_ij = x_ij (x)_w SH(r_ij)`` with ``w`` from a radial MLP of ``|r_ij|``
* ``f_ij = Linear(x'_ij)`` split into an attention part and a value part
* logits: ``a . LeakyReLU(f_ij^(0))`` per head (``mlp``) or a scaled dot
  product between ``Linear(x_i)`` and a key taken from ``f_ij`` (``dot``)
* values: ``f_ij`` directly (``linear``) or ``Linear(Gate(f_ij) (x)_w SH(r_ij))``
  with shared weights (``nonlinear``)

Heads are a reshape over channels: within each block kind, channel ``c`` of the
concatenated value belongs to head ``c // count_per_head``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .graph import AtomisticGraph
from .irreps import Irreps, IrrepsFeature, LayoutError
from .operations import LN_EPS, Gate, Linear, apply_dtp, build_dtp_plan, gate_input_irreps

__all__ = [
    "ConfigError",
    "AttentionConfig",
    "RadialMLP",
    "attn_dropout",
    "segment_softmax",
    "EquivariantGraphAttention",
]

ATTN_KINDS = ("mlp", "dot")
MESSAGE_KINDS = ("linear", "nonlinear")


class ConfigError(ValueError):
    """Inconsistent model or attention configuration."""


@dataclass(frozen=True)
class AttentionConfig:
    irreps_node: Irreps
    irreps_sh: Irreps
    d_head: Irreps
    heads: int
    lmax: int
    attn_kind: str = "mlp"
    message_kind: str = "nonlinear"
    leaky_slope: float = 0.2
    attn_dropout: float = 0.0
    basis_count: int = 128
    radial_hidden: int = 64
    radial_layers: int = 2

    def __post_init__(self):
        for name in ("irreps_node", "irreps_sh", "d_head"):
            object.__setattr__(self, name, Irreps(getattr(self, name)))
        if self.heads < 1:
            raise ConfigError("heads must be positive")
        if self.attn_kind not in ATTN_KINDS:
            raise ConfigError(f"attn_kind must be one of {ATTN_KINDS}, got {self.attn_kind!r}")
        if self.message_kind not in MESSAGE_KINDS:
            raise ConfigError(f"message_kind must be one of {MESSAGE_KINDS}, got {self.message_kind!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError("attn_dropout must lie in [0, 1)")
        if self.attn_kind == "mlp" and self.d_head.num_scalars() == 0:
            raise ConfigError("mlp attention needs scalar channels in d_head")
        if self.irreps_node.mode != self.d_head.mode or self.irreps_sh.mode != self.d_head.mode:
            raise ConfigError("node, sh and head irreps must all be SE(3) or all E(3)")

    @property
    def value_irreps(self) -> Irreps:
        return self.d_head.times(self.heads)


def _check_divisible(irreps: Irreps, heads: int) -> None:
    for k in irreps.kinds():
        if irreps.count(k) % heads:
            raise ConfigError(f"{irreps} has {irreps.count(k)} channels of a kind, not divisible by {heads} heads")


# ---------------------------------------------------------------------------


def _dense_init(rng, fan_out: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _scalar_layer_norm(x: ad.Tensor, gamma, beta) -> ad.Tensor:
    n = x.shape[1]
    centered = x - ad.sum_(x, axis=1, keepdims=True) * (1.0 / n)
    var = ad.sum_(centered * centered, axis=1, keepdims=True) * (1.0 / n)
    return centered / ad.sqrt(ad.clip_min(var, LN_EPS * LN_EPS)) * gamma + beta


class RadialMLP:
    """basis -> (Linear, LN, SiLU) x layers -> Linear (no bias) -> DTP weights per edge."""

    def __init__(self, prefix: str, basis_count: int, hidden: int, layers: int, out: int):
        self.prefix = prefix
        self.sizes = [basis_count] + [hidden] * layers + [out]

    def init(self, rng) -> dict[str, np.ndarray]:
        p = {}
        last = len(self.sizes) - 2
        for n, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            p[f"{self.prefix}.{n}.w"] = _dense_init(rng, b, a)
            if n < last:
                p[f"{self.prefix}.{n}.b"] = np.zeros(b)
                p[f"{self.prefix}.{n}.gamma"] = np.ones(b)
                p[f"{self.prefix}.{n}.beta"] = np.zeros(b)
        return p

    def __call__(self, params: Mapping[str, ad.Tensor], basis: ad.Tensor) -> ad.Tensor:
        if basis.shape[1] != self.sizes[0]:
            raise LayoutError(f"radial basis has {basis.shape[1]} values, expected {self.sizes[0]}")
        h = basis
        last = len(self.sizes) - 2
        for n in range(len(self.sizes) - 1):
            pre = f"{self.prefix}.{n}"
            h = ad.einsum("ef,of->eo", h, params[f"{pre}.w"])
            if n < last:
                h = h + params[f"{pre}.b"]
                h = ad.silu(_scalar_layer_norm(h, params[f"{pre}.gamma"], params[f"{pre}.beta"]))
        return h


def attn_dropout(weights: ad.Tensor, p: float, rng: np.random.Generator | None, training: bool) -> ad.Tensor:
    """Zero each attention weight with probability ``p`` and rescale survivors by ``1/(1-p)``."""
    if not training or p == 0.0:
        return weights
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(weights.shape) >= p).astype(np.float64) / (1.0 - p)
    return weights * keep


def segment_softmax(logits: ad.Tensor, index: np.ndarray, n: int) -> ad.Tensor:
    """Softmax of ``logits (edges, heads)`` over edges sharing ``index``.

    The per-segment maximum is subtracted as a constant (it cancels exactly).
    """
    m = np.full((n,) + logits.shape[1:], -np.inf)
    np.maximum.at(m, index, logits.data)
    shifted = logits - m[index]
    e = ad.exp(shifted)
    denom = ad.segment_sum(e, index, n, axis=0)
    return e / ad.take(denom, index, axis=0)


def _split_heads(t: ad.Tensor, heads: int) -> ad.Tensor:
    rows, count, d = t.shape
    return ad.reshape(t, (rows, heads, count // heads, d))


class EquivariantGraphAttention:
    def __init__(self, prefix: str, config: AttentionConfig):
        self.prefix = prefix
        self.config = c = config
        v = c.value_irreps
        _check_divisible(v, c.heads)
        node = c.irreps_node
        self.merge_dst = Linear(f"{prefix}.merge_dst", node, node, bias=True)
        self.merge_src = Linear(f"{prefix}.merge_src", node, node, bias=False)
        self.dtp = build_dtp_plan(node, c.irreps_sh, c.lmax)
        self.radial = RadialMLP(
            f"{prefix}.radial", c.basis_count, c.radial_hidden, c.radial_layers, self.dtp.weight_count
        )
        mid = self.dtp.irreps_out
        if c.attn_kind == "mlp":
            self.alpha_irreps = c.d_head.scalars().times(c.heads)
            self.f_alpha = Linear(f"{prefix}.f_alpha", mid, self.alpha_irreps, bias=True)
        else:
            self.query = Linear(f"{prefix}.query", node, v, bias=True)
            self.f_key = Linear(f"{prefix}.f_key", mid, v, bias=True)
        try:
            if c.message_kind == "linear":
                self.f_value = Linear(f"{prefix}.f_value", mid, v, bias=True)
            else:
                self.gate = Gate(v)
                self.f_value = Linear(f"{prefix}.f_value", mid, gate_input_irreps(v), bias=True)
                self.dtp_value = build_dtp_plan(v, c.irreps_sh, c.lmax)
                self.value_out = Linear(f"{prefix}.value_out", self.dtp_value.irreps_out, v, bias=True)
        except LayoutError as exc:
            raise ConfigError(str(exc)) from exc
        self.proj = Linear(f"{prefix}.proj", v, node, bias=False)

    @property
    def tensor_products(self) -> list:
        """Tensor-product plans applied per block (one for linear messages, two for nonlinear)."""
        plans = [self.dtp]
        if self.config.message_kind == "nonlinear":
            plans.append(self.dtp_value)
        return plans

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        p = {}
        p.update(self.merge_dst.init(rng))
        p.update(self.merge_src.init(rng))
        p.update(self.radial.init(rng))
        if c.attn_kind == "mlp":
            p.update(self.f_alpha.init(rng))
            n_alpha = c.d_head.num_scalars()
            p[f"{self.prefix}.alpha_dot"] = _dense_init(rng, c.heads, n_alpha)
        else:
            p.update(self.query.init(rng))
            p.update(self.f_key.init(rng))
        p.update(self.f_value.init(rng))
        if c.message_kind == "nonlinear":
            p[f"{self.prefix}.dtp_value.w"] = rng.standard_normal(self.dtp_value.weight_count)
            p.update(self.value_out.init(rng))
        p.update(self.proj.init(rng))
        return p

    def __call__(
        self,
        params: Mapping[str, ad.Tensor],
        x: IrrepsFeature,
        graph: AtomisticGraph,
        sh: IrrepsFeature,
        basis: ad.Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
        return_attention: bool = False,
    ):
        c = self.config
        n = x.rows
        dst, src = graph.dst, graph.src
        if graph.num_edges == 0:
            out = IrrepsFeature.zeros(c.irreps_node, n)
            return (out, ad.Tensor(np.zeros((0, c.heads)))) if return_attention else out

        x_dst = self.merge_dst(params, x)
        x_src = self.merge_src(params, x)
        x_ij = IrrepsFeature(
            c.irreps_node, ad.take(x_dst.data, dst, axis=0) + ad.take(x_src.data, src, axis=0)
        )
        x_mid = apply_dtp(self.dtp, x_ij, sh, self.radial(params, basis))

        if c.attn_kind == "mlp":
            alpha = self.f_alpha(params, x_mid).data
            alpha = ad.reshape(alpha, (graph.num_edges, c.heads, alpha.shape[1] // c.heads))
            logits = ad.einsum(
                "ehc,hc->eh", ad.leaky_relu(alpha, c.leaky_slope), params[f"{self.prefix}.alpha_dot"]
            )
        else:
            q = self.query(params, x)
            k = self.f_key(params, x_mid)
            logits = None
            for kind in c.value_irreps.kinds():
                qk = _split_heads(ad.take(q.kind_view(kind), dst, axis=0), c.heads)
                kk = _split_heads(k.kind_view(kind), c.heads)
                term = ad.einsum("ehcd,ehcd->eh", qk, kk)
                logits = term if logits is None else logits + term
            logits = logits * (1.0 / math.sqrt(c.d_head.dim))

        weights = segment_softmax(logits, dst, n)
        attention = weights
        weights = attn_dropout(weights, c.attn_dropout, rng, training)

        if c.message_kind == "linear":
            value = self.f_value(params, x_mid)
        else:
            mu = self.gate(params, self.f_value(params, x_mid))
            value = apply_dtp(self.dtp_value, mu, sh, params[f"{self.prefix}.dtp_value.w"])
            value = self.value_out(params, value)

        per_kind = {}
        for kind in c.value_irreps.kinds():
            vk = _split_heads(value.kind_view(kind), c.heads)
            weighted = vk * ad.reshape(weights, (graph.num_edges, c.heads, 1, 1))
            summed = ad.segment_sum(weighted, dst, n, axis=0)
            per_kind[kind] = ad.reshape(summed, (n, c.value_irreps.count(kind), 2 * kind[0] + 1))
        out = self.proj(params, IrrepsFeature.from_kinds(c.value_irreps, per_kind))
        return (out, attention) if return_attention else out
