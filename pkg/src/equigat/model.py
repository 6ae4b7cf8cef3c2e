"""Full model: embeddings, transformer blocks, energy head and forces."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, ConfigError, EquivariantGraphAttention, RadialMLP
from .graph import AtomisticGraph, radial_basis
from .irreps import Block, Irreps, IrrepsFeature, LayoutError
from .operations import Gate, LayerNorm, Linear, apply_dtp, build_dtp_plan
from .so3 import Parity, precompute, spherical_harmonics

__all__ = [
    "InputError",
    "ModelConfig",
    "ParameterStore",
    "EquivariantTransformer",
    "build_model",
    "model_config_from_preset",
    "PRESETS",
    "IRREPS_FIELDS",
]

IRREPS_FIELDS = ("d_embed", "d_sh", "d_head", "d_ffn", "d_feature")


class InputError(ValueError):
    """Inputs the model cannot consume (e.g. unknown species)."""


@dataclass
class ModelConfig:
    block_count: int = 2
    d_embed: str = "[(16,0),(8,1)]"
    d_sh: str = "[(1,0),(1,1)]"
    d_head: str = "[(8,0),(4,1)]"
    d_ffn: str = "[(32,0),(16,1)]"
    d_feature: str = "[(16,0)]"
    heads: int = 2
    lmax: int = 1
    attn_kind: str = "mlp"
    message_kind: str = "nonlinear"
    radial_kind: str = "gaussian"
    basis_count: int = 16
    cutoff: float = 5.0
    radial_hidden: int = 64
    radial_layers: int = 2
    avg_degree: float = 1.0
    avg_atom_count: float = 1.0
    species_count: int = 10
    attn_dropout: float = 0.0
    leaky_slope: float = 0.2

    @property
    def mode(self) -> str:
        return Irreps(self.d_embed).mode

    def irreps(self, name: str) -> Irreps:
        return Irreps(getattr(self, name))

    def with_mode(self, mode: str) -> "ModelConfig":
        """Same layout with parity added (``e3``) or dropped (``se3``).

        Dropping keeps one block per degree (the even one for L=0 scalars);
        adding gives each block the parity of spherical harmonics of its degree.
        """
        if mode == self.mode:
            return ModelConfig(**asdict(self))
        out = {}
        for name in IRREPS_FIELDS:
            ir = self.irreps(name)
            if mode == "e3":
                blocks = [Block(b.mul, b.L, Parity.e if b.L % 2 == 0 else Parity.o) for b in ir]
            elif mode == "se3":
                blocks = [Block(b.mul, b.L, None) for b in ir if not (b.L == 0 and b.p == Parity.o)]
                blocks = list(Irreps(blocks).sorted().simplify())
            else:
                raise ConfigError(f"unknown mode {mode!r}")
            out[name] = str(Irreps(blocks))
        return ModelConfig(**{**asdict(self), **out})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**dict(data))
        for name in IRREPS_FIELDS:
            setattr(cfg, name, str(Irreps(getattr(cfg, name))))
        return cfg

    def validate(self) -> None:
        try:
            irreps = {n: self.irreps(n) for n in IRREPS_FIELDS}
        except LayoutError as exc:
            raise ConfigError(str(exc)) from exc
        modes = {ir.mode for ir in irreps.values()}
        if len(modes) != 1:
            raise ConfigError("all irreps must be SE(3) or all E(3)")
        if self.block_count < 1:
            raise ConfigError("block_count must be positive")
        sh = irreps["d_sh"]
        ls = [b.L for b in sh]
        if any(b.mul != 1 for b in sh) or ls != sorted(set(ls)):
            raise ConfigError("d_sh must list each degree once with multiplicity 1")
        if sh.has_parity and any(b.p != (Parity.e if b.L % 2 == 0 else Parity.o) for b in sh):
            raise ConfigError("d_sh parities must be (-1)^L")
        if max(ir.lmax for ir in irreps.values()) > self.lmax:
            raise ConfigError(f"irreps use degrees above lmax={self.lmax}")
        if irreps["d_embed"].num_scalars() == 0 or irreps["d_feature"].num_scalars() == 0:
            raise ConfigError("d_embed and d_feature need scalar channels")
        if self.radial_kind not in ("gaussian", "bessel"):
            raise ConfigError(f"unknown radial kind {self.radial_kind!r}")
        if self.cutoff <= 0 or self.basis_count < 1:
            raise ConfigError("cutoff and basis_count must be positive")
        if self.avg_degree <= 0 or self.avg_atom_count <= 0:
            raise ConfigError("avg_degree and avg_atom_count must be positive")
        if self.species_count < 1:
            raise ConfigError("species_count must be positive")


# Hyper-parameter tables.  Keys mirror ModelConfig / TrainConfig fields.
_QM9 = dict(
    block_count=6,
    d_embed="[(128,0),(64,1),(32,2)]",
    d_sh="[(1,0),(1,1),(1,2)]",
    d_head="[(32,0),(16,1),(8,2)]",
    d_ffn="[(384,0),(192,1),(96,2)]",
    d_feature="[(512,0)]",
    heads=4,
    lmax=2,
    radial_kind="gaussian",
    basis_count=128,
    cutoff=5.0,
    attn_dropout=0.2,
    species_count=10,
)
_QM9_E3 = dict(
    _QM9,
    d_embed="[(128,0,e),(32,0,o),(32,1,e),(32,1,o),(16,2,e),(16,2,o)]",
    d_sh="[(1,0,e),(1,1,o),(1,2,e)]",
    d_head="[(32,0,e),(8,0,o),(8,1,e),(8,1,o),(4,2,e),(4,2,o)]",
    d_ffn="[(384,0,e),(96,0,o),(96,1,e),(96,1,o),(48,2,e),(48,2,o)]",
    d_feature="[(512,0,e)]",
)
_MD17 = dict(
    _QM9,
    radial_kind="bessel",
    basis_count=32,
    attn_dropout=0.0,
)
_MD17_L3 = dict(
    _MD17,
    d_embed="[(128,0),(64,1),(64,2),(32,3)]",
    d_sh="[(1,0),(1,1),(1,2),(1,3)]",
    d_head="[(32,0),(16,1),(16,2),(8,3)]",
    d_ffn="[(384,0),(192,1),(192,2),(96,3)]",
    lmax=3,
)
_OC20 = dict(
    block_count=6,
    d_embed="[(256,0),(128,1)]",
    d_sh="[(1,0),(1,1)]",
    d_head="[(32,0),(16,1)]",
    d_ffn="[(768,0),(384,1)]",
    d_feature="[(512,0)]",
    heads=8,
    lmax=1,
    radial_kind="gaussian",
    basis_count=128,
    cutoff=5.0,
    attn_dropout=0.2,
    species_count=100,
)
_OC20_E3 = dict(
    _OC20,
    d_embed="[(256,0,e),(64,0,o),(64,1,e),(64,1,o)]",
    d_sh="[(1,0,e),(1,1,o)]",
    d_head="[(32,0,e),(8,0,o),(8,1,e),(8,1,o)]",
    d_ffn="[(768,0,e),(192,0,o),(192,1,e),(192,1,o)]",
    d_feature="[(512,0,e)]",
)
_TOY = dict(
    block_count=2,
    d_embed="[(16,0),(8,1)]",
    d_sh="[(1,0),(1,1)]",
    d_head="[(8,0),(4,1)]",
    d_ffn="[(32,0),(16,1)]",
    d_feature="[(16,0)]",
    heads=2,
    lmax=1,
    radial_kind="gaussian",
    basis_count=16,
    cutoff=5.0,
    attn_dropout=0.0,
    species_count=10,
)

_TRAIN_QM9 = dict(lr=5e-4, weight_decay=5e-3, batch_size=128, epochs=300, warmup_epochs=5,
                  energy_weight=1.0, force_weight=0.0)
_TRAIN_MD17 = dict(lr=5e-4, weight_decay=1e-6, batch_size=8, epochs=1500, warmup_epochs=10,
                   energy_weight=1.0, force_weight=80.0)
_TRAIN_MD17_L3 = dict(_TRAIN_MD17, lr=2e-4, batch_size=5, epochs=2000)
_TRAIN_OC20 = dict(lr=2e-4, weight_decay=1e-3, batch_size=32, epochs=20, warmup_epochs=2,
                   energy_weight=1.0, force_weight=0.0)
_TRAIN_TOY = dict(lr=4e-4, weight_decay=0.0, batch_size=10, epochs=200, warmup_epochs=10,
                  energy_weight=1.0, force_weight=0.0)

PRESETS: dict[str, dict] = {
    "qm9": {"model": _QM9, "train": _TRAIN_QM9},
    "qm9-e3": {"model": _QM9_E3, "train": _TRAIN_QM9},
    "md17": {"model": _MD17, "train": _TRAIN_MD17},
    "md17-l3": {"model": _MD17_L3, "train": _TRAIN_MD17_L3},
    "oc20": {"model": _OC20, "train": _TRAIN_OC20},
    "oc20-e3": {"model": _OC20_E3, "train": _TRAIN_OC20},
    "toy": {"model": _TOY, "train": _TRAIN_TOY},
}


def model_config_from_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig.from_dict({**PRESETS[name]["model"], **overrides})


# ---------------------------------------------------------------------------


class ParameterStore(dict):
    """Flat ``{name: float64 array}`` registry with npz serialization.

    The file also carries the model config, the seed and free-form metadata
    (e.g. energy normalization), all as JSON strings.
    """

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.items()}

    def save(self, path, config: ModelConfig, seed: int, meta: Mapping | None = None) -> None:
        header = json.dumps({"config": config.to_dict(), "seed": seed, "meta": dict(meta or {})})
        arrays = {f"p/{k}": np.asarray(v, dtype=np.float64) for k, v in self.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(header), **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParameterStore", ModelConfig, int, dict]:
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            store = cls({k[2:]: data[k].copy() for k in data.files if k.startswith("p/")})
        return store, ModelConfig.from_dict(header["config"]), int(header["seed"]), header["meta"]


# ---------------------------------------------------------------------------


class FeedForward:
    """Linear -> Gate -> Linear, with gate output width ``d_ffn``."""

    def __init__(self, prefix: str, irreps_in, irreps_hidden, irreps_out):
        self.gate = Gate(irreps_hidden)
        try:
            self.lin1 = Linear(f"{prefix}.lin1", irreps_in, self.gate.irreps_in, bias=True)
            self.lin2 = Linear(f"{prefix}.lin2", irreps_hidden, irreps_out, bias=True)
        except LayoutError as exc:
            raise ConfigError(str(exc)) from exc

    def init(self, rng) -> dict[str, np.ndarray]:
        return {**self.lin1.init(rng), **self.lin2.init(rng)}

    def __call__(self, params, x: IrrepsFeature) -> IrrepsFeature:
        return self.lin2(params, self.gate(params, self.lin1(params, x)))


class TransformerBlock:
    """``y = x + Attn(LN(x))``; ``out = y + FFN(LN(y))`` (pre-norm residuals).

    When the output layout differs from the input, the second residual goes
    through a linear projection.
    """

    def __init__(self, prefix: str, attn: AttentionConfig, d_ffn, irreps_out):
        node = attn.irreps_node
        self.norm1 = LayerNorm(f"{prefix}.norm1", node)
        self.attn = EquivariantGraphAttention(f"{prefix}.attn", attn)
        self.norm2 = LayerNorm(f"{prefix}.norm2", node)
        self.irreps_out = Irreps(irreps_out)
        self.ffn = FeedForward(f"{prefix}.ffn", node, d_ffn, self.irreps_out)
        self.skip = None
        if self.irreps_out != node:
            self.skip = Linear(f"{prefix}.skip", node, self.irreps_out, bias=False)

    def init(self, rng) -> dict[str, np.ndarray]:
        p = {**self.norm1.init(rng), **self.attn.init(rng), **self.norm2.init(rng), **self.ffn.init(rng)}
        if self.skip is not None:
            p.update(self.skip.init(rng))
        return p

    def __call__(self, params, x, graph, sh, basis, training=False, rng=None) -> IrrepsFeature:
        y = x + self.attn(params, self.norm1(params, x), graph, sh, basis, training, rng)
        residual = y if self.skip is None else self.skip(params, y)
        return residual + self.ffn(params, self.norm2(params, y))


class EquivariantTransformer:
    """Callable energy model; parameters live outside in a :class:`ParameterStore`."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = c = config
        precompute(c.lmax)
        d_embed, d_sh = c.irreps("d_embed"), c.irreps("d_sh")
        self.d_embed, self.d_sh = d_embed, d_sh
        self.sh_ls = tuple(b.L for b in d_sh)
        self.n_scalar = d_embed.num_scalars()
        scalar_p = Parity.e if d_embed.has_parity else None
        self.scalar_irreps = Irreps([Block(self.n_scalar, 0, scalar_p)])

        # edge-degree embedding: constant one -> Linear -> DTP with SH -> Linear
        self.deg_in = Linear("edge_deg.lin_in", Irreps([Block(1, 0, scalar_p)]), self.scalar_irreps)
        self.deg_dtp = build_dtp_plan(self.scalar_irreps, d_sh, c.lmax)
        self.deg_radial = RadialMLP(
            "edge_deg.radial", c.basis_count, c.radial_hidden, c.radial_layers, self.deg_dtp.weight_count
        )
        self.deg_out = Linear("edge_deg.lin_out", self.deg_dtp.irreps_out, d_embed, bias=False, strict=False)

        try:
            self.attn_config = AttentionConfig(
                irreps_node=d_embed,
                irreps_sh=d_sh,
                d_head=c.irreps("d_head"),
                heads=c.heads,
                lmax=c.lmax,
                attn_kind=c.attn_kind,
                message_kind=c.message_kind,
                leaky_slope=c.leaky_slope,
                attn_dropout=c.attn_dropout,
                basis_count=c.basis_count,
                radial_hidden=c.radial_hidden,
                radial_layers=c.radial_layers,
            )
        except LayoutError as exc:
            raise ConfigError(str(exc)) from exc
        self.blocks = []
        for n in range(c.block_count):
            last = n == c.block_count - 1
            self.blocks.append(
                TransformerBlock(
                    f"block{n}",
                    self.attn_config,
                    c.irreps("d_feature") if last else c.irreps("d_ffn"),
                    c.irreps("d_feature") if last else d_embed,
                )
            )
        d_feature = c.irreps("d_feature")
        self.norm_out = LayerNorm("head.norm", d_feature)
        self.head = FeedForward("head.ffn", d_feature, d_feature, Irreps([Block(1, 0, scalar_p)]))

    def tensor_products_per_block(self) -> int:
        return len(self.blocks[0].attn.tensor_products)

    def init(self, seed: int) -> ParameterStore:
        rng = np.random.default_rng(seed)
        c = self.config
        p = {"atom_embed.w": rng.uniform(-1.0, 1.0, size=(c.species_count, self.n_scalar))}
        p.update(self.deg_in.init(rng))
        p.update(self.deg_radial.init(rng))
        p["edge_deg.dtp.w"] = rng.standard_normal(self.deg_dtp.weight_count)
        p.update(self.deg_out.init(rng))
        for block in self.blocks:
            p.update(block.init(rng))
        p.update(self.norm_out.init(rng))
        p.update(self.head.init(rng))
        return ParameterStore(p)

    # -- pieces -------------------------------------------------------------

    def atom_embedding(self, params, species) -> IrrepsFeature:
        species = np.asarray(species)
        if species.size and (species.min() < 0 or species.max() >= self.config.species_count):
            raise InputError(
                f"species codes must lie in [0, {self.config.species_count}), got {sorted(set(species.tolist()))}"
            )
        scalars = ad.take(params["atom_embed.w"], species.astype(np.intp), axis=0)
        per_kind = {self.scalar_irreps[0].kind: ad.reshape(scalars, (len(species), self.n_scalar, 1))}
        for kind in self.d_embed.kinds():
            if kind not in per_kind:
                per_kind[kind] = ad.Tensor(np.zeros((len(species), self.d_embed.count(kind), 2 * kind[0] + 1)))
        return IrrepsFeature.from_kinds(self.d_embed, per_kind)

    def geometry(self, graph: AtomisticGraph):
        vectors = graph.edge_vectors()
        lengths = graph.edge_lengths(vectors)
        sh = IrrepsFeature(self.d_sh, spherical_harmonics(self.sh_ls, vectors))
        basis = radial_basis(lengths, self.config.radial_kind, self.config.basis_count, self.config.cutoff)
        return sh, basis

    def edge_degree_embedding(self, params, graph: AtomisticGraph, sh=None, basis=None) -> IrrepsFeature:
        if graph.num_edges == 0:
            return IrrepsFeature.zeros(self.d_embed, graph.num_atoms)
        if sh is None:
            sh, basis = self.geometry(graph)
        ones = IrrepsFeature(self.deg_in.irreps_in, np.ones((graph.num_edges, 1)))
        msg = apply_dtp(self.deg_dtp, self.deg_in(params, ones), sh, self.deg_radial(params, basis))
        msg = self.deg_out(params, msg)
        agg = ad.segment_sum(msg.data, graph.dst, graph.num_atoms, axis=0)
        return IrrepsFeature(self.d_embed, agg * (1.0 / math.sqrt(self.config.avg_degree)))

    def node_features(self, params, graph, training=False, rng=None) -> IrrepsFeature:
        sh, basis = self.geometry(graph) if graph.num_edges else (None, None)
        x = self.atom_embedding(params, graph.species) + self.edge_degree_embedding(params, graph, sh, basis)
        for block in self.blocks:
            x = block(params, x, graph, sh, basis, training, rng)
        return x

    def __call__(self, params: Mapping[str, ad.Tensor], graph: AtomisticGraph, training: bool = False,
                 rng: np.random.Generator | None = None) -> ad.Tensor:
        """Per-molecule (normalized) energies, shape ``(num_graphs,)``."""
        x = self.node_features(params, graph, training, rng)
        per_atom = self.head(params, self.norm_out(params, x)).data
        per_atom = ad.reshape(per_atom, (graph.num_atoms,))
        energy = ad.segment_sum(per_atom, graph.graph_index, graph.num_graphs, axis=0)
        return energy * (1.0 / math.sqrt(self.config.avg_atom_count))

    def energy_and_forces(self, params, graph: AtomisticGraph, create_graph: bool = False, training=False,
                          rng=None) -> tuple[ad.Tensor, ad.Tensor]:
        """Energies and ``F = -dE/dr``.

        With ``create_graph`` the force computation is recorded on the active
        tape so a loss on forces can be differentiated again.
        """
        tape = ad.current_tape()
        own = tape is None
        if own:
            tape = ad.Tape()
        with tape if own else _nullctx():
            pos = graph.positions
            if not pos.requires_grad:
                # a private leaf; an outer tape that already tracks positions keeps its link
                pos = tape.watch(ad.Tensor(pos.data.copy()))
            g = graph.with_positions(pos)
            energy = self(params, g, training, rng)
            total = ad.sum_(energy)
        grads = ad.backward(tape, total, create_graph=create_graph, wrt=[pos])
        forces = -grads.tensor(pos) if create_graph else ad.Tensor(-grads[pos])
        return energy, forces


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None


def build_model(config: ModelConfig, seed: int = 0) -> tuple[EquivariantTransformer, ParameterStore]:
    model = EquivariantTransformer(config)
    return model, model.init(seed)
