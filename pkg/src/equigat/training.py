"""AdamW with warmup + cosine schedule, the training loop and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .attention import ConfigError
from .data import Dataset, DatasetStats
from .graph import batch_graphs
from .model import EquivariantTransformer, ParameterStore

__all__ = [
    "TrainingError",
    "TrainConfig",
    "AdamW",
    "learning_rate",
    "Predictions",
    "predict",
    "metrics_from_predictions",
    "evaluate",
    "train",
    "EWT_THRESHOLD",
]

EWT_THRESHOLD = 0.02  # eV


class TrainingError(RuntimeError):
    """Training cannot continue (e.g. a non-finite loss)."""


@dataclass
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 0.0
    batch_size: int = 10
    epochs: int = 200
    warmup_epochs: int = 5
    energy_weight: float = 1.0
    force_weight: float = 0.0
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**dict(data))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0 or self.min_lr < 0:
            raise ConfigError("learning rates and weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("batch_size must be positive, epochs and warmup_epochs non-negative")
        if self.energy_weight < 0 or self.force_weight < 0:
            raise ConfigError("loss weights must be non-negative")


def learning_rate(step: int, total_steps: int, warmup_steps: int, peak: float, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` over ``warmup_steps``, then cosine decay to ``floor``."""
    if warmup_steps and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min(max(step - warmup_steps, 0) / span, 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            p -= lr * self.weight_decay * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    energy: np.ndarray
    energy_true: np.ndarray
    forces: list[np.ndarray] | None = None
    forces_true: list[np.ndarray] | None = None


def predict(model: EquivariantTransformer, params: ParameterStore, dataset: Dataset, stats: DatasetStats,
            with_forces: bool | None = None, batch_size: int = 32) -> Predictions:
    """Denormalized energies (eV) and, optionally, forces (eV/A)."""
    if with_forces is None:
        with_forces = dataset.has_forces
    if with_forces:
        dataset.require_forces()
    tensors = params.tensors()
    cutoff = model.config.cutoff
    energies, forces = [], []
    for start in range(0, len(dataset), batch_size):
        frames = dataset.frames[start : start + batch_size]
        graph = batch_graphs([f.graph(cutoff) for f in frames])
        if with_forces:
            e, f = model.energy_and_forces(tensors, graph)
            f = f.data * stats.energy_std
            offsets = np.cumsum([0] + [fr.num_atoms for fr in frames])
            forces.extend(f[a:b] for a, b in zip(offsets[:-1], offsets[1:]))
        else:
            with ad.no_record():
                e = model(tensors, graph)
        energies.append(e.data * stats.energy_std + stats.energy_mean)
    return Predictions(
        np.concatenate(energies) if energies else np.zeros(0),
        dataset.energies,
        forces if with_forces else None,
        [f.forces for f in dataset.frames] if with_forces else None,
    )


def metrics_from_predictions(pred: Predictions, threshold: float = EWT_THRESHOLD) -> dict[str, float]:
    err = np.abs(pred.energy - pred.energy_true)
    out = {
        "count": float(len(err)),
        "energy_mae": float(err.mean()) if len(err) else 0.0,
        "ewt": float(np.mean(err <= threshold)) if len(err) else 0.0,
    }
    if pred.forces is not None:
        diff = np.concatenate([np.abs(a - b).reshape(-1) for a, b in zip(pred.forces, pred.forces_true)])
        out["force_mae"] = float(diff.mean())
    return out


def evaluate(model, params, dataset: Dataset, stats: DatasetStats, with_forces: bool | None = None) -> dict[str, float]:
    """Energy MAE (eV), energy-within-threshold fraction and, with forces, component-wise force MAE."""
    return metrics_from_predictions(predict(model, params, dataset, stats, with_forces))


# ---------------------------------------------------------------------------


def _batch_loss(model, tensors, frames, graphs, stats, cfg: TrainConfig, rng, use_forces: bool):
    graph = batch_graphs(graphs)
    target = (np.array([f.energy for f in frames]) - stats.energy_mean) / stats.energy_std
    if use_forces:
        energy, forces = model.energy_and_forces(tensors, graph, create_graph=True, training=True, rng=rng)
        f_true = np.concatenate([f.forces for f in frames]) / stats.energy_std
        f_term = ad.sum_(ad.abs_(forces - f_true)) * (1.0 / f_true.size)
    else:
        energy = model(tensors, graph, training=True, rng=rng)
        f_term = None
    e_term = ad.sum_(ad.abs_(energy - target)) * (1.0 / len(frames))
    loss = e_term * cfg.energy_weight
    if f_term is not None:
        loss = loss + f_term * cfg.force_weight
    return loss


def train(
    model: EquivariantTransformer,
    params: ParameterStore,
    train_set: Dataset,
    cfg: TrainConfig,
    stats: DatasetStats,
    val_set: Dataset | None = None,
    log: Callable[[dict], None] | None = None,
) -> tuple[ParameterStore, list[dict]]:
    """Minimize ``w_E * MAE(E_norm) + w_F * MAE(F / std(E))`` with AdamW.

    Returns the trained parameters (a copy) and one metrics dict per epoch.
    Randomness: the shuffle stream and the dropout stream are spawned from a
    single ``SeedSequence(cfg.seed)``.
    """
    cfg.validate()
    params = params.copy()
    use_forces = cfg.force_weight > 0
    if use_forces:
        train_set.require_forces()
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    cutoff = model.config.cutoff
    graphs = [f.graph(cutoff) for f in train_set.frames]
    n = len(train_set)
    steps_per_epoch = max(math.ceil(n / cfg.batch_size), 1)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs
    history: list[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tensors = params.tensors()
            with ad.Tape() as tape:
                for t in tensors.values():
                    tape.watch(t)
                loss = _batch_loss(
                    model, tensors, [train_set.frames[i] for i in idx], [graphs[i] for i in idx],
                    stats, cfg, dropout_rng, use_forces,
                )
            if not np.isfinite(loss.data).all():
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step}, frames {idx.tolist()}"
                )
            grads = ad.backward(tape, loss, wrt=list(tensors.values()))
            lr = learning_rate(step, total_steps, warmup_steps, cfg.lr, cfg.min_lr)
            opt.step(params, {k: grads[t] for k, t in tensors.items()}, lr)
            loss_sum += loss.item() * len(idx)
            step += 1
        record = {"epoch": epoch, "lr": lr, "loss": loss_sum / n}
        for name, split in (("train", train_set), ("val", val_set)):
            if split is None or len(split) == 0:
                continue
            m = evaluate(model, params, split, stats, with_forces=use_forces)
            record.update({f"{name}_{k}": v for k, v in m.items() if k != "count"})
        history.append(record)
        if log is not None:
            log(record)
    return params, history
