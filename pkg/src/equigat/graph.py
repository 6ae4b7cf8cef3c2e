"""Atomistic graphs, batching and radial bases."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .so3 import DomainError

__all__ = [
    "DegenerateGeometryError",
    "AtomisticGraph",
    "radius_graph",
    "build_graph",
    "batch_graphs",
    "radial_basis",
]


class DegenerateGeometryError(DomainError):
    """Two atoms share a position."""


def radius_graph(positions, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges ``(i <- j)`` for all ordered pairs with ``0 < |r_j - r_i| <= cutoff``.

    Returned as ``(dst, src)`` index arrays sorted by ``(i, j)``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
        raise ValueError(f"positions must be (n>=1, 3), got {pos.shape}")
    diff = pos[None, :, :] - pos[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    n = pos.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0.0):
        i, j = np.argwhere((dist == 0.0) & off)[0]
        raise DegenerateGeometryError(f"atoms {i} and {j} coincide")
    dst, src = np.nonzero((dist <= cutoff) & off)
    return dst.astype(np.intp), src.astype(np.intp)


@dataclass
class AtomisticGraph:
    """Species, positions and directed edges; several molecules may share one graph.

    ``positions`` may be a tape leaf, so edge vectors are recomputed from it on
    every call to :meth:`edge_vectors` rather than cached as plain arrays.
    """

    species: np.ndarray
    positions: ad.Tensor
    dst: np.ndarray
    src: np.ndarray
    graph_index: np.ndarray
    num_graphs: int = 1

    def __post_init__(self):
        # canonical (i, j) edge order: neighbor sums reduce in a fixed order whatever the input order
        self.dst = np.asarray(self.dst, dtype=np.intp)
        self.src = np.asarray(self.src, dtype=np.intp)
        order = np.lexsort((self.src, self.dst))
        if not np.array_equal(order, np.arange(len(order))):
            self.dst, self.src = self.dst[order], self.src[order]

    @property
    def num_atoms(self) -> int:
        return len(self.species)

    @property
    def num_edges(self) -> int:
        return len(self.dst)

    def edge_vectors(self) -> ad.Tensor:
        """``r_ij = r_j - r_i`` per edge."""
        return ad.take(self.positions, self.src, axis=0) - ad.take(self.positions, self.dst, axis=0)

    def edge_lengths(self, vectors: ad.Tensor | None = None) -> ad.Tensor:
        v = self.edge_vectors() if vectors is None else vectors
        return ad.sqrt(ad.sum_(v * v, axis=1))

    def with_positions(self, positions) -> "AtomisticGraph":
        return AtomisticGraph(
            self.species, ad.as_tensor(positions), self.dst, self.src, self.graph_index, self.num_graphs
        )

    def degrees(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_atoms)


def build_graph(species, positions, cutoff: float) -> AtomisticGraph:
    species = np.asarray(species, dtype=np.int64)
    pos = ad.as_tensor(positions)
    dst, src = radius_graph(pos.data, cutoff)
    return AtomisticGraph(species, pos, dst, src, np.zeros(len(species), dtype=np.intp), 1)


def batch_graphs(graphs: Sequence[AtomisticGraph]) -> AtomisticGraph:
    """Disjoint union with node offsets; edges never cross molecules."""
    species, positions, dst, src, index = [], [], [], [], []
    offset = 0
    for g, graph in enumerate(graphs):
        species.append(graph.species)
        positions.append(graph.positions)
        dst.append(graph.dst + offset)
        src.append(graph.src + offset)
        index.append(np.full(graph.num_atoms, g, dtype=np.intp))
        offset += graph.num_atoms
    return AtomisticGraph(
        np.concatenate(species),
        ad.concat(positions, axis=0),
        np.concatenate(dst).astype(np.intp),
        np.concatenate(src).astype(np.intp),
        np.concatenate(index),
        len(graphs),
    )


def radial_basis(d, kind: str, basis_count: int, cutoff: float) -> ad.Tensor:
    """Radial basis values ``(edges, basis_count)``.

    gaussian: ``exp(-(d - c_k)^2 / (2 sigma^2))``, centers evenly spaced on
    ``[0, cutoff]`` and ``sigma`` equal to their spacing.
    bessel: ``sqrt(2/cutoff) sin(k pi d / cutoff) / d`` for ``k = 1..basis_count``.
    """
    d = ad.as_tensor(d)
    if np.any(d.data <= 0):
        raise DomainError("radial basis needs positive distances")
    col = ad.reshape(d, (d.shape[0], 1)) if d.ndim == 1 else d
    if kind == "gaussian":
        centers = np.linspace(0.0, cutoff, basis_count)
        sigma = centers[1] - centers[0] if basis_count > 1 else cutoff
        diff = col - centers[None, :]
        return ad.exp(diff * diff * (-0.5 / sigma**2))
    if kind == "bessel":
        k = np.arange(1, basis_count + 1, dtype=np.float64)[None, :]
        return ad.sin(col * (k * math.pi / cutoff)) / col * math.sqrt(2.0 / cutoff)
    raise ValueError(f"unknown radial basis {kind!r}")
