"""Datasets: extended-XYZ I/O and synthetic Morse clusters."""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .graph import AtomisticGraph, build_graph

__all__ = [
    "ParseError",
    "MissingForcesError",
    "Frame",
    "Dataset",
    "DatasetStats",
    "load_xyz",
    "write_xyz",
    "make_toy_dataset",
    "morse_energy_forces",
    "MORSE_PARAMS",
    "SYMBOLS",
    "atomic_number",
]

# fmt: off
SYMBOLS = (
    "X",
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
    "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br",
    "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te",
    "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm",
    "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
)
# fmt: on
_NUMBER = {s: z for z, s in enumerate(SYMBOLS)}


def atomic_number(token: str) -> int:
    if token.isdigit():
        return int(token)
    try:
        return _NUMBER[token.capitalize()]
    except KeyError:
        raise ValueError(f"unknown element {token!r}") from None


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingForcesError(ValueError):
    """Forces were requested but a frame has none."""


@dataclass
class Frame:
    species: np.ndarray
    positions: np.ndarray
    energy: float
    forces: np.ndarray | None = None

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.species) != len(self.positions):
            raise ValueError("species and positions disagree on atom count")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
            if self.forces.shape != self.positions.shape:
                raise ValueError("forces must match the atom count")

    @property
    def num_atoms(self) -> int:
        return len(self.species)

    def graph(self, cutoff: float) -> AtomisticGraph:
        return build_graph(self.species, self.positions, cutoff)


@dataclass(frozen=True)
class DatasetStats:
    energy_mean: float
    energy_std: float
    avg_degree: float
    avg_atom_count: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Dataset:
    frames: list[Frame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.frames[i])
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def energies(self) -> np.ndarray:
        return np.array([f.energy for f in self.frames])

    @property
    def has_forces(self) -> bool:
        return bool(self.frames) and all(f.forces is not None for f in self.frames)

    def require_forces(self) -> None:
        for n, f in enumerate(self.frames):
            if f.forces is None:
                raise MissingForcesError(f"frame {n} has no forces")

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return Dataset(self.frames[:n_train]), Dataset(self.frames[n_train:])

    def stats(self, cutoff: float) -> DatasetStats:
        """Energy mean/std and average degree / atom count; call on the training split."""
        e = self.energies
        std = float(e.std())
        degrees = [len(f.graph(cutoff).dst) / f.num_atoms for f in self.frames]
        return DatasetStats(
            energy_mean=float(e.mean()),
            energy_std=std if std > 0 else 1.0,
            avg_degree=max(float(np.mean(degrees)), 1e-12),
            avg_atom_count=float(np.mean([f.num_atoms for f in self.frames])),
        )


def _parse_comment(text: str, line: int) -> dict[str, str]:
    try:
        tokens = shlex.split(text)
    except ValueError as exc:
        raise ParseError(f"bad comment line ({exc})", line) from None
    out = {}
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k.strip().lower()] = v
    return out


def load_xyz(path, require_forces: bool = False) -> Dataset:
    """Read extended XYZ: count line, ``key=value`` comment with ``energy``, then
    ``element x y z [fx fy fz]`` rows.  Units pass through unchanged."""
    lines = Path(path).read_text().splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            count = int(lines[i].split()[0])
        except (ValueError, IndexError):
            raise ParseError(f"expected an atom count, got {lines[i]!r}", i + 1) from None
        if count < 1:
            raise ParseError("atom count must be positive", i + 1)
        if i + 1 >= len(lines):
            raise ParseError("missing comment line", i + 2)
        meta = _parse_comment(lines[i + 1], i + 2)
        if "energy" not in meta:
            raise ParseError("comment line has no energy=", i + 2)
        try:
            energy = float(meta["energy"])
        except ValueError:
            raise ParseError(f"bad energy {meta['energy']!r}", i + 2) from None
        species, pos, forces = [], [], []
        for k in range(count):
            ln = i + 2 + k
            if ln >= len(lines):
                raise ParseError(f"expected {count} atom rows, file ended", ln + 1)
            cols = lines[ln].split()
            if len(cols) not in (4, 7):
                raise ParseError(f"expected 4 or 7 columns, got {len(cols)}", ln + 1)
            try:
                species.append(atomic_number(cols[0]))
                vals = [float(c) for c in cols[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), ln + 1) from None
            pos.append(vals[:3])
            if len(vals) == 6:
                forces.append(vals[3:])
        if forces and len(forces) != count:
            raise ParseError("force columns present on some rows only", i + 3)
        frame = Frame(species, pos, energy, forces if forces else None)
        if require_forces and frame.forces is None:
            raise MissingForcesError(f"frame starting at line {i + 1} has no force columns")
        frames.append(frame)
        i += 2 + count
    return Dataset(frames)


def write_xyz(path, dataset: Dataset | Iterable[Frame]) -> None:
    out = []
    for f in dataset:
        out.append(str(f.num_atoms))
        props = "species:S:1:pos:R:3" + (":forces:R:3" if f.forces is not None else "")
        out.append(f"energy={f.energy!r} Properties={props}")
        for n in range(f.num_atoms):
            z = int(f.species[n])
            row = [SYMBOLS[z] if 0 < z < len(SYMBOLS) else str(z)]
            row += [repr(float(v)) for v in f.positions[n]]
            if f.forces is not None:
                row += [repr(float(v)) for v in f.forces[n]]
            out.append(" ".join(row))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Morse clusters


# depth D (eV), width a (1/A), equilibrium distance r0 (A) per element
MORSE_PARAMS = {
    1: (0.8, 1.6, 1.2),
    6: (1.2, 1.4, 1.5),
    7: (1.0, 1.5, 1.4),
    8: (0.9, 1.5, 1.35),
}


def _pair_params(species: np.ndarray):
    d = np.array([MORSE_PARAMS[int(z)][0] for z in species])
    a = np.array([MORSE_PARAMS[int(z)][1] for z in species])
    r0 = np.array([MORSE_PARAMS[int(z)][2] for z in species])
    return np.sqrt(d[:, None] * d[None, :]), 0.5 * (a[:, None] + a[None, :]), 0.5 * (r0[:, None] + r0[None, :])


def morse_energy_forces(species, positions) -> tuple[float, np.ndarray]:
    """``E = sum_{i<j} D [(1 - exp(-a (r - r0)))^2 - 1]`` and ``F = -dE/dr``.

    Pair parameters mix per element: geometric-mean depth, arithmetic-mean width
    and equilibrium distance.
    """
    species = np.asarray(species)
    pos = np.asarray(positions, dtype=np.float64)
    D, a, r0 = _pair_params(species)
    diff = pos[:, None, :] - pos[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    n = len(species)
    iu = np.triu_indices(n, 1)
    ex = np.exp(-a * (r - r0))
    energy = float(np.sum((D * ((1.0 - ex) ** 2 - 1.0))[iu]))
    # dE/dr for each pair, zero on the diagonal
    dEdr = 2.0 * D * a * ex * (1.0 - ex)
    np.fill_diagonal(dEdr, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[..., None] > 0, diff / r[..., None], 0.0)
    forces = -np.sum(dEdr[..., None] * unit, axis=1)
    return energy, forces


def _bipyramid(r0: float) -> np.ndarray:
    """Five atoms: equilateral triangle of side r0 plus two apexes at distance r0."""
    rho = r0 / math.sqrt(3.0)
    h = r0 * math.sqrt(2.0 / 3.0)
    ring = [(rho * math.cos(t), rho * math.sin(t), 0.0) for t in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)]
    return np.array(ring + [(0.0, 0.0, h), (0.0, 0.0, -h)])


def make_toy_dataset(kind: str, n_frames: int, seed: int = 0, noise: float = 0.12) -> Dataset:
    """Synthetic frames labelled by :func:`morse_energy_forces`.

    ``pairwise-morse``: five carbon atoms, a perturbed trigonal bipyramid.
    ``random-cluster``: 3 to 6 atoms of H/C/N/O placed at random with a
    minimum separation of 0.9 A.
    """
    rng = np.random.default_rng(seed)
    frames = []
    if kind == "pairwise-morse":
        species = np.full(5, 6)
        base = _bipyramid(MORSE_PARAMS[6][2])
        for _ in range(n_frames):
            pos = base + noise * rng.standard_normal(base.shape)
            e, f = morse_energy_forces(species, pos)
            frames.append(Frame(species, pos, e, f))
    elif kind == "random-cluster":
        elements = np.array([1, 6, 7, 8])
        for _ in range(n_frames):
            n = int(rng.integers(3, 7))
            species = rng.choice(elements, size=n)
            pos = _random_positions(rng, n)
            e, f = morse_energy_forces(species, pos)
            frames.append(Frame(species, pos, e, f))
    else:
        raise ValueError(f"unknown toy dataset {kind!r}; use pairwise-morse or random-cluster")
    return Dataset(frames)


def _random_positions(rng: np.random.Generator, n: int, box: float = 2.5, min_dist: float = 0.9) -> np.ndarray:
    pts: list[np.ndarray] = []
    while len(pts) < n:
        p = rng.uniform(-box / 2, box / 2, size=3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pts):
            pts.append(p)
    return np.array(pts)
