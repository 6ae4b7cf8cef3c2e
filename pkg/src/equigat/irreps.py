"""Irreps descriptors and the features laid out by them."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .so3 import Parity, rotation_matrix, wigner_d

__all__ = ["LayoutError", "Block", "Irreps", "IrrepsFeature", "transform_array"]


class LayoutError(ValueError):
    """Feature layouts that do not fit together."""


@dataclass(frozen=True)
class Block:
    mul: int
    L: int
    p: Parity | None = None

    @property
    def dim(self) -> int:
        return self.mul * (2 * self.L + 1)

    @property
    def kind(self) -> tuple[int, Parity | None]:
        return (self.L, self.p)

    @property
    def is_scalar(self) -> bool:
        return self.L == 0 and self.p in (None, Parity.e)

    def __str__(self) -> str:
        if self.p is None:
            return f"({self.mul},{self.L})"
        return f"({self.mul},{self.L},{self.p})"


def kind_label(kind: tuple[int, Parity | None]) -> str:
    L, p = kind
    return f"{L}" if p is None else f"{L}{p}"


def is_scalar_kind(kind: tuple[int, Parity | None]) -> bool:
    return kind[0] == 0 and kind[1] in (None, Parity.e)


_TUPLE = re.compile(r"\(\s*(\d+)\s*,\s*(\d+)\s*(?:,\s*([eo]))?\s*\)")
_COMPACT = re.compile(r"^\s*(\d+)x(\d+)([eo]?)\s*$")


class Irreps(tuple):
    """Ordered blocks ``(mul, L[, p])``.

    Parses the bracket notation ``"[(128,0),(64,1),(32,2)]"`` (SE(3)) and
    ``"[(128,0,e),(32,0,o)]"`` (E(3)); ``str()`` prints the same notation.
    Either every block carries a parity or none does.
    """

    def __new__(cls, blocks: "str | Iterable[Block | tuple] | Irreps" = ()):
        if isinstance(blocks, Irreps):
            return blocks
        if isinstance(blocks, str):
            blocks = cls._parse(blocks)
        items = []
        for b in blocks:
            if not isinstance(b, Block):
                mul, L, *rest = b
                p = Parity.parse(rest[0]) if rest and rest[0] is not None else None
                b = Block(int(mul), int(L), p)
            if b.mul < 0 or b.L < 0:
                raise LayoutError(f"invalid block {b}")
            if b.mul > 0:
                items.append(b)
        if items and len({b.p is None for b in items}) > 1:
            raise LayoutError("cannot mix blocks with and without parity")
        return super().__new__(cls, items)

    @staticmethod
    def _parse(text: str) -> list[tuple]:
        text = text.strip()
        if not text or text == "[]":
            return []
        if text.startswith("["):
            found = _TUPLE.findall(text)
            leftover = _TUPLE.sub("", text).replace("[", "").replace("]", "").replace(",", "").strip()
            if leftover:
                raise LayoutError(f"cannot parse irreps {text!r}")
            return [(int(m), int(L), p or None) for m, L, p in found]
        out = []
        for part in text.split("+"):
            match = _COMPACT.match(part)
            if not match:
                raise LayoutError(f"cannot parse irreps {text!r}")
            m, L, p = match.groups()
            out.append((int(m), int(L), p or None))
        return out

    def __str__(self) -> str:
        return "[" + ",".join(str(b) for b in self) + "]"

    def __repr__(self) -> str:
        return f"Irreps('{self}')"

    def __add__(self, other) -> "Irreps":
        return Irreps(list(self) + list(Irreps(other)))

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self)

    @property
    def num_channels(self) -> int:
        return sum(b.mul for b in self)

    @property
    def lmax(self) -> int:
        return max((b.L for b in self), default=0)

    @property
    def has_parity(self) -> bool:
        return bool(self) and self[0].p is not None

    @property
    def mode(self) -> str:
        return "e3" if self.has_parity else "se3"

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out, start = [], 0
        for b in self:
            out.append(start)
            start += b.dim
        return tuple(out)

    def kinds(self) -> list[tuple[int, Parity | None]]:
        """Distinct block kinds in order of first appearance."""
        seen: list = []
        for b in self:
            if b.kind not in seen:
                seen.append(b.kind)
        return seen

    def count(self, kind) -> int:
        return sum(b.mul for b in self if b.kind == kind)

    def num_scalars(self) -> int:
        return sum(b.mul for b in self if b.is_scalar)

    def scalars(self) -> "Irreps":
        return Irreps([b for b in self if b.is_scalar])

    def non_scalars(self) -> "Irreps":
        return Irreps([b for b in self if not b.is_scalar])

    def times(self, h: int) -> "Irreps":
        """Every multiplicity multiplied by ``h`` (the layout of ``h`` concatenated heads)."""
        return Irreps([Block(b.mul * h, b.L, b.p) for b in self])

    def simplify(self) -> "Irreps":
        """Merge adjacent blocks of the same kind."""
        out: list[Block] = []
        for b in self:
            if out and out[-1].kind == b.kind:
                out[-1] = Block(out[-1].mul + b.mul, b.L, b.p)
            else:
                out.append(b)
        return Irreps(out)

    def sorted(self) -> "Irreps":
        """Blocks ordered by degree, even parity first."""
        return Irreps(sorted(self, key=lambda b: (b.L, 0 if b.p in (None, Parity.e) else 1)))

    def channel_kinds(self) -> list[tuple[int, Parity | None]]:
        return [b.kind for b in self for _ in range(b.mul)]


class IrrepsFeature:
    """Rows of features (nodes or edges) laid out by an :class:`Irreps`.

    ``data`` has shape ``(rows, irreps.dim)``; inside a block the layout is
    channel-major, i.e. ``block(i)`` reshapes to ``(rows, mul, 2L+1)``.
    """

    __slots__ = ("irreps", "data")

    def __init__(self, irreps, data):
        self.irreps = Irreps(irreps)
        self.data = ad.as_tensor(data)
        if self.data.ndim != 2 or self.data.shape[1] != self.irreps.dim:
            raise LayoutError(
                f"data of shape {self.data.shape} does not match irreps {self.irreps} (dim {self.irreps.dim})"
            )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"IrrepsFeature({self.irreps}, rows={self.rows})"

    def block(self, i: int) -> ad.Tensor:
        b = self.irreps[i]
        start = self.irreps.offsets[i]
        if len(self.irreps) == 1:
            flat = self.data
        else:
            flat = ad.slice_axis(self.data, start, start + b.dim, axis=1)
        return ad.reshape(flat, (self.rows, b.mul, 2 * b.L + 1))

    def blocks(self) -> Iterator[tuple[Block, ad.Tensor]]:
        for i, b in enumerate(self.irreps):
            yield b, self.block(i)

    def kind_view(self, kind) -> ad.Tensor:
        """All channels of ``kind`` concatenated: ``(rows, count, 2L+1)``."""
        parts = [self.block(i) for i, b in enumerate(self.irreps) if b.kind == kind]
        if not parts:
            raise LayoutError(f"no block of kind {kind_label(kind)} in {self.irreps}")
        return ad.concat(parts, axis=1)

    def element(self, row: int, block: int, channel: int, m: int) -> float:
        b = self.irreps[block]
        if not -b.L <= m <= b.L:
            raise IndexError(f"order {m} outside [-{b.L}, {b.L}]")
        col = self.irreps.offsets[block] + channel * (2 * b.L + 1) + m + b.L
        return float(self.data.data[row, col])

    @classmethod
    def from_blocks(cls, irreps, blocks: Sequence[ad.Tensor]) -> "IrrepsFeature":
        irreps = Irreps(irreps)
        if len(blocks) != len(irreps):
            raise LayoutError("one tensor per block required")
        rows = blocks[0].shape[0] if blocks else 0
        flat = [ad.reshape(t, (rows, b.dim)) for b, t in zip(irreps, blocks)]
        return cls(irreps, ad.concat(flat, axis=1) if flat else np.zeros((rows, 0)))

    @classmethod
    def from_kinds(cls, irreps, per_kind: dict) -> "IrrepsFeature":
        """Assemble from per-kind tensors ``(rows, count(kind), 2L+1)`` split across blocks."""
        irreps = Irreps(irreps)
        cursor = {k: 0 for k in per_kind}
        blocks = []
        for b in irreps:
            t = per_kind[b.kind]
            start = cursor[b.kind]
            cursor[b.kind] = start + b.mul
            if start == 0 and b.mul == t.shape[1]:
                blocks.append(t)
            else:
                blocks.append(ad.slice_axis(t, start, start + b.mul, axis=1))
        return cls.from_blocks(irreps, blocks)

    @classmethod
    def zeros(cls, irreps, rows: int) -> "IrrepsFeature":
        irreps = Irreps(irreps)
        return cls(irreps, np.zeros((rows, irreps.dim)))

    @classmethod
    def random(cls, irreps, rows: int, rng: np.random.Generator) -> "IrrepsFeature":
        irreps = Irreps(irreps)
        return cls(irreps, rng.standard_normal((rows, irreps.dim)))

    def __add__(self, other: "IrrepsFeature") -> "IrrepsFeature":
        if self.irreps != other.irreps:
            raise LayoutError(f"cannot add {self.irreps} and {other.irreps}")
        return IrrepsFeature(self.irreps, self.data + other.data)

    def numpy(self) -> np.ndarray:
        return self.data.data


def transform_array(irreps, data: np.ndarray, rotation=None, inversion: bool = False) -> np.ndarray:
    """Apply ``D(g)`` block-wise to plain feature rows.

    ``rotation`` is anything :func:`so3.rotation_matrix` accepts.  With
    ``inversion`` each block picks up its parity sign; SE(3) layouts pick up
    ``(-1)^L`` (the transformation of spherical harmonics).
    """
    irreps = Irreps(irreps)
    R = np.eye(3) if rotation is None else rotation_matrix(rotation)
    out = np.empty_like(np.asarray(data, dtype=np.float64))
    for b, start in zip(irreps, irreps.offsets):
        D = wigner_d(b.L, R)
        if inversion:
            sign = b.p.sign if b.p is not None else (-1) ** b.L
            D = sign * D
        x = data[:, start : start + b.dim].reshape(-1, b.mul, 2 * b.L + 1)
        out[:, start : start + b.dim] = np.einsum("ncm,km->nck", x, D).reshape(-1, b.dim)
    return out
