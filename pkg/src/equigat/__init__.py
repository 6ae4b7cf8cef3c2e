"""Equivariant graph attention on irreps features, with a small reverse-mode tape."""

from .irreps import Irreps, IrrepsFeature, LayoutError
from .so3 import DomainError, Parity

__version__ = "0.1.0"

__all__ = ["Irreps", "IrrepsFeature", "LayoutError", "DomainError", "Parity", "__version__"]
