"""Real spherical harmonics, Wigner-D matrices and Clebsch-Gordan tensors.

Conventions, shared by everything in this module:

* components of a degree-``L`` vector are ordered by ``m = -L..L``;
  negative ``m`` are the sine-type real harmonics, positive ``m`` the cosine-type;
* "component" normalization: ``|Y^(L)(n)|^2 = 2L + 1`` for every unit ``n``,
  so ``Y^(0) = 1`` and ``Y^(1)(n) = sqrt(3) * (n_y, n_z, n_x)``;
* ``wigner_d(L, R)`` is the matrix with ``Y^(L)(R n) = D_L(R) Y^(L)(n)``;
* Clebsch-Gordan tensors ``C[m1, m2, m3]`` intertwine ``D_l1 (x) D_l2`` with
  ``D_l3`` and are scaled so that ``sum_{m1,m2} C[m1,m2,a] C[m1,m2,b] = delta_ab``.
"""

from __future__ import annotations

import enum
import math
from functools import lru_cache

import numpy as np

from . import autodiff as ad

__all__ = [
    "Parity",
    "parity_mul",
    "sh_parity",
    "DomainError",
    "rotation_matrix",
    "quaternion_multiply",
    "random_quaternion",
    "wigner_d",
    "real_sph_harm",
    "sh_polynomial",
    "spherical_harmonics",
    "clebsch_gordan",
    "precompute",
]


class DomainError(ValueError):
    """Input outside the domain of a geometric function (e.g. a zero vector)."""


class Parity(enum.Enum):
    e = 1
    o = -1

    def __mul__(self, other: "Parity") -> "Parity":
        return parity_mul(self, other)

    @property
    def sign(self) -> int:
        return self.value

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str | int | "Parity") -> "Parity":
        if isinstance(text, Parity):
            return text
        if text in (1, "e", "+1", "1"):
            return cls.e
        if text in (-1, "o", "-1"):
            return cls.o
        raise ValueError(f"unknown parity {text!r}")


def parity_mul(p1: Parity, p2: Parity) -> Parity:
    return Parity.e if p1 is p2 else Parity.o


def sh_parity(L: int) -> Parity:
    return Parity.e if L % 2 == 0 else Parity.o


# ---------------------------------------------------------------------------
# rotations


def quaternion_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_matrix(rotation) -> np.ndarray:
    """3x3 rotation from a unit quaternion ``(w, x, y, z)``, ZYZ Euler angles, or a matrix."""
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape == (3, 3):
        return r
    if r.shape == (4,):
        w, x, y, z = r / np.linalg.norm(r)
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
    if r.shape == (3,):
        alpha, beta, gamma = r
        return _rz(alpha) @ _ry(beta) @ _rz(gamma)
    raise ValueError(f"cannot interpret rotation of shape {r.shape}")


# ---------------------------------------------------------------------------
# spherical harmonics as homogeneous polynomials


def _poly_mul(p: dict, q: dict) -> dict:
    out: dict = {}
    for ea, ca in p.items():
        for eb, cb in q.items():
            key = (ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2])
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def _poly_add(p: dict, q: dict, scale: float = 1.0) -> dict:
    out = dict(p)
    for e, c in q.items():
        out[e] = out.get(e, 0.0) + scale * c
    return out


def _poly_pow(p: dict, k: int) -> dict:
    out = {(0, 0, 0): 1.0}
    for _ in range(k):
        out = _poly_mul(out, p)
    return out


_R2 = {(2, 0, 0): 1.0, (0, 2, 0): 1.0, (0, 0, 2): 1.0}


def _legendre_part(L: int, m: int) -> dict:
    # sqrt((L-m)!/(L+m)!) * sum_k (-1)^k 2^-L C(L,k) C(2L-2k,L) (L-2k)!/(L-2k-m)! r^2k z^(L-2k-m)
    pref = math.sqrt(math.factorial(L - m) / math.factorial(L + m))
    out: dict = {}
    for k in range((L - m) // 2 + 1):
        c = (
            (-1) ** k
            * 2.0**-L
            * math.comb(L, k)
            * math.comb(2 * L - 2 * k, L)
            * math.factorial(L - 2 * k)
            / math.factorial(L - 2 * k - m)
        )
        term = _poly_mul(_poly_pow(_R2, k), {(0, 0, L - 2 * k - m): c})
        out = _poly_add(out, term)
    return {e: pref * v for e, v in out.items()}


def _azimuthal_part(m: int, cosine: bool) -> dict:
    out: dict = {}
    trig = math.cos if cosine else math.sin
    for p in range(m + 1):
        c = math.comb(m, p) * trig((m - p) * math.pi / 2)
        c = round(c)  # exact 0/+-1 factors
        if c:
            out[(p, m - p, 0)] = out.get((p, m - p, 0), 0.0) + c
    return out


@lru_cache(maxsize=None)
def sh_polynomial(L: int) -> tuple[np.ndarray, np.ndarray]:
    """Exponents ``(K, 3)`` and coefficients ``(K, 2L+1)`` of ``Y^(L)`` as a polynomial."""
    if L < 0:
        raise ValueError("degree must be non-negative")
    columns = []
    for m in range(-L, L + 1):
        am = abs(m)
        if m == 0:
            poly = {e: math.sqrt(2 * L + 1) * c for e, c in _legendre_part(L, 0).items()}
        else:
            # sqrt(4 pi) * sqrt((2L+1)/(2 pi)) = sqrt(2 (2L+1))
            scale = math.sqrt(2 * (2 * L + 1))
            poly = _poly_mul(_legendre_part(L, am), _azimuthal_part(am, cosine=m > 0))
            poly = {e: scale * c for e, c in poly.items()}
        columns.append(poly)
    keys = sorted({e for col in columns for e, c in col.items() if abs(c) > 1e-14})
    exps = np.array(keys, dtype=np.int64).reshape(-1, 3)
    coefs = np.array([[col.get(e, 0.0) for col in columns] for e in keys]).reshape(-1, 2 * L + 1)
    exps.setflags(write=False)
    coefs.setflags(write=False)
    return exps, coefs


def _monomials(n: np.ndarray, exps: np.ndarray) -> np.ndarray:
    return np.prod(n[:, None, :] ** exps[None, :, :], axis=2)


def _poly_fwd(n, exps, coefs):
    if exps.shape[0] == 0:
        return np.zeros((n.shape[0], coefs.shape[1]))
    return _monomials(n, exps) @ coefs


@lru_cache(maxsize=None)
def _poly_derivative(key: tuple) -> tuple[np.ndarray, np.ndarray]:
    exps, coefs = _POLY_STORE[key]
    M = coefs.shape[1]
    terms: dict = {}
    for k, e in enumerate(exps):
        for c in range(3):
            if e[c] == 0:
                continue
            e2 = list(e)
            e2[c] -= 1
            row = terms.setdefault(tuple(e2), np.zeros((3, M)))
            row[c] += e[c] * coefs[k]
    keys = sorted(terms)
    d_exps = np.array(keys, dtype=np.int64).reshape(-1, 3)
    d_coefs = np.array([terms[k].reshape(-1) for k in keys]).reshape(-1, 3 * M)
    return d_exps, d_coefs


_POLY_STORE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _poly_key(exps: np.ndarray, coefs: np.ndarray) -> tuple:
    key = (exps.tobytes(), exps.shape, coefs.tobytes(), coefs.shape)
    _POLY_STORE.setdefault(key, (exps, coefs))
    return key


def poly_eval(n, exps: np.ndarray, coefs: np.ndarray) -> ad.Tensor:
    """Differentiable evaluation of a vector-valued polynomial on rows of ``n`` (E, 3)."""
    return ad.record("poly", n, key=_poly_key(exps, coefs))


def _poly_bwd(g, ins, out, needs, key):
    d_exps, d_coefs = _poly_derivative(key)
    M = _POLY_STORE[key][1].shape[1]
    jac = poly_eval(ins[0], d_exps, d_coefs)
    jac = ad.reshape(jac, (jac.shape[0], 3, M))
    return (ad.einsum("em,ecm->ec", g, jac),)


ad.register("poly", lambda n, key: _poly_fwd(n, *_POLY_STORE[key]), _poly_bwd)


@lru_cache(maxsize=None)
def _stacked_polynomial(ls: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    parts = [sh_polynomial(L) for L in ls]
    keys = sorted({tuple(e) for exps, _ in parts for e in exps})
    index = {k: i for i, k in enumerate(keys)}
    width = sum(2 * L + 1 for L in ls)
    coefs = np.zeros((len(keys), width))
    col = 0
    for L, (exps, c) in zip(ls, parts):
        for e, row in zip(exps, c):
            coefs[index[tuple(e)], col : col + 2 * L + 1] = row
        col += 2 * L + 1
    return np.array(keys, dtype=np.int64).reshape(-1, 3), coefs


def real_sph_harm(L: int, n) -> np.ndarray:
    """``Y^(L)`` at unit vector(s) ``n``; shape ``(2L+1,)`` or ``(rows, 2L+1)``."""
    arr = np.asarray(n, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0):
        raise DomainError("spherical harmonics of a zero-length vector are undefined")
    exps, coefs = sh_polynomial(L)
    out = _poly_fwd(arr, exps, coefs)
    return out[0] if single else out


def spherical_harmonics(ls, vectors, normalize: bool = True) -> ad.Tensor:
    """Concatenated ``Y^(L)`` for ``L in ls`` of the rows of ``vectors`` (differentiable)."""
    ls = tuple(int(L) for L in ls)
    v = ad.as_tensor(vectors)
    if normalize:
        r2 = ad.sum_(v * v, axis=1, keepdims=True)
        if np.any(r2.data == 0):
            raise DomainError("spherical harmonics of a zero-length vector are undefined")
        v = v / ad.sqrt(r2)
    exps, coefs = _stacked_polynomial(ls)
    return poly_eval(v, exps, coefs)


# ---------------------------------------------------------------------------
# Wigner-D in the real basis, fitted on a fixed point set


def _fibonacci_sphere(k: int) -> np.ndarray:
    i = np.arange(k) + 0.5
    phi = np.arccos(1 - 2 * i / k)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


@lru_cache(maxsize=None)
def _fit_basis(L: int) -> tuple[np.ndarray, np.ndarray]:
    pts = _fibonacci_sphere(max(6 * (2 * L + 1), 24))
    Y = real_sph_harm(L, pts)
    return pts, np.linalg.pinv(Y)


def wigner_d(L: int, rotation) -> np.ndarray:
    """Real-basis Wigner-D matrix: ``Y^(L)(R n) = D Y^(L)(n)``."""
    if L == 0:
        return np.ones((1, 1))
    R = rotation_matrix(rotation)
    pts, pinv = _fit_basis(L)
    return (pinv @ real_sph_harm(L, pts @ R.T)).T


# ---------------------------------------------------------------------------
# Clebsch-Gordan


_CG_PROBES = (
    np.array([0.8, 0.3, -0.4, 0.35]),
    np.array([0.1, -0.7, 0.5, 0.5]),
)


def _selection_rule(l1: int, l2: int, l3: int) -> bool:
    return abs(l1 - l2) <= l3 <= l1 + l2


@lru_cache(maxsize=None)
def clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis coupling tensor of shape ``(2l1+1, 2l2+1, 2l3+1)``.

    Solved as the one-dimensional fixed space of ``C -> (D1 x D2 x D3) C`` for
    two generic rotations.  Triples outside the selection rule give zeros.
    """
    shape = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1)
    if min(l1, l2, l3) < 0:
        raise ValueError("degrees must be non-negative")
    if not _selection_rule(l1, l2, l3):
        out = np.zeros(shape)
        out.setflags(write=False)
        return out
    n = int(np.prod(shape))
    blocks = []
    for q in _CG_PROBES:
        d1, d2, d3 = (wigner_d(l, q) for l in (l1, l2, l3))
        K = np.kron(np.kron(d1.T, d2.T), d3.T)
        blocks.append(K - np.eye(n))
    _, s, vt = np.linalg.svd(np.vstack(blocks))
    if s.size > 1 and s[-2] < 1e-6:
        raise ArithmeticError(f"coupling space for {(l1, l2, l3)} is not one-dimensional")
    c = vt[-1].reshape(shape)
    c[np.abs(c) < 1e-13] = 0.0
    c *= math.sqrt(2 * l3 + 1) / np.linalg.norm(c)
    flat = c.reshape(-1)
    lead = flat[np.argmax(np.abs(flat) > 1e-6)]
    if lead < 0:
        c = -c
    c.setflags(write=False)
    return c


def precompute(lmax: int) -> None:
    """Fill the SH and CG caches for all degrees up to ``lmax``."""
    for L in range(lmax + 1):
        sh_polynomial(L)
    for l1 in range(lmax + 1):
        for l2 in range(lmax + 1):
            for l3 in range(abs(l1 - l2), min(l1 + l2, lmax) + 1):
                clebsch_gordan(l1, l2, l3)
