"""Dense complex tensor arithmetic.

Tensors are plain ``numpy.ndarray`` objects with dtype complex128 and
row-major (C) layout; ``as_tensor`` coerces and validates.  Everything else
in the package builds on the three operations here: ``contract`` (general
pairwise index contraction, done as permute -> reshape -> matmul),
``svd`` (matrix SVD with orthogonality/reconstruction guarantees), and
``materialize_unitary`` (Cayley transform of a skew-Hermitian generator).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "SvdResult",
    "UnitaryParam",
    "as_tensor",
    "contract",
    "svd",
    "materialize_unitary",
    "cayley_warning_count",
]


class ShapeError(ValueError):
    """Axis/shape mismatch in a tensor operation."""


class NumericalError(RuntimeError):
    """A numerical routine failed to produce a usable result."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous complex128 array and check finiteness."""
    t = np.ascontiguousarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(t.view(np.float64))):
        raise NumericalError("tensor contains non-finite entries")
    return t


def contract(a, b, axes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Contract tensor ``a`` with ``b`` over the given (axis-of-a, axis-of-b) pairs.

    The result carries the free axes of ``a`` (in order) followed by the free
    axes of ``b``.  Contracting all axes of both yields a rank-0 array.
    Implemented as transpose + reshape + matrix multiply.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    pairs = [(int(i), int(j)) for i, j in axes]
    ax_a = [i for i, _ in pairs]
    ax_b = [j for _, j in pairs]
    for i, j in pairs:
        if not (-a.ndim <= i < a.ndim) or not (-b.ndim <= j < b.ndim):
            raise ShapeError(f"axis pair ({i},{j}) out of range for shapes {a.shape}/{b.shape}")
    ax_a = [i % a.ndim for i in ax_a]
    ax_b = [j % b.ndim for j in ax_b]
    if len(set(ax_a)) != len(ax_a) or len(set(ax_b)) != len(ax_b):
        raise ShapeError("repeated axis in contraction subscripts")
    for i, j in zip(ax_a, ax_b):
        if a.shape[i] != b.shape[j]:
            raise ShapeError(
                f"axis pair ({i},{j}) has mismatched lengths {a.shape[i]} != {b.shape[j]}"
            )
    free_a = [i for i in range(a.ndim) if i not in ax_a]
    free_b = [j for j in range(b.ndim) if j not in ax_b]
    m = int(np.prod([a.shape[i] for i in free_a], dtype=np.int64)) if free_a else 1
    n = int(np.prod([b.shape[j] for j in free_b], dtype=np.int64)) if free_b else 1
    k = int(np.prod([a.shape[i] for i in ax_a], dtype=np.int64)) if ax_a else 1
    amat = a.transpose(free_a + ax_a).reshape(m, k)
    bmat = b.transpose(ax_b + free_b).reshape(k, n)
    out = amat @ bmat
    shape = tuple(a.shape[i] for i in free_a) + tuple(b.shape[j] for j in free_b)
    return out.reshape(shape)


@dataclass
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ v`` with ``s`` real, non-negative, descending."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v


def svd(a) -> SvdResult:
    """Thin SVD of a rank-2 tensor.  ``v`` is returned as ``V^H`` (r x n)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"svd requires a rank-2 tensor, got rank {a.ndim}")
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails on ill-conditioned input; retry with the
        # slower but more robust QR-iteration driver via a perturbation-free
        # route through scipy if present, else give up.
        try:
            from scipy.linalg import svd as _ssvd

            u, s, vh = _ssvd(a, full_matrices=False, lapack_driver="gesvd")
        except Exception as exc:  # pragma: no cover - hardware dependent
            raise NumericalError(f"svd failed to converge after 2 driver attempts: {exc}") from exc
    return SvdResult(u=u, s=np.asarray(s, dtype=np.float64), v=vh)


@dataclass
class UnitaryParam:
    """Unconstrained parameters of a chi x chi unitary.

    ``raw`` holds two real chi x chi matrices stacked as shape (2, chi, chi).
    The first is antisymmetrized into the real part of a skew-Hermitian
    generator (strict lower triangle minus its transpose), the second is
    symmetrized into the imaginary part.
    """

    dim: int
    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (2, self.dim, self.dim):
            raise ShapeError(f"raw must have shape (2, {self.dim}, {self.dim}), got {self.raw.shape}")

    @classmethod
    def zeros(cls, dim: int) -> "UnitaryParam":
        return cls(dim=dim, raw=np.zeros((2, dim, dim)))


_cayley_warnings = 0


def cayley_warning_count() -> int:
    """Number of times materialize_unitary had to rescale a singular generator."""
    return _cayley_warnings


def skew_hermitian_generator(raw: np.ndarray) -> np.ndarray:
    """Build the skew-Hermitian generator A from raw parameters (2, chi, chi)."""
    p, q = np.asarray(raw, dtype=np.float64)
    x = np.tril(p, -1) - np.tril(p, -1).T
    y = 0.5 * (q + q.T)
    return x + 1j * y


def materialize_unitary(p: UnitaryParam) -> np.ndarray:
    """Cayley transform U = (I - A)(I + A)^{-1} of the skew-Hermitian generator.

    (I + A) is invertible for every skew-Hermitian A (eigenvalues 1 + i*t),
    so the rescaling branch is defensive only.
    """
    global _cayley_warnings
    chi = p.dim
    eye = np.eye(chi, dtype=np.complex128)
    raw = p.raw
    for _ in range(8):
        a = skew_hermitian_generator(raw)
        try:
            u = (eye - a) @ np.linalg.inv(eye + a)
        except np.linalg.LinAlgError:
            _cayley_warnings += 1
            raw = 0.5 * raw
            continue
        if np.all(np.isfinite(u.view(np.float64))):
            return u
        _cayley_warnings += 1
        raw = 0.5 * raw
    raise NumericalError("cayley transform failed even after rescaling the generator")
