"""Orbital and density-matrix state types.

The numerical kernels work on plain ``(d, N)`` complex arrays; the classes in
this module validate inputs at API boundaries and give the arrays a name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-12


def as_orbitals(phi) -> np.ndarray:
    """Return ``phi`` as a 2-D complex array of shape ``(d, N)``.

    Accepts an :class:`OrbitalSet`, a 1-D vector (treated as ``N = 1``) or a
    2-D array.
    """
    arr = np.asarray(phi.data if isinstance(phi, OrbitalSet) else phi)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"orbitals must be 1-D or 2-D, got shape {arr.shape}")
    return arr.astype(complex, copy=False)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")


def orthonormality_error(phi) -> float:
    """Return ``||Phi* Phi - I||_F``."""
    arr = as_orbitals(phi)
    gram = arr.conj().T @ arr
    return float(np.linalg.norm(gram - np.eye(arr.shape[1])))


@dataclass(frozen=True)
class OrbitalSet:
    """``d x N`` block of wavefunction columns."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(as_orbitals(self.data), copy=True)
        _check_finite(arr, "OrbitalSet")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def orthonormal(cls, data, tol: float = ORTHONORMAL_TOL) -> "OrbitalSet":
        """Build an orbital set and require ``Phi* Phi = I`` within ``tol``."""
        out = cls(data)
        err = orthonormality_error(out.data)
        if err > tol:
            raise ValueError(f"columns are not orthonormal (||Phi*Phi - I|| = {err:.3e})")
        return out

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def split(self) -> "RealImagPair":
        return RealImagPair.from_orbitals(self)


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian ``d x d`` density matrix ``P = Phi Phi*``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=complex, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"density matrix must be square, got shape {arr.shape}")
        _check_finite(arr, "DensityMatrix")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def trace(self) -> float:
        return float(np.trace(self.data).real)

    def hermiticity_error(self) -> float:
        return float(np.linalg.norm(self.data - self.data.conj().T))

    def idempotency_error(self) -> float:
        return float(np.linalg.norm(self.data @ self.data - self.data))


@dataclass(frozen=True)
class RealImagPair:
    """Real/imaginary split ``Phi = q + i p`` used by the Hamiltonian forms."""

    q: np.ndarray
    p: np.ndarray

    @classmethod
    def from_orbitals(cls, phi) -> "RealImagPair":
        arr = as_orbitals(phi)
        return cls(arr.real.copy(), arr.imag.copy())

    def to_orbitals(self) -> OrbitalSet:
        return OrbitalSet(self.q + 1j * self.p)

    def gram(self) -> np.ndarray:
        """``q^T q + p^T p``; equals the identity on the normalized manifold."""
        return self.q.T @ self.q + self.p.T @ self.p


def density_from_orbitals(phi) -> DensityMatrix:
    """Density matrix ``P = Phi Phi*``."""
    arr = as_orbitals(phi)
    _check_finite(arr, "orbitals")
    return DensityMatrix(arr @ arr.conj().T)


def gauge_distance(a, b) -> float:
    """Frobenius distance between the density matrices of ``a`` and ``b``.

    Vanishes exactly when the two orbital sets differ by a unitary rotation
    of their columns.
    """
    a = as_orbitals(a)
    b = as_orbitals(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    # P_a - P_b lives in span[a, b]; compress with a thin QR so the d x d
    # difference is never formed and no cancellation occurs.
    n = a.shape[1]
    _, r = np.linalg.qr(np.hstack([a, b]))
    ra, rb = r[:, :n], r[:, n:]
    return float(np.linalg.norm(ra @ ra.conj().T - rb @ rb.conj().T))
