"""Model Hamiltonians and the effective Hamiltonians of each dynamics kind.

Every Hamiltonian splits as ``H(t, P) = H0(t) + diag(v[rho])`` where ``H0`` is
linear and ``v`` is a local potential depending on the density
``rho = diag(P)``. Linear models simply have no density potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .state import as_orbitals


class Hamiltonian:
    """Interface shared by all model Hamiltonians."""

    dim: int
    nonlinear: bool = False

    def apply_linear(self, t: float, phi: np.ndarray) -> np.ndarray:
        """``H0(t) Phi``."""
        raise NotImplementedError

    def apply_linear_dt(self, t: float, phi: np.ndarray) -> np.ndarray:
        """``dH0/dt (t) Phi``."""
        raise NotImplementedError

    def density_potential(self, density: np.ndarray) -> Optional[np.ndarray]:
        """Local potential generated by ``density``; ``None`` for linear models."""
        return None

    def interaction_energy(self, density: np.ndarray) -> float:
        """``G[rho]`` with ``dG/drho = density_potential(rho)``."""
        return 0.0

    def cayley_preconditioner(self, coef: complex) -> Optional[Callable[[np.ndarray], np.ndarray]]:
        """Approximate inverse of ``I - coef * H0`` for implicit stages; ``None`` if unavailable."""
        return None

    def check_dim(self, phi: np.ndarray) -> None:
        if phi.shape[0] != self.dim:
            raise ValueError(f"state dimension {phi.shape[0]} does not match Hamiltonian dimension {self.dim}")


class DenseHamiltonian(Hamiltonian):
    """Linear Hamiltonian available as a dense Hermitian matrix."""

    def matrix(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def dmatrix(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def matrices(self, ts: np.ndarray) -> np.ndarray:
        """Stack of ``H(t)`` for an array of times, shape ``(len(ts), d, d)``."""
        return np.stack([self.matrix(t) for t in np.asarray(ts)])

    def apply_linear(self, t, phi):
        return self.matrix(t) @ phi

    def apply_linear_dt(self, t, phi):
        return self.dmatrix(t) @ phi


@dataclass(frozen=True)
class ToyHamiltonian(DenseHamiltonian):
    """Two-level avoided crossing ``[[t - t0, delta], [delta, -(t - t0)]]``."""

    t0: float = 0.5
    delta: float = 1.0
    dim: int = field(default=2, init=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    def matrix(self, t):
        s = t - self.t0
        return np.array([[s, self.delta], [self.delta, -s]], dtype=float)

    def dmatrix(self, t):
        return np.array([[1.0, 0.0], [0.0, -1.0]])

    def matrices(self, ts):
        s = np.asarray(ts, dtype=float) - self.t0
        out = np.empty(s.shape + (2, 2))
        out[..., 0, 0] = s
        out[..., 1, 1] = -s
        out[..., 0, 1] = out[..., 1, 0] = self.delta
        return out

    def apply_linear(self, t, phi):
        s = t - self.t0
        out = np.empty_like(phi)
        out[0] = s * phi[0] + self.delta * phi[1]
        out[1] = self.delta * phi[0] - s * phi[1]
        return out

    def apply_linear_dt(self, t, phi):
        out = phi.copy()
        out[1] = -phi[1]
        return out

    def eigenvalues(self, t: float) -> np.ndarray:
        r = np.hypot(t - self.t0, self.delta)
        return np.array([-r, r])


@dataclass(frozen=True)
class FrozenHamiltonian(DenseHamiltonian):
    """Time-independent wrapper ``H(t) = base.matrix(t_frozen)``."""

    base: DenseHamiltonian
    t_frozen: float

    @property
    def dim(self):
        return self.base.dim

    def matrix(self, t):
        return self.base.matrix(self.t_frozen)

    def dmatrix(self, t):
        return np.zeros((self.dim, self.dim))

    def matrices(self, ts):
        return np.broadcast_to(self.matrix(0.0), (len(np.asarray(ts)), self.dim, self.dim)).copy()


@dataclass(frozen=True, eq=False)
class MatrixHamiltonian(DenseHamiltonian):
    """``H(t) = A + sin(omega t) B`` with real symmetric ``A`` and ``B``."""

    A: np.ndarray
    B: np.ndarray
    omega: float = np.pi

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A and B must be square matrices of equal shape")
        if not (np.allclose(A, A.T) and np.allclose(B, B.T)):
            raise ValueError("A and B must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def dim(self):
        return self.A.shape[0]

    @classmethod
    def synthetic(cls, d: int = 4, coupling: float = 0.3, seed: int = 7) -> "MatrixHamiltonian":
        """Gapped ``d``-level model: equispaced diagonal plus a random symmetric drive."""
        rng = np.random.default_rng(seed)
        A = np.diag(np.arange(d, dtype=float) - (d - 1) / 2.0)
        B = rng.standard_normal((d, d))
        B = B + B.T
        B *= coupling / np.linalg.norm(B, 2)
        return cls(A, B)

    def matrix(self, t):
        return self.A + np.sin(self.omega * t) * self.B

    def dmatrix(self, t):
        return self.omega * np.cos(self.omega * t) * self.B

    def matrices(self, ts):
        ts = np.asarray(ts, dtype=float)
        return self.A + np.sin(self.omega * ts)[:, None, None] * self.B


def nlse_center(t: float) -> float:
    """Center of the moving potential well."""
    return 25.0 + 1.5 * np.exp(-25.0 * (t - 0.1) ** 2) + np.exp(-25.0 * (t - 0.5) ** 2)


def nlse_center_dt(t: float) -> float:
    return -75.0 * (t - 0.1) * np.exp(-25.0 * (t - 0.1) ** 2) - 50.0 * (t - 0.5) * np.exp(-25.0 * (t - 0.5) ** 2)


@dataclass(frozen=True, eq=False)
class NlseHamiltonian(Hamiltonian):
    """Periodic finite-difference ``-1/2 d_xx + V(x, t) + g |phi|^2`` on ``[0, L)``.

    ``normalization`` selects how the coefficient vector maps to a density:
    ``"l2"`` uses ``|phi_k|^2`` directly (the coefficient vector is
    l2-normalized), ``"grid"`` uses ``|phi_k|^2 / hx`` so that the density
    integrates to one on the grid.
    """

    L: float = 50.0
    d: int = 2000
    g: float = 2.5
    normalization: str = "l2"
    potential: bool = True
    nonlinear: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("need at least 3 grid points")
        if self.normalization not in ("l2", "grid"):
            raise ValueError("normalization must be 'l2' or 'grid'")
        object.__setattr__(self, "nonlinear", self.g != 0.0)
        object.__setattr__(self, "_x", self.hx * np.arange(self.d))

    @property
    def dim(self):
        return self.d

    @property
    def hx(self) -> float:
        return self.L / self.d

    @property
    def x(self) -> np.ndarray:
        return self._x

    def _density_scale(self) -> float:
        return 1.0 if self.normalization == "l2" else 1.0 / self.hx

    def potential_values(self, t: float) -> np.ndarray:
        if not self.potential:
            return np.zeros(self.d)
        return -np.exp(-0.1 * (self.x - nlse_center(t)) ** 2)

    def potential_dt(self, t: float) -> np.ndarray:
        if not self.potential:
            return np.zeros(self.d)
        r = nlse_center(t)
        return 0.2 * (self.x - r) * nlse_center_dt(t) * self.potential_values(t)

    def laplacian(self, phi: np.ndarray) -> np.ndarray:
        """Periodic three-point stencil along axis 0."""
        out = np.roll(phi, 1, axis=0)
        out += np.roll(phi, -1, axis=0)
        out -= 2.0 * phi
        out /= self.hx**2
        return out

    def apply_linear(self, t, phi):
        out = self.laplacian(phi)
        out *= -0.5
        out += self.potential_values(t)[:, None] * phi
        return out

    def apply_linear_dt(self, t, phi):
        return self.potential_dt(t)[:, None] * phi

    def kinetic_symbol(self) -> np.ndarray:
        """Eigenvalues of the periodic ``-1/2`` stencil Laplacian in FFT order."""
        k = np.arange(self.d)
        return (1.0 - np.cos(2.0 * np.pi * k / self.d)) / self.hx**2

    def cayley_preconditioner(self, coef):
        """``(I - coef * K)^{-1}`` with the kinetic operator ``K``, applied by FFT."""
        denom = (1.0 - coef * self.kinetic_symbol())[:, None]

        def apply(f):
            return np.fft.ifft(np.fft.fft(f, axis=0) / denom, axis=0)

        return apply

    def density_potential(self, density):
        if self.g == 0.0:
            return None
        return (self.g * self._density_scale()) * density

    def interaction_energy(self, density):
        return 0.5 * self.g * self._density_scale() * float(np.sum(density**2))

    def sparse_linear(self, t: float) -> sp.csr_matrix:
        """``H0(t)`` as a sparse matrix (for eigensolves)."""
        d, c = self.d, 0.5 / self.hx**2
        main = 2.0 * c * np.ones(d) + self.potential_values(t)
        off = -c * np.ones(d - 1)
        m = sp.diags([off, main, off], [-1, 0, 1], format="lil")
        m[0, d - 1] = -c
        m[d - 1, 0] = -c
        return m.tocsr()

    def ground_state(self, t: float = 0.0, n_orbitals: int = 1, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
        """Self-consistent lowest eigenvectors of ``H(t, P)``.

        Solves the nonlinear eigenproblem by an Anderson-accelerated fixed
        point on the density; returns orthonormal real orbitals ``(d, N)``.
        """
        from .solvers import AndersonConfig, anderson_solve

        h0 = self.sparse_linear(t)

        def lowest(density):
            v = self.density_potential(density)
            mat = h0 if v is None else h0 + sp.diags(v)
            # shift so the wanted end of the spectrum is the largest in magnitude
            shift = 4.0 / self.hx**2
            _, vecs = spla.eigsh(mat - shift * sp.identity(self.d), k=n_orbitals, which="LM", tol=1e-14)
            return vecs

        def density_map(rho):
            vecs = lowest(rho[:, 0])
            return np.sum(np.abs(vecs) ** 2, axis=1)[:, None]

        rho0 = np.sum(np.abs(lowest(np.zeros(self.d))) ** 2, axis=1)[:, None]
        if self.g != 0.0:
            rho0, report = anderson_solve(density_map, rho0, AndersonConfig(1.0, 10, tol * 1e-2, max_iter))
            if not report.converged:
                raise RuntimeError(f"ground-state iteration did not converge: {report}")
        vecs = lowest(rho0[:, 0])
        vecs = vecs * np.sign(vecs.sum(axis=0))
        return vecs.astype(complex)


AnyHamiltonian = Union[ToyHamiltonian, MatrixHamiltonian, NlseHamiltonian, FrozenHamiltonian]


@dataclass(frozen=True)
class ProblemConfig:
    """Singular-perturbation parameter, final time and Hamiltonian."""

    epsilon: float
    T: float
    hamiltonian: Hamiltonian
    N: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.N < 1:
            raise ValueError("N must be at least 1")


def _density(phi: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", phi.real, phi.real) + np.einsum("ij,ij->i", phi.imag, phi.imag)


def apply_h(ham: Hamiltonian, t: float, phi) -> np.ndarray:
    """``H(t, P) Phi`` with ``P = Phi Phi*`` entering through ``diag(P)``."""
    phi = as_orbitals(phi)
    ham.check_dim(phi)
    out = ham.apply_linear(t, phi)
    if ham.nonlinear:
        v = ham.density_potential(_density(phi))
        if v is not None:
            out = out + v[:, None] * phi
    return out


def effective_h_apply(ham: Hamiltonian, t: float, phi, kind, vec=None) -> np.ndarray:
    """Apply the effective Hamiltonian ``H^e(t, Phi)`` of ``kind`` to ``vec``.

    ``H^e`` is built from ``phi``; ``vec`` defaults to ``phi`` itself, which is
    the product every propagator needs. Passing a different ``vec`` exposes
    ``H^e`` as a linear operator (used to check Hermiticity).
    """
    from .dynamics import DynamicsKind

    kind = DynamicsKind(kind)
    phi = as_orbitals(phi)
    ham.check_dim(phi)
    v = phi if vec is None else as_orbitals(vec)
    ham.check_dim(v)

    h0phi = ham.apply_linear(t, phi)
    h0v = h0phi if vec is None else ham.apply_linear(t, v)
    pot = ham.density_potential(_density(phi)) if ham.nonlinear else None
    vpot_v = None if pot is None else pot[:, None] * v

    if kind is DynamicsKind.SCHRODINGER:
        return h0v if vpot_v is None else h0v + vpot_v

    # N x N projected blocks; for N = 1 these are the scalars phi* H0 phi etc.
    m0 = phi.conj().T @ h0phi
    mv = None if pot is None else phi.conj().T @ (pot[:, None] * phi)

    if kind is DynamicsKind.PT:
        hv = h0v if vpot_v is None else h0v + vpot_v
        m = m0 if mv is None else m0 + mv
        return hv - v @ m

    if kind is DynamicsKind.PT_HAMILTONIAN:
        s = 2.0 * np.eye(phi.shape[1]) - phi.conj().T @ phi
        if pot is None:
            return h0v @ s - v @ m0
        return (h0v + 2.0 * vpot_v) @ s - v @ (m0 + mv) - vpot_v

    raise ValueError(f"no effective orbital Hamiltonian for {kind}")
