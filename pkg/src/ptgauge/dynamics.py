"""Right-hand sides ``d/dt u`` for each formulation of the dynamics."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .hamiltonians import ProblemConfig, apply_h, effective_h_apply
from .state import as_orbitals


class DynamicsKind(str, Enum):
    SCHRODINGER = "S"
    PT = "PT"
    PT_HAMILTONIAN = "PT-Ham"
    VON_NEUMANN = "VN"

    @classmethod
    def _missing_(cls, value):
        aliases = {
            "schrodinger": cls.SCHRODINGER,
            "pt": cls.PT,
            "pt-ham": cls.PT_HAMILTONIAN,
            "pt-hamiltonian": cls.PT_HAMILTONIAN,
            "pthamiltonian": cls.PT_HAMILTONIAN,
            "vn": cls.VON_NEUMANN,
            "von-neumann": cls.VON_NEUMANN,
            "vonneumann": cls.VON_NEUMANN,
        }
        if isinstance(value, str) and value.lower() in aliases:
            return aliases[value.lower()]
        return None


def generator(problem: ProblemConfig, kind: DynamicsKind, t: float, u: np.ndarray) -> np.ndarray:
    """``i eps du/dt`` for ``kind``: ``H^e u`` for orbitals, ``[H, P]`` for density matrices."""
    kind = DynamicsKind(kind)
    ham = problem.hamiltonian
    if kind is DynamicsKind.VON_NEUMANN:
        return commutator_h(ham, t, u)
    return effective_h_apply(ham, t, u, kind)


def commutator_h(ham, t: float, P: np.ndarray) -> np.ndarray:
    """``[H(t, P), P]`` for a dense density matrix."""
    P = np.asarray(P)
    if ham.nonlinear:
        v = ham.density_potential(np.real(np.diag(P)))
        hp = ham.apply_linear(t, P) + v[:, None] * P
    else:
        hp = ham.apply_linear(t, P)
    return hp - hp.conj().T


def rhs_schrodinger(problem: ProblemConfig, t: float, phi) -> np.ndarray:
    """``(1 / i eps) H(t, P) Phi``."""
    return apply_h(problem.hamiltonian, t, phi) / (1j * problem.epsilon)


def rhs_pt(problem: ProblemConfig, t: float, phi) -> np.ndarray:
    """Parallel-transport flow ``(1 / i eps) (H Phi - Phi (Phi* H Phi))``."""
    return effective_h_apply(problem.hamiltonian, t, phi, DynamicsKind.PT) / (1j * problem.epsilon)


def rhs_pt_hamiltonian(problem: ProblemConfig, t: float, phi) -> np.ndarray:
    """Hamiltonian form of the PT flow; valid off the normalized manifold."""
    return effective_h_apply(problem.hamiltonian, t, phi, DynamicsKind.PT_HAMILTONIAN) / (1j * problem.epsilon)


def rhs_von_neumann(problem: ProblemConfig, t: float, P) -> np.ndarray:
    """``(1 / i eps) [H(t, P), P]``."""
    return commutator_h(problem.hamiltonian, t, np.asarray(P)) / (1j * problem.epsilon)


def rhs_for(kind):
    """The RHS function for ``kind``."""
    return {
        DynamicsKind.SCHRODINGER: rhs_schrodinger,
        DynamicsKind.PT: rhs_pt,
        DynamicsKind.PT_HAMILTONIAN: rhs_pt_hamiltonian,
        DynamicsKind.VON_NEUMANN: rhs_von_neumann,
    }[DynamicsKind(kind)]


def qp_rhs_pt_hamiltonian(problem: ProblemConfig, t: float, q: np.ndarray, p: np.ndarray):
    """Real-variable Hamiltonian equations for ``(q, p)``, linear real symmetric ``H``.

    Evaluated independently of the complex form so the two can be checked
    against each other. For ``N > 1`` only the real parts of ``Phi* Phi`` and
    ``Phi* H Phi`` enter here, so it coincides with the complex form when
    those blocks are real (always the case for ``N = 1``).
    """
    ham = problem.hamiltonian
    q = as_orbitals(q).real
    p = as_orbitals(p).real
    hq = ham.apply_linear(t, q.astype(complex)).real
    hp = ham.apply_linear(t, p.astype(complex)).real
    s = 2.0 * np.eye(q.shape[1]) - (q.T @ q + p.T @ p)
    m = q.T @ hq + p.T @ hp
    dq = (hp @ s - p @ m) / problem.epsilon
    dp = (-hq @ s + q @ m) / problem.epsilon
    return dq, dp
