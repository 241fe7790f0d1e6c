"""Oracles that do not go through the main propagators.

* spectral data (eigendecomposition with phase-continuous eigenvectors,
  eigenprojectors ``Q(t)`` and their time derivatives),
* the adiabatic evolution ``d/dt phi_A = [Q', Q] phi_A``,
* the parallel-transport evolution operator,
* von Neumann propagation for small systems,
* high-accuracy fine references for linear dense problems, built from
  fourth-order Magnus steps and a gauge rotation to the PT gauge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import DynamicsKind
from .hamiltonians import DenseHamiltonian, ProblemConfig
from .integrators import IntegratorConfig, Trajectory, propagate, rk4_step
from .state import as_orbitals, orthonormality_error

GAP_TOL = 1e-6
QDOT_FD_STEP = 1e-6

_GAUSS_C = np.array([0.5 - np.sqrt(3.0) / 6.0, 0.5 + np.sqrt(3.0) / 6.0])


class GapClosedError(ValueError):
    """The tracked eigenvalues touch the rest of the spectrum."""


@dataclass(frozen=True)
class Spectrum:
    """Ordered eigenpairs of a Hermitian matrix.

    ``gap`` is the distance between the lowest ``n_tracked`` eigenvalues and
    the rest of the spectrum.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    gap: float
    n_tracked: int = 1

    def projector(self, levels=None) -> np.ndarray:
        levels = range(self.n_tracked) if levels is None else levels
        v = self.eigenvectors[:, list(levels)]
        return v @ v.conj().T


def eig_hermitian(H, n_tracked: int = 1, herm_tol: float = 1e-10) -> Spectrum:
    """Full eigendecomposition of a Hermitian matrix, eigenvalues ascending."""
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(1.0, float(np.linalg.norm(H)))
    if np.linalg.norm(H - H.conj().T) > herm_tol * scale:
        raise ValueError("matrix is not Hermitian")
    w, v = np.linalg.eigh(H)
    gap = float(w[n_tracked] - w[n_tracked - 1]) if n_tracked < len(w) else np.inf
    return Spectrum(w, v, gap, n_tracked)


def align_phases(prev: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Rotate each column of ``vecs`` so its overlap with ``prev`` is real positive."""
    ov = np.einsum("ij,ij->j", prev.conj(), vecs)
    mag = np.abs(ov)
    ph = np.where(mag > 0, ov / np.where(mag > 0, mag, 1.0), 1.0)
    return vecs / ph


def track_spectrum(ham: DenseHamiltonian, times, n_tracked: int = 1) -> list[Spectrum]:
    """Spectra along ``times`` with phase-continuous eigenvectors."""
    out = []
    prev = None
    for t in np.asarray(times, dtype=float):
        s = eig_hermitian(ham.matrix(t), n_tracked)
        vecs = s.eigenvectors if prev is None else align_phases(prev, s.eigenvectors)
        s = Spectrum(s.eigenvalues, vecs, s.gap, n_tracked)
        out.append(s)
        prev = vecs
    return out


def projector(ham: DenseHamiltonian, t: float, n_tracked: int = 1) -> np.ndarray:
    """``Q(t)``: projector onto the ``n_tracked`` lowest eigenvectors of ``H(t)``."""
    s = eig_hermitian(ham.matrix(t), n_tracked)
    if s.gap < GAP_TOL:
        raise GapClosedError(f"spectral gap {s.gap:.3e} at t={t:.6g}")
    return s.projector()


def q_dot(ham: DenseHamiltonian, t: float, n_tracked: int = 1, method: str = "fd") -> np.ndarray:
    """Time derivative of ``Q(t)``.

    ``method="fd"`` uses a central difference with step ``1e-6``;
    ``method="analytic"`` uses first-order perturbation theory with
    ``dH/dt``::

        Q' = sum_{k occ, j virt} (v_j v_j* H' v_k v_k* + h.c.) / (l_k - l_j)
    """
    if method == "fd":
        dt = QDOT_FD_STEP
        return (projector(ham, t + dt, n_tracked) - projector(ham, t - dt, n_tracked)) / (2.0 * dt)
    if method != "analytic":
        raise ValueError(f"unknown method {method!r}")
    s = eig_hermitian(ham.matrix(t), n_tracked)
    if s.gap < GAP_TOL:
        raise GapClosedError(f"spectral gap {s.gap:.3e} at t={t:.6g}")
    v, w = s.eigenvectors, s.eigenvalues
    hd = v.conj().T @ ham.dmatrix(t) @ v
    occ = slice(0, n_tracked)
    virt = slice(n_tracked, len(w))
    # coefficient block between virtual rows and occupied columns
    c = hd[virt, occ] / (w[None, occ] - w[virt, None])
    x = v[:, virt] @ c @ v[:, occ].conj().T
    return x + x.conj().T


def occupation(phi, spectrum: Spectrum, level: int) -> float:
    """``|<e_level, phi>|^2`` for a single orbital ``phi``."""
    phi = as_orbitals(phi)[:, 0]
    if not 0 <= level < len(spectrum.eigenvalues):
        raise IndexError(f"level {level} out of range")
    return float(abs(np.vdot(spectrum.eigenvectors[:, level], phi)) ** 2)


def _rk4_grid(T: float, h_ref: float) -> np.ndarray:
    return IntegratorConfig("RK4", h_ref).time_grid(T)


def adiabatic_reference(problem: ProblemConfig, h_ref: float = 1e-3, phi0=None, qdot_method: str = "analytic") -> Trajectory:
    """Adiabatic evolution ``d/dt phi_A = [Q', Q] phi_A`` by RK4.

    The flow does not involve ``eps``. ``phi0`` defaults to the lowest
    ``problem.N`` eigenvectors of ``H(0)``.
    """
    ham = problem.hamiltonian
    n = problem.N
    if phi0 is None:
        phi0 = eig_hermitian(ham.matrix(0.0), n).eigenvectors[:, :n]
    u = np.array(as_orbitals(phi0), dtype=complex)

    def rhs(t, x):
        q = projector(ham, t, n)
        qd = q_dot(ham, t, n, qdot_method)
        return (qd @ q - q @ qd) @ x

    times = _rk4_grid(problem.T, h_ref)
    states = [u.copy()]
    for k in range(len(times) - 1):
        u = rk4_step(rhs, times[k], u, times[k + 1] - times[k])
        states.append(u.copy())
    return Trajectory(times, np.array(states), kind=DynamicsKind.PT, h=h_ref)


def pt_transport_operator(problem: ProblemConfig, h_ref: float = 1e-5, P0=None) -> Trajectory:
    """Parallel-transport evolution operator ``T(t)`` with ``T(0) = I``.

    Integrates the coupled system ``i eps P' = [H, P]`` and
    ``T' = [P', P] T`` by RK4, so the projector family is supplied by a fine
    von Neumann run. ``states`` holds ``T(t_k)``, shape ``(n, d, d)``.
    Raises ``RuntimeError`` if unitarity degrades beyond ``1e-6``.
    """
    ham = problem.hamiltonian
    d, eps = ham.dim, problem.epsilon
    if P0 is None:
        P0 = projector(ham, 0.0, problem.N)
    P = np.array(P0, dtype=complex)
    Tm = np.eye(d, dtype=complex)

    def rhs(t, y):
        p, tm = y[:, :d], y[:, d:]
        hp = ham.apply_linear(t, p)
        pd = (hp - hp.conj().T) / (1j * eps)
        return np.hstack([pd, (pd @ p - p @ pd) @ tm])

    times = _rk4_grid(problem.T, h_ref)
    y = np.hstack([P, Tm])
    out = [Tm.copy()]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(times) - 1):
            y = rk4_step(rhs, times[k], y, times[k + 1] - times[k])
            out.append(y[:, d:].copy())
        out = np.array(out)
        unitarity = np.max(np.linalg.norm(np.conj(np.swapaxes(out, 1, 2)) @ out - np.eye(d), axis=(1, 2)))
    if not unitarity <= 1e-6:
        raise RuntimeError(f"transport operator lost unitarity ({unitarity:.2e}); decrease h_ref")
    return Trajectory(times, out, kind=DynamicsKind.PT, h=h_ref)


def von_neumann_propagate(problem: ProblemConfig, integ: IntegratorConfig, P0=None) -> Trajectory:
    """GL2 (or any configured scheme) on ``i eps P' = [H(t, P), P]``; oracle scale only."""
    ham = problem.hamiltonian
    if ham.dim > 64:
        raise ValueError("von Neumann propagation is limited to d <= 64")
    if P0 is None:
        P0 = projector(ham, 0.0, problem.N)
    return propagate(problem, DynamicsKind.VON_NEUMANN, integ, np.asarray(P0, dtype=complex))


# --------------------------------------------------------------------------
# fine references for linear dense problems


def _expm_herm(k: np.ndarray) -> np.ndarray:
    """``exp(-i K)`` for a stack of Hermitian matrices."""
    w, v = np.linalg.eigh(k)
    u = (v * np.exp(-1j * w)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    # one Newton-Schulz sweep: eigh leaves a systematic O(1e-16) unitarity
    # defect that accumulates over long propagator chains
    uhu = np.conj(np.swapaxes(u, -1, -2)) @ u
    eye = np.eye(u.shape[-1])
    return u @ (1.5 * eye - 0.5 * uhu)


def magnus4_propagators(ham: DenseHamiltonian, eps: float, t0: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Fourth-order Magnus propagators for ``i eps u' = H(t) u`` over ``[t0, t0 + h]``.

    Vectorized over the arrays ``t0`` and ``h``; returns ``(n, d, d)``.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=float))
    h = np.broadcast_to(np.asarray(h, dtype=float), t0.shape)
    h1 = ham.matrices(t0 + _GAUSS_C[0] * h)
    h2 = ham.matrices(t0 + _GAUSS_C[1] * h)
    hh = h[:, None, None]
    comm = h2 @ h1 - h1 @ h2
    k = (hh / (2.0 * eps)) * (h1 + h2) - 1j * (np.sqrt(3.0) / 12.0) * (hh / eps) ** 2 * comm
    return _expm_herm(k)


def _gauge_propagators(m1: np.ndarray, m2: np.ndarray, h: float, eps: float) -> np.ndarray:
    """Magnus steps for ``U' = (i/eps) M(t) U`` from ``M`` at the two Gauss nodes."""
    comm = m2 @ m1 - m1 @ m2
    # U' = -(i/eps)(-M) U
    k = -(h / (2.0 * eps)) * (m1 + m2) - 1j * (np.sqrt(3.0) / 12.0) * (h / eps) ** 2 * comm
    return _expm_herm(k)


def _apply_chain(props: np.ndarray, u0: np.ndarray, left: bool = True, isometric: bool = False) -> np.ndarray:
    """Sequential products ``u_{k+1} = props[k] @ u_k`` (or ``u_k @ props[k]``).

    With ``isometric`` the columns of ``u0`` are assumed orthonormal and each
    product is pulled back onto that manifold by a Newton-Schulz sweep.
    """
    out = np.empty((len(props) + 1,) + u0.shape, dtype=complex)
    out[0] = u0
    u = u0
    eye = np.eye(u0.shape[-1])
    for k in range(len(props)):
        u = props[k] @ u if left else u @ props[k]
        if isometric:
            u = u @ (1.5 * eye - 0.5 * (u.conj().T @ u))
        out[k + 1] = u
    return out


@dataclass
class FineReference:
    """Schrödinger and PT-gauge solutions of a linear problem on a fine grid.

    ``psi[k]`` is the Schrödinger solution and ``phi[k]`` the PT solution at
    ``times[k]``. Values at other times are obtained by one partial Magnus
    step from the preceding grid point.
    """

    problem: ProblemConfig
    times: np.ndarray
    psi: np.ndarray
    gauge: np.ndarray
    h_ref: float

    @property
    def phi(self) -> np.ndarray:
        return self.psi @ self.gauge

    def states(self, kind) -> np.ndarray:
        kind = DynamicsKind(kind)
        return self.psi if kind is DynamicsKind.SCHRODINGER else self.phi

    def at(self, times, kind) -> np.ndarray:
        """States of ``kind`` at arbitrary ``times`` within ``[0, T]``."""
        kind = DynamicsKind(kind)
        times = np.asarray(times, dtype=float)
        idx = np.clip(np.searchsorted(self.times, times, side="right") - 1, 0, len(self.times) - 1)
        dt = times - self.times[idx]
        exact = np.abs(dt) <= 1e-12 * max(1.0, self.problem.T)
        out = self.states(kind)[idx].copy()
        if np.all(exact):
            return out
        sel = np.nonzero(~exact)[0]
        ham, eps = self.problem.hamiltonian, self.problem.epsilon
        t0, hs = self.times[idx[sel]], dt[sel]
        psi0 = self.psi[idx[sel]]
        props = magnus4_propagators(ham, eps, t0, hs)
        psi1 = props @ psi0
        if kind is DynamicsKind.SCHRODINGER:
            out[sel] = psi1
            return out
        # gauge over the partial step from M at its own Gauss nodes
        us = []
        for j, c in enumerate(_GAUSS_C):
            pj = magnus4_propagators(ham, eps, t0, c * hs) @ psi0
            hm = ham.matrices(t0 + c * hs)
            us.append(np.conj(np.swapaxes(pj, 1, 2)) @ hm @ pj)
        comm = us[1] @ us[0] - us[0] @ us[1]
        hh = hs[:, None, None]
        k = -(hh / (2.0 * eps)) * (us[0] + us[1]) - 1j * (np.sqrt(3.0) / 12.0) * (hh / eps) ** 2 * comm
        g1 = _expm_herm(k) @ self.gauge[idx[sel]]
        out[sel] = psi1 @ g1
        return out


def fine_reference(problem: ProblemConfig, h_ref: float, phi0=None, chunk: int = 1 << 16) -> FineReference:
    """High-accuracy Schrödinger and PT solutions of a linear dense problem.

    The Schrödinger flow is integrated with fourth-order Magnus steps. The PT
    solution is ``Phi = Psi U`` with the gauge ``U' = (i/eps)(Psi* H Psi) U``,
    which enforces ``Phi* Phi' = 0``; ``U`` is integrated with Magnus steps
    using ``Psi`` at the Gauss nodes of each step.
    """
    ham = problem.hamiltonian
    if not isinstance(ham, DenseHamiltonian):
        raise TypeError("fine references need a dense linear Hamiltonian")
    eps = problem.epsilon
    if phi0 is None:
        phi0 = eig_hermitian(ham.matrix(0.0), problem.N).eigenvectors[:, : problem.N]
    psi = np.array(as_orbitals(phi0), dtype=complex)
    n = psi.shape[1]
    isometric = orthonormality_error(psi) < 1e-12
    times = _rk4_grid(problem.T, h_ref)
    nsteps = len(times) - 1

    psis = [psi[None]]
    gauges = [np.eye(n, dtype=complex)[None]]
    gauge = np.eye(n, dtype=complex)
    for start in range(0, nsteps, chunk):
        stop = min(start + chunk, nsteps)
        t0 = times[start:stop]
        hs = times[start + 1 : stop + 1] - t0
        props = magnus4_propagators(ham, eps, t0, hs)
        chain = _apply_chain(props, psi, isometric=isometric)
        # Psi and H at the Gauss nodes of every step
        ms = []
        for c in _GAUSS_C:
            pc = magnus4_propagators(ham, eps, t0, c * hs) @ chain[:-1]
            ms.append(np.conj(np.swapaxes(pc, 1, 2)) @ ham.matrices(t0 + c * hs) @ pc)
        gprops = _gauge_propagators(ms[0], ms[1], hs[:, None, None], eps)
        gchain = _apply_chain(gprops, gauge, isometric=True)
        psis.append(chain[1:])
        gauges.append(gchain[1:])
        psi, gauge = chain[-1], gchain[-1]

    return FineReference(problem, times, np.concatenate(psis), np.concatenate(gauges), h_ref)


@dataclass
class SampledReference:
    """Schrödinger and PT states of one orbital on a coarse sample grid.

    Built by :func:`gl2_reference`; ``at`` only serves times on the grid.
    """

    problem: ProblemConfig
    times: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    h_ref: float

    def states(self, kind) -> np.ndarray:
        kind = DynamicsKind(kind)
        return self.psi if kind is DynamicsKind.SCHRODINGER else self.phi

    def at(self, times, kind) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        k = np.rint(times / (self.times[1] - self.times[0])).astype(int)
        if np.any(k < 0) or np.any(k >= len(self.times)) or np.any(
            np.abs(self.times[np.clip(k, 0, len(self.times) - 1)] - times) > 1e-9 * max(1.0, self.problem.T)
        ):
            raise ValueError("requested times are not on the reference sample grid")
        return self.states(kind)[k]


def _gl2_sampled(problem, kind, h_ref, m, nsamples, phi0, solver, precondition):
    """GL2 run storing every ``m``-th state and the gauge phase at those states.

    The phase ``theta = (1/eps) int phi* H phi dt`` is accumulated with
    composite Simpson over pairs of fine steps (``m`` is even).
    """
    from .integrators import gl2_step
    from .hamiltonians import apply_h

    eps = problem.epsilon
    ham = problem.hamiltonian
    u = np.array(as_orbitals(phi0), dtype=complex)

    def energy(t, x):
        return float(np.real(np.vdot(x[:, 0], apply_h(ham, t, x)[:, 0])))

    states = [u.copy()]
    thetas = [0.0]
    theta = 0.0
    e0 = energy(0.0, u)
    t = 0.0
    for s in range(1, nsamples):
        for pair in range(m // 2):
            t1 = t + h_ref
            u1, _ = gl2_step(problem, kind, t, u, h_ref, solver, precondition)
            u2, _ = gl2_step(problem, kind, t1, u1, h_ref, solver, precondition)
            e1, e2 = energy(t1, u1), energy(t1 + h_ref, u2)
            theta += (h_ref / 3.0) * (e0 + 4.0 * e1 + e2) / eps
            u, e0, t = u2, e2, t1 + h_ref
        t = s * m * h_ref
        states.append(u.copy())
        thetas.append(theta)
    return np.array(states), np.array(thetas)


def gl2_reference(
    problem: ProblemConfig,
    h_ref: float,
    sample_dt: float,
    phi0,
    base="PT",
    richardson: bool = True,
    solver=None,
    precondition: bool = False,
) -> SampledReference:
    """Reference solution for one orbital from fine GL2 steps.

    The ``base`` dynamics (``"PT"`` or ``"S"``) is propagated with step
    ``h_ref`` and stored every ``sample_dt``; the other gauge follows from
    the scalar phase ``theta' = phi* H phi / eps``. With ``richardson`` a
    second run at ``2 h_ref`` removes the leading ``h^2`` error term.
    """
    from .solvers import AndersonConfig

    base = DynamicsKind(base)
    if problem.N != 1:
        raise ValueError("gl2_reference handles a single orbital")
    if solver is None:
        solver = AndersonConfig(tol=1e-12)
    m = int(round(sample_dt / h_ref))
    if abs(m * h_ref - sample_dt) > 1e-9 * sample_dt or m % 4:
        raise ValueError("sample_dt must be a multiple of 4 h_ref")
    nsamples = int(round(problem.T / sample_dt)) + 1
    if abs((nsamples - 1) * sample_dt - problem.T) > 1e-9 * problem.T:
        raise ValueError("T must be a multiple of sample_dt")

    def run(step, mm):
        u, th = _gl2_sampled(problem, base, step, mm, nsamples, phi0, solver, precondition)
        rot = np.exp(-1j * th if base is not DynamicsKind.SCHRODINGER else 1j * th)[:, None, None]
        return (u * rot, u) if base is not DynamicsKind.SCHRODINGER else (u, u * rot)

    psi, phi = run(h_ref, m)
    if richardson:
        psi2, phi2 = run(2.0 * h_ref, m // 2)
        psi = (4.0 * psi - psi2) / 3.0
        phi = (4.0 * phi - phi2) / 3.0
    times = sample_dt * np.arange(nsamples)
    return SampledReference(problem, times, psi, phi, h_ref)
