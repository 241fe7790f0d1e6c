"""Time steppers (RK4, implicit midpoint GL2, Crank-Nicolson) and the driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .dynamics import DynamicsKind, generator, rhs_for
from .hamiltonians import ProblemConfig
from .solvers import AndersonConfig, SolveReport, anderson_solve
from .state import OrbitalSet, as_orbitals

log = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e8


class Scheme(str, Enum):
    RK4 = "RK4"
    GL2 = "GL2"
    CN = "CN"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for member in cls:
                if member.value == value.upper():
                    return member
        return None


class StepFailure(RuntimeError):
    """A step produced a non-finite state or its implicit solve did not converge."""

    def __init__(self, message: str, report: Optional[SolveReport] = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: Scheme
    h: float
    solver: AndersonConfig = field(default_factory=AndersonConfig)
    retry_halve: bool = False
    precondition: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.h > 0:
            raise ValueError("step size h must be positive")

    def time_grid(self, T: float) -> np.ndarray:
        """``t_n = n h`` with ``round(T / h)`` steps; the last step lands on ``T``."""
        n = max(1, int(round(T / self.h)))
        times = self.h * np.arange(n + 1)
        times[-1] = T
        return times


@dataclass
class Trajectory:
    """Sampled states with per-step solver diagnostics.

    ``states`` is stacked with shape ``(n_samples, d, N)`` (or ``(n, d, d)``
    for density matrices). ``iterations[k]`` is the number of fixed-point map
    evaluations spent on step ``k`` (zero for explicit schemes).
    """

    times: np.ndarray
    states: np.ndarray
    reports: list = field(default_factory=list)
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    failed: bool = False
    error: Optional[str] = None
    kind: Optional[DynamicsKind] = None
    scheme: Optional[Scheme] = None
    h: Optional[float] = None

    def __len__(self):
        return len(self.times)

    def orbitals(self, i: int) -> OrbitalSet:
        return OrbitalSet(self.states[i])

    @property
    def total_iterations(self) -> int:
        return int(np.sum(self.iterations))

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.states) ** 2, axis=(1, 2)))


def _check_finite(u: np.ndarray, u0_norm: float) -> None:
    if not np.all(np.isfinite(u)):
        raise StepFailure("non-finite state")
    if np.linalg.norm(u) > BLOWUP_FACTOR * max(u0_norm, 1.0):
        raise StepFailure("state norm blew up")


def rk4_step(rhs: Callable, t: float, phi: np.ndarray, h: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step for ``du/dt = rhs(t, u)``."""
    k1 = rhs(t, phi)
    k2 = rhs(t + 0.5 * h, phi + (0.5 * h) * k1)
    k3 = rhs(t + 0.5 * h, phi + (0.5 * h) * k2)
    k4 = rhs(t + h, phi + h * k3)
    out = phi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise StepFailure("RK4 produced a non-finite state")
    return out


def gl2_step(
    problem: ProblemConfig,
    kind,
    t: float,
    phi: np.ndarray,
    h: float,
    solver: AndersonConfig = AndersonConfig(),
    precondition: bool = False,
) -> tuple[np.ndarray, SolveReport]:
    """Implicit midpoint step.

    Solves ``u1 = u0 + (h / i eps) G(t + h/2, (u0 + u1)/2)`` where ``G`` is the
    generator of ``kind`` (``H^e u`` for orbitals, ``[H, P]`` for density
    matrices), warm-started from ``u0``. With ``precondition`` the Anderson
    residuals are preconditioned by the Hamiltonian's approximate Cayley
    inverse, when it provides one.
    """
    kind = DynamicsKind(kind)
    phi = np.asarray(phi, dtype=complex)
    if phi.ndim == 1:
        phi = phi[:, None]
    coef = h / (1j * problem.epsilon)
    tm = t + 0.5 * h

    def fmap(x):
        mid = 0.5 * (phi + x)
        return phi + coef * generator(problem, kind, tm, mid)

    pre = _preconditioner(problem, kind, 0.5 * coef, precondition)
    out, report = anderson_solve(fmap, phi, solver, pre)
    if not report.converged:
        raise StepFailure(f"GL2 fixed point did not converge at t={t:.6g}: {report}", report)
    return out, report


def _preconditioner(problem, kind, coef, enabled):
    if not enabled or kind is DynamicsKind.VON_NEUMANN:
        return None
    return problem.hamiltonian.cayley_preconditioner(coef)


def cn_step(
    problem: ProblemConfig,
    kind,
    t: float,
    phi: np.ndarray,
    h: float,
    solver: AndersonConfig = AndersonConfig(),
    precondition: bool = False,
) -> tuple[np.ndarray, SolveReport]:
    """Trapezoidal (Crank-Nicolson) step ``u1 = u0 + h/(2 i eps) (G(t, u0) + G(t + h, u1))``."""
    kind = DynamicsKind(kind)
    phi = np.asarray(phi, dtype=complex)
    if phi.ndim == 1:
        phi = phi[:, None]
    coef = h / (2j * problem.epsilon)
    explicit = phi + coef * generator(problem, kind, t, phi)

    def fmap(x):
        return explicit + coef * generator(problem, kind, t + h, x)

    pre = _preconditioner(problem, kind, coef, precondition)
    out, report = anderson_solve(fmap, phi, solver, pre)
    if not report.converged:
        raise StepFailure(f"CN fixed point did not converge at t={t:.6g}: {report}", report)
    return out, report


def _step(problem, kind, integ: IntegratorConfig, t, u, h, rhs):
    if integ.scheme is Scheme.RK4:
        return rk4_step(rhs, t, u, h), None
    if integ.scheme is Scheme.GL2:
        return gl2_step(problem, kind, t, u, h, integ.solver, integ.precondition)
    return cn_step(problem, kind, t, u, h, integ.solver, integ.precondition)


def _step_with_retry(problem, kind, integ, t, u, h, rhs, depth=0):
    """Take one step of size ``h``; on failure optionally halve recursively."""
    try:
        out, rep = _step(problem, kind, integ, t, u, h, rhs)
        return out, ([] if rep is None else [rep])
    except StepFailure:
        if not integ.retry_halve or depth >= 6:
            raise
        log.info("step failed at t=%.6g, retrying with h=%.3g", t, h / 2)
        mid, r1 = _step_with_retry(problem, kind, integ, t, u, h / 2, rhs, depth + 1)
        out, r2 = _step_with_retry(problem, kind, integ, t + h / 2, mid, h / 2, rhs, depth + 1)
        return out, r1 + r2


def propagate(
    problem: ProblemConfig,
    kind,
    integ: IntegratorConfig,
    phi0,
    stride: int = 1,
) -> Trajectory:
    """Propagate ``phi0`` over ``[0, problem.T]``.

    Orbital kinds take a ``(d, N)`` state; ``VON_NEUMANN`` takes a ``(d, d)``
    density matrix. States are stored every ``stride`` steps (the final state
    is always stored). A failing step truncates the trajectory and sets
    ``failed``/``error`` instead of raising.
    """
    kind = DynamicsKind(kind)
    if kind is DynamicsKind.VON_NEUMANN:
        u = np.array(phi0, dtype=complex)
    else:
        u = np.array(as_orbitals(phi0), dtype=complex)
    problem.hamiltonian.check_dim(u)
    grid = integ.time_grid(problem.T)
    rhs_fn = rhs_for(kind)

    def rhs(t, x):
        return rhs_fn(problem, t, x)

    u0_norm = float(np.linalg.norm(u))
    times, states, iters, reports = [grid[0]], [u.copy()], [], []
    failed, error = False, None
    nsteps = len(grid) - 1
    for n in range(nsteps):
        t, h = grid[n], grid[n + 1] - grid[n]
        try:
            u, reps = _step_with_retry(problem, kind, integ, t, u, h, rhs)
            _check_finite(u, u0_norm)
        except StepFailure as exc:
            failed, error = True, f"step {n} (t={t:.6g}): {exc}"
            log.warning("propagation stopped: %s", error)
            if exc.report is not None:
                reports.append(exc.report)
                iters.append(exc.report.iterations)
            break
        reports.extend(reps)
        iters.append(sum(r.iterations for r in reps))
        if (n + 1) % stride == 0 or n + 1 == nsteps:
            times.append(grid[n + 1])
            states.append(u.copy())

    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        reports=reports,
        iterations=np.array(iters, dtype=int),
        failed=failed,
        error=error,
        kind=kind,
        scheme=integ.scheme,
        h=integ.h,
    )
