"""Error metrics, convergence and scaling studies, turning points, observables and cost."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .dynamics import DynamicsKind
from .hamiltonians import NlseHamiltonian, ProblemConfig
from .integrators import IntegratorConfig, Scheme, Trajectory, propagate
from .reference import FineReference, SampledReference
from .solvers import AndersonConfig

log = logging.getLogger(__name__)

# relative tolerance used to match sample times between trajectories
TIME_MATCH_RTOL = 1e-9


def _match_times(times: np.ndarray, ref_times: np.ndarray, T: float) -> np.ndarray:
    idx = np.clip(np.searchsorted(ref_times, times), 0, len(ref_times) - 1)
    lo = np.clip(idx - 1, 0, len(ref_times) - 1)
    pick = np.where(np.abs(ref_times[lo] - times) < np.abs(ref_times[idx] - times), lo, idx)
    if np.any(np.abs(ref_times[pick] - times) > TIME_MATCH_RTOL * max(T, 1.0)):
        raise ValueError("reference is not sampled at the trajectory times")
    return pick


def reference_states(ref, times: np.ndarray, kind) -> np.ndarray:
    """States of ``ref`` at ``times`` in the representation of ``kind``.

    ``ref`` may be a :class:`FineReference`, a :class:`Trajectory` sampled on
    a superset of ``times``, or a callable ``(times, kind) -> states``.
    """
    times = np.asarray(times, dtype=float)
    if isinstance(ref, (FineReference, SampledReference)):
        return ref.at(times, kind)
    if isinstance(ref, Trajectory):
        T = float(ref.times[-1]) if len(ref.times) else 1.0
        return ref.states[_match_times(times, np.asarray(ref.times), T)]
    if callable(ref):
        return np.asarray(ref(times, kind))
    raise TypeError(f"unsupported reference type {type(ref).__name__}")


def error_metric(traj: Trajectory, ref, kind=None) -> float:
    """``max_n ||u_n - u(t_n)||_2`` over the samples of ``traj``.

    ``u`` is compared in the representation of the trajectory's dynamics
    (the complex 2-norm of ``q + ip`` equals the 2-norm of ``(q, p)``). For
    multi-orbital states the norm is the Frobenius norm.
    """
    kind = DynamicsKind(kind if kind is not None else traj.kind)
    if len(traj.times) == 0:
        raise ValueError("empty trajectory")
    exact = reference_states(ref, np.asarray(traj.times), kind)
    if exact.shape != traj.states.shape:
        raise ValueError(f"shape mismatch {traj.states.shape} vs {exact.shape}")
    diff = traj.states - exact
    return float(np.max(np.sqrt(np.sum(np.abs(diff) ** 2, axis=tuple(range(1, diff.ndim))))))


@dataclass(frozen=True)
class PowerFit:
    slope: float
    intercept: float
    r2: float


def power_fit(xs: Sequence[float], ys: Sequence[float]) -> PowerFit:
    """Least-squares line through ``(log x, log y)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.log(np.asarray(xs, dtype=float))
        y = np.log(np.asarray(ys, dtype=float))
    if x.size < 2:
        raise ValueError("need at least two points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("slope fit needs finite positive data")
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return PowerFit(float(slope), float(icpt), r2)


def slope_fit(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Log-log least-squares slope."""
    return power_fit(xs, ys).slope


@dataclass
class TurningPoints:
    """Turning points of a (possibly two-stage) error curve."""

    h_T: Optional[float] = None
    h_T1: Optional[float] = None
    plateau: Optional[float] = None
    h_T2: Optional[float] = None


@dataclass
class ConvergenceStudy:
    """Errors of one method over a step-size sweep at fixed ``eps``.

    ``h_values`` is strictly decreasing. Diverged or failed runs carry
    ``errors = nan`` and ``diverged = True``.
    """

    h_values: np.ndarray
    errors: np.ndarray
    eps: float
    method: str
    diverged: np.ndarray = None
    iterations: np.ndarray = None
    wall_seconds: np.ndarray = None
    turning_points: Optional[TurningPoints] = None

    def __post_init__(self):
        self.h_values = np.asarray(self.h_values, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)
        n = len(self.h_values)
        if self.errors.shape != (n,):
            raise ValueError("one error per step size")
        if n > 1 and not np.all(np.diff(self.h_values) < 0):
            raise ValueError("h_values must be strictly decreasing")
        if self.diverged is None:
            self.diverged = ~np.isfinite(self.errors)
        self.diverged = np.asarray(self.diverged, dtype=bool)
        self.errors = np.where(self.diverged, np.nan, self.errors)
        if self.iterations is None:
            self.iterations = np.zeros(n, dtype=int)
        self.iterations = np.asarray(self.iterations, dtype=int)
        if self.wall_seconds is None:
            self.wall_seconds = np.zeros(n)
        self.wall_seconds = np.asarray(self.wall_seconds, dtype=float)

    def valid(self) -> np.ndarray:
        return ~self.diverged & np.isfinite(self.errors) & (self.errors > 0)

    def local_slopes(self) -> tuple[np.ndarray, np.ndarray]:
        """Two-point log-log slopes between adjacent valid samples.

        Returns ``(h_left, slope)`` with each slope attributed to the larger
        step of its pair.
        """
        ok = self.valid()
        h, e = self.h_values[ok], self.errors[ok]
        if len(h) < 2:
            return np.zeros(0), np.zeros(0)
        s = np.diff(np.log(e)) / np.diff(np.log(h))
        return h[:-1], s

    def convergent_region(self, floor: float = 0.0, threshold: float = 1.0) -> np.ndarray:
        """Mask of the asymptotic regime: the trailing run of samples whose
        adjacent slopes all exceed ``threshold``, restricted to errors above
        ``floor``.
        """
        ok = self.valid() & (np.nan_to_num(self.errors, nan=0.0) > floor)
        idx = np.nonzero(ok)[0]
        mask = np.zeros(len(self.h_values), dtype=bool)
        if len(idx) < 2:
            return mask
        e, h = self.errors[idx], self.h_values[idx]
        s = np.diff(np.log(e)) / np.diff(np.log(h))
        k = len(s)
        while k > 0 and s[k - 1] > threshold:
            k -= 1
        if k == len(s):
            return mask
        mask[idx[k:]] = True
        return mask

    def order(self, floor: float = 0.0, skip: int = 1) -> PowerFit:
        """Fitted log-log slope over :meth:`convergent_region`.

        The first ``skip`` samples of the region (the turning point itself
        and its neighbours) are pre-asymptotic and left out of the fit.
        """
        m = self.convergent_region(floor)
        idx = np.nonzero(m)[0]
        if len(idx) - skip >= 2:
            m[idx[:skip]] = False
        if m.sum() < 2:
            raise ValueError(f"{self.method}: no convergent region with two or more points")
        return power_fit(self.h_values[m], self.errors[m])


def turning_point(
    study: Union[ConvergenceStudy, tuple],
    h1: Optional[float] = None,
    h2: Optional[float] = None,
    threshold: float = 1.0,
    sustain: int = 1,
) -> Optional[float]:
    """Largest ``h`` in ``[h1, h2]`` whose adjacent log-log slope exceeds ``threshold``.

    The slope between neighbouring samples ``h_i > h_{i+1}`` is attributed to
    ``h_i``. With ``sustain = k`` the ``k`` consecutive slopes starting at
    ``h_i`` must all qualify, which rejects isolated kinks in the noisy
    pre-asymptotic region. Returns ``None`` when no sample qualifies.
    """
    if not isinstance(study, ConvergenceStudy):
        hs, es = study
        study = ConvergenceStudy(hs, es, eps=float("nan"), method="")
    h, s = study.local_slopes()
    lo = -np.inf if h1 is None else h1 * (1 - 1e-12)
    hi = np.inf if h2 is None else h2 * (1 + 1e-12)
    good = s > threshold
    for i in range(len(h)):
        if not lo <= h[i] <= hi:
            continue
        if i + sustain <= len(s) and np.all(good[i : i + sustain]):
            return float(h[i])
    return None


def two_stage_turning_points(
    study: ConvergenceStudy,
    threshold: float = 1.0,
    plateau_slope: float = 0.3,
    sustain: int = 2,
) -> TurningPoints:
    """First turning point, plateau level and second turning point.

    ``h_T1`` is the turning point of the whole curve. Following it, the
    first run of adjacent slopes below ``plateau_slope`` in magnitude marks
    the plateau; its level is the geometric mean of the errors there.
    ``h_T2`` is the turning point restricted to steps below the plateau.
    """
    tp = TurningPoints()
    h, s = study.local_slopes()
    ok = study.valid()
    e_valid = study.errors[ok]
    tp.h_T1 = turning_point(study, threshold=threshold, sustain=sustain)
    if tp.h_T1 is None:
        return tp
    i = int(np.nonzero(h == tp.h_T1)[0][0])
    while i < len(s) and s[i] > plateau_slope:
        i += 1
    j = i
    while j < len(s) and abs(s[j]) < plateau_slope:
        j += 1
    if j == i:
        return tp
    # errors at samples i..j (the slope s[k] joins samples k and k+1)
    tp.plateau = float(np.exp(np.mean(np.log(e_valid[i : j + 1]))))
    h_plateau_end = h[j - 1] if j - 1 < len(h) else None
    tp.h_T2 = turning_point(study, h2=h_plateau_end, threshold=threshold, sustain=sustain)
    return tp


# ---------------------------------------------------------------------------
# observables


def _density(phi: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(phi) ** 2, axis=1)


def energy_functional(problem: ProblemConfig, kind, t: float, phi: np.ndarray) -> float:
    """Energy functional (without the conjugate ``E`` term) driving ``kind``.

    Schrödinger-type kinds use ``(Tr Phi* H0 Phi + G[rho]) / 2 eps``; the
    PT-Hamiltonian kind uses
    ``(Tr (Phi* H0 Phi + 2 G)(2 I - Phi* Phi) - G) / 2 eps`` with
    interaction energy ``G``, which reduces to the linear form when ``G = 0``.
    """
    kind = DynamicsKind(kind)
    ham = problem.hamiltonian
    phi = np.asarray(phi, dtype=complex)
    if phi.ndim == 1:
        phi = phi[:, None]
    m0 = phi.conj().T @ ham.apply_linear(t, phi)
    G = ham.interaction_energy(_density(phi)) if ham.nonlinear else 0.0
    if kind is DynamicsKind.PT_HAMILTONIAN:
        if G != 0.0 and phi.shape[1] > 1:
            raise NotImplementedError("nonlinear PT-Hamiltonian energy is defined for one orbital")
        s = 2.0 * np.eye(phi.shape[1]) - phi.conj().T @ phi
        val = np.real(np.trace(m0 @ s)) + 2.0 * G * np.real(s[0, 0]) - G
    else:
        val = np.real(np.trace(m0)) + G
    return float(val) / (2.0 * problem.epsilon)


def energy_time_derivative(problem: ProblemConfig, kind, t: float, phi: np.ndarray) -> float:
    """``d/dtau`` of :func:`energy_functional` at fixed state."""
    kind = DynamicsKind(kind)
    ham = problem.hamiltonian
    phi = np.asarray(phi, dtype=complex)
    if phi.ndim == 1:
        phi = phi[:, None]
    m = phi.conj().T @ ham.apply_linear_dt(t, phi)
    if kind is DynamicsKind.PT_HAMILTONIAN:
        m = m @ (2.0 * np.eye(phi.shape[1]) - phi.conj().T @ phi)
    return float(np.real(np.trace(m))) / (2.0 * problem.epsilon)


def reconstruct_conjugate_energy(problem: ProblemConfig, traj: Trajectory) -> np.ndarray:
    """Conjugate variable ``E`` along ``traj`` (``E(0) = 0``).

    ``E' = -d/dtau energy`` is integrated with the midpoint rule using the
    average of consecutive states, which is what the implicit midpoint rule
    applied to the extended system produces.
    """
    kind = DynamicsKind(traj.kind)
    E = np.zeros(len(traj.times))
    for n in range(len(traj.times) - 1):
        h = traj.times[n + 1] - traj.times[n]
        mid = 0.5 * (traj.states[n] + traj.states[n + 1])
        E[n + 1] = E[n] - h * energy_time_derivative(problem, kind, traj.times[n] + 0.5 * h, mid)
    return E


def orbital_center(ham: NlseHamiltonian, phi: np.ndarray) -> float:
    """``<x> = sum x_k |phi_k|^2 / sum |phi_k|^2``."""
    rho = _density(np.asarray(phi).reshape(ham.d, -1))
    return float(np.dot(ham.x, rho) / np.sum(rho))


@dataclass
class Observables:
    times: np.ndarray
    norm: np.ndarray
    energy: np.ndarray
    total_energy: np.ndarray
    x_center: Optional[np.ndarray] = None


def observables(traj: Trajectory, problem: ProblemConfig) -> Observables:
    """Per-sample norm, energy functional, extended energy and (NLSE) orbital center.

    ``total_energy`` adds the reconstructed conjugate energy ``E`` so that it
    is conserved by the exact flow of the extended autonomous system.
    """
    if traj.kind is DynamicsKind.VON_NEUMANN:
        raise ValueError("observables are defined for orbital trajectories")
    norms = np.sqrt(np.sum(np.abs(traj.states) ** 2, axis=(1, 2)))
    energy = np.array([energy_functional(problem, traj.kind, t, u) for t, u in zip(traj.times, traj.states)])
    total = energy + reconstruct_conjugate_energy(problem, traj)
    xc = None
    if isinstance(problem.hamiltonian, NlseHamiltonian):
        xc = np.array([orbital_center(problem.hamiltonian, u) for u in traj.states])
    return Observables(np.asarray(traj.times), norms, energy, total, xc)


# ---------------------------------------------------------------------------
# sweeps and cost


@dataclass(frozen=True)
class Method:
    """A dynamics kind paired with a scheme, e.g. ``PT-Ham-GL2``."""

    kind: DynamicsKind
    scheme: Scheme

    @property
    def label(self) -> str:
        return f"{self.kind.value}-{self.scheme.value}"

    @classmethod
    def parse(cls, label: str) -> "Method":
        kind, _, scheme = label.rpartition("-")
        if not kind:
            raise ValueError(f"method label must look like KIND-SCHEME, got {label!r}")
        return cls(DynamicsKind(kind), Scheme(scheme))


def method(label: str) -> Method:
    return Method.parse(label)


@dataclass
class RunResult:
    error: float
    diverged: bool
    iterations: int
    wall_seconds: float
    message: Optional[str] = None


def run_point(
    problem: ProblemConfig,
    meth: Method,
    h: float,
    ref,
    phi0,
    solver: AndersonConfig = AndersonConfig(),
    retry_halve: bool = False,
    precondition: bool = False,
) -> RunResult:
    """Propagate one (method, h) point and measure its error against ``ref``."""
    integ = IntegratorConfig(meth.scheme, h, solver, retry_halve, precondition)
    t0 = time.perf_counter()
    traj = propagate(problem, meth.kind, integ, phi0)
    wall = time.perf_counter() - t0
    if traj.failed:
        return RunResult(float("nan"), True, traj.total_iterations, wall, traj.error)
    return RunResult(error_metric(traj, ref), False, traj.total_iterations, wall)


_WORKER: dict = {}


def _init_worker(problem, ref, phi0, solver, retry_halve, precondition):
    _WORKER.update(problem=problem, ref=ref, phi0=phi0, solver=solver, retry_halve=retry_halve, precondition=precondition)


def _worker_point(job):
    meth, h = job
    w = _WORKER
    return run_point(w["problem"], meth, h, w["ref"], w["phi0"], w["solver"], w["retry_halve"], w["precondition"])


def convergence_study(
    problem: ProblemConfig,
    meth: Union[Method, str],
    h_values: Sequence[float],
    ref,
    phi0,
    solver: AndersonConfig = AndersonConfig(),
    retry_halve: bool = False,
    jobs: int = 1,
    precondition: bool = False,
) -> ConvergenceStudy:
    """Error, divergence flag, Anderson iterations and wall time per step size.

    With ``jobs > 1`` the step sizes run in a process pool; results are
    assembled in input order so the study does not depend on scheduling.
    """
    meth = Method.parse(meth) if isinstance(meth, str) else meth
    hs = sorted((float(h) for h in h_values), reverse=True)
    if jobs > 1 and len(hs) > 1:
        init = (problem, ref, phi0, solver, retry_halve, precondition)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init) as pool:
            results = list(pool.map(_worker_point, [(meth, h) for h in hs]))
    else:
        results = [run_point(problem, meth, h, ref, phi0, solver, retry_halve, precondition) for h in hs]
    for h, r in zip(hs, results):
        if r.diverged:
            log.info("%s h=%.4g diverged: %s", meth.label, h, r.message)
    return ConvergenceStudy(
        h_values=np.array(hs),
        errors=np.array([r.error for r in results]),
        eps=problem.epsilon,
        method=meth.label,
        diverged=np.array([r.diverged for r in results]),
        iterations=np.array([r.iterations for r in results]),
        wall_seconds=np.array([r.wall_seconds for r in results]),
    )


@dataclass
class CostRow:
    method: str
    eps: float
    h: float
    error: float
    total_iterations: int


def cost_report(studies: Sequence[ConvergenceStudy]) -> list[CostRow]:
    """One row per converged (method, h) point."""
    rows = []
    for st in studies:
        for h, e, it, dv in zip(st.h_values, st.errors, st.iterations, st.diverged):
            if not dv:
                rows.append(CostRow(st.method, st.eps, float(h), float(e), int(it)))
    return rows


def cost_at_error(study: ConvergenceStudy, level: float) -> Optional[int]:
    """Fewest Anderson iterations among runs reaching ``error <= level``."""
    ok = study.valid() & (np.nan_to_num(study.errors, nan=np.inf) <= level)
    if not np.any(ok):
        return None
    return int(np.min(study.iterations[ok]))


@dataclass
class CostComparison:
    levels: np.ndarray
    cost_a: np.ndarray
    cost_b: np.ndarray

    @property
    def a_cheaper_everywhere(self) -> bool:
        return bool(len(self.levels) > 0 and np.all(self.cost_a < self.cost_b))


def compare_cost(a: ConvergenceStudy, b: ConvergenceStudy, max_level: float = 1.0) -> CostComparison:
    """Cost of ``a`` and ``b`` at every error level reached by both.

    The levels are the errors attained by either study that both studies
    reach (``error <= level`` for some run of each); the cost at a level is
    :func:`cost_at_error`. A method whose worst error is below the other's
    best is compared at every level the other attains. Levels at or above
    ``max_level`` are dropped: for unit-norm states an error near 1 or 2
    carries no accuracy at all.
    """
    ea, eb = a.errors[a.valid()], b.errors[b.valid()]
    if len(ea) == 0 or len(eb) == 0:
        return CostComparison(np.zeros(0), np.zeros(0, int), np.zeros(0, int))
    lo = max(ea.min(), eb.min())
    levels = np.unique(np.concatenate([ea, eb]))
    levels = levels[(levels >= lo) & (levels < max_level)]
    ca = np.array([cost_at_error(a, lv) for lv in levels], dtype=int)
    cb = np.array([cost_at_error(b, lv) for lv in levels], dtype=int)
    return CostComparison(levels, ca, cb)


def derivative_magnitude(times: np.ndarray, states: np.ndarray) -> float:
    """``max_t ||du/dt||`` by second-order central differences on a uniform grid."""
    times = np.asarray(times)
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-6):
        raise ValueError("uniform sampling required")
    d = (states[2:] - states[:-2]) / (2.0 * dt[0])
    return float(np.max(np.sqrt(np.sum(np.abs(d) ** 2, axis=tuple(range(1, d.ndim))))))


def max_deviation(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
