import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ground, toy_problem
from ptgauge.analysis import observables
from ptgauge.hamiltonians import MatrixHamiltonian, ProblemConfig
from ptgauge.integrators import (
    IntegratorConfig,
    Scheme,
    StepFailure,
    cn_step,
    gl2_step,
    propagate,
    rk4_step,
)
from ptgauge.reference import fine_reference
from ptgauge.solvers import AndersonConfig
from ptgauge.state import gauge_distance

TIGHT = AndersonConfig(tol=1e-12)


def zero_problem(eps=0.01):
    z = np.zeros((2, 2))
    return ProblemConfig(eps, 1.0, MatrixHamiltonian(z, z))


def test_config_and_grid():
    cfg = IntegratorConfig("GL2", 0.3)
    assert cfg.scheme is Scheme.GL2
    grid = cfg.time_grid(1.0)
    assert len(grid) == 4 and grid[-1] == 1.0
    assert np.all(np.diff(grid) > 0)
    with pytest.raises(ValueError):
        IntegratorConfig("GL2", 0.0)
    with pytest.raises(ValueError):
        IntegratorConfig("GL4", 0.1)


def test_rk4_zero_rhs():
    phi = np.array([[0.6], [0.8j]])
    assert np.array_equal(rk4_step(lambda t, x: 0 * x, 0.0, phi, 0.1), phi)


def test_rk4_scalar_linear():
    lam, eps, h = 2.0, 0.5, 0.1
    z = lam * h / (1j * eps)
    out = rk4_step(lambda t, x: lam * x / (1j * eps), 0.0, np.array([1.0 + 0j]), h)
    assert out[0] == pytest.approx(1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24, abs=1e-15)


def test_rk4_nonfinite_raises():
    with pytest.raises(StepFailure):
        rk4_step(lambda t, x: np.full_like(x, np.inf), 0.0, np.ones(2), 0.1)


@pytest.mark.parametrize("step", [gl2_step, cn_step])
def test_implicit_zero_hamiltonian_is_identity(step):
    phi = np.array([[0.6], [0.8]], dtype=complex)
    out, rep = step(zero_problem(), "PT", 0.0, phi, 0.1)
    assert np.array_equal(out, phi) and rep.iterations == 1


def test_gl2_matches_cayley_form():
    prob = toy_problem(eps=0.01)
    phi = ground(prob)
    h, t = 0.01, 0.2
    out, _ = gl2_step(prob, "S", t, phi, h, TIGHT)
    H = prob.hamiltonian.matrix(t + h / 2)
    a = h * H / (2j * prob.epsilon)
    cay = np.linalg.solve(np.eye(2) - a, (np.eye(2) + a) @ phi)
    np.testing.assert_allclose(out, cay, atol=1e-11)


def test_cn_equals_gl2_for_autonomous_linear():
    prob = toy_problem(frozen=0.3)
    phi = np.array([[0.6], [0.8]], dtype=complex)
    a, _ = gl2_step(prob, "S", 0.0, phi, 0.05, TIGHT)
    b, _ = cn_step(prob, "S", 0.0, phi, 0.05, TIGHT)
    np.testing.assert_allclose(a, b, atol=1e-11)


def test_gl2_failure_raises():
    with pytest.raises(StepFailure):
        gl2_step(toy_problem(eps=0.001), "S", 0.0, np.array([1.0, 0.0]), 0.5, AndersonConfig(max_iter=3))


@pytest.mark.parametrize("kind", ["PT", "PT-Ham"])
def test_gl2_norm_conservation_long_run(kind):
    prob = toy_problem(eps=0.01, T=10.0)
    traj = propagate(prob, kind, IntegratorConfig("GL2", 1e-3, TIGHT), ground(prob), stride=100)
    assert not traj.failed and len(traj.iterations) == 10_000
    assert np.max(np.abs(traj.norms() - 1)) <= 1e-10


@pytest.mark.parametrize("kind", ["S", "PT", "PT-Ham"])
def test_gl2_time_reversible(kind):
    prob = toy_problem(eps=0.01)
    phi = ground(prob, 0.3)
    h, t = 0.01, 0.3
    fwd, _ = gl2_step(prob, kind, t, phi, h, TIGHT)
    back, _ = gl2_step(prob, kind, t + h, fwd, -h, TIGHT)
    assert np.linalg.norm(back - phi) <= 10 * TIGHT.tol


def test_stationary_eigenstate():
    prob = toy_problem(eps=0.01, frozen=0.5)
    phi0 = ground(prob)
    traj = propagate(prob, "PT", IntegratorConfig("GL2", 0.1), phi0)
    assert len(traj) == 11
    assert np.max(np.linalg.norm(traj.states - phi0, axis=(1, 2))) <= 1e-8


def test_rk4_blowup_is_flagged():
    prob = toy_problem(eps=0.001)
    traj = propagate(prob, "S", IntegratorConfig("RK4", 0.05), ground(prob))
    assert traj.failed and traj.error
    assert len(traj) < 21 and np.all(np.isfinite(traj.states))


def test_failure_truncates_and_retry_halve_recovers():
    prob = toy_problem(eps=0.01)
    cfg = AndersonConfig(max_iter=8)
    bad = propagate(prob, "PT", IntegratorConfig("GL2", 0.1, cfg), ground(prob))
    assert bad.failed
    ok = propagate(prob, "PT", IntegratorConfig("GL2", 0.1, cfg, retry_halve=True), ground(prob))
    assert not ok.failed and ok.times[-1] == 1.0


def test_stride_keeps_final_state():
    prob = toy_problem()
    traj = propagate(prob, "PT", IntegratorConfig("RK4", 0.003), ground(prob), stride=7)
    assert traj.times[-1] == 1.0
    assert np.all(np.diff(traj.times) > 0)


@pytest.fixture(scope="module")
def ref01():
    prob = toy_problem(eps=0.01)
    return prob, fine_reference(prob, 1e-4, ground(prob))


@pytest.mark.xfail(
    strict=True,
    reason="h=1e-2 at eps=0.01 sits on the O(eps) plateau of the PT error curve; measured final "
    "gauge distance 5.06e-3 (PT-GL2 and PT-Ham-GL2 give the same), so a 1e-3 bound is not met",
)
def test_pt_cn_close_to_reference(ref01):
    prob, ref = ref01
    traj = propagate(prob, "PT", IntegratorConfig("CN", 1e-2, TIGHT), ground(prob))
    assert gauge_distance(traj.final_state, ref.psi[-1]) <= 1e-3


def test_pt_cn_within_factor_two_of_pt_gl2(ref01):
    from ptgauge.analysis import error_metric

    prob, ref = ref01
    for h in (2e-3, 1e-3, 5e-4):
        e = {}
        for s in ("GL2", "CN"):
            e[s] = error_metric(propagate(prob, "PT", IntegratorConfig(s, h, TIGHT), ground(prob)), ref)
        assert 0.5 <= e["CN"] / e["GL2"] <= 2.0


def test_pt_cn_norm_error_is_bounded_and_second_order():
    # baseline (eps=0.01, ground-state start): max |norm - 1| = 9.35e-6, 2.34e-6, 3.69e-7
    # at h = 1e-2, 5e-3, 2e-3; bounded oscillation rather than accumulation
    prob = toy_problem(eps=0.01)
    dev = []
    for h in (1e-2, 5e-3, 2e-3):
        n = propagate(prob, "PT", IntegratorConfig("CN", h, TIGHT), ground(prob)).norms()
        dev.append(np.max(np.abs(n - 1)))
    assert dev[0] <= 2e-5
    assert np.log(dev[0] / dev[2]) / np.log(5.0) == pytest.approx(2.0, abs=0.2)


def test_rk4_self_convergence_order(ref01):
    from ptgauge.analysis import error_metric, power_fit

    prob, ref = ref01
    hs = [4e-3, 2e-3, 1e-3, 5e-4]
    es = [error_metric(propagate(prob, "PT", IntegratorConfig("RK4", h), ground(prob)), ref) for h in hs]
    assert power_fit(hs, es).slope == pytest.approx(4.0, abs=0.2)


def test_pt_ham_gl2_extended_energy_has_no_secular_drift():
    # baseline at h=1e-3, tol 1e-12: max excursion 1.0e-6, end-point drift 8.8e-10
    prob = toy_problem(eps=0.01)
    traj = propagate(prob, "PT-Ham", IntegratorConfig("GL2", 1e-3, TIGHT), ground(prob))
    tot = observables(traj, prob).total_energy
    assert np.max(np.abs(tot - tot[0])) <= 1e-5
    assert abs(tot[-1] - tot[0]) <= 1e-8


def test_reports_and_iterations():
    prob = toy_problem()
    traj = propagate(prob, "PT", IntegratorConfig("GL2", 0.01), ground(prob))
    assert len(traj.reports) == 100 and traj.total_iterations == sum(r.iterations for r in traj.reports)
    rk = propagate(prob, "PT", IntegratorConfig("RK4", 0.01), ground(prob))
    assert rk.total_iterations == 0 and rk.reports == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(1e-3, 2e-2), st.sampled_from(["PT", "PT-Ham", "S"]))
def test_gl2_step_preserves_norm(seed, t, h, kind):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    phi = (z / np.linalg.norm(z))[:, None]
    out, rep = gl2_step(toy_problem(eps=0.05), kind, t, phi, h, AndersonConfig(tol=1e-14))
    assert rep.converged
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-13
