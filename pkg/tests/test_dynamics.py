import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_orbitals, toy_problem
from ptgauge.dynamics import (
    DynamicsKind,
    qp_rhs_pt_hamiltonian,
    rhs_for,
    rhs_pt,
    rhs_pt_hamiltonian,
    rhs_schrodinger,
    rhs_von_neumann,
)
from ptgauge.hamiltonians import MatrixHamiltonian, NlseHamiltonian, ProblemConfig, apply_h
from ptgauge.state import density_from_orbitals

E1 = np.array([1.0, 0.0])


def test_kind_names():
    assert DynamicsKind("S") is DynamicsKind.SCHRODINGER
    assert DynamicsKind("PT-Ham") is DynamicsKind.PT_HAMILTONIAN
    assert DynamicsKind("vn") is DynamicsKind.VON_NEUMANN
    assert {rhs_for(k) for k in DynamicsKind} == {rhs_schrodinger, rhs_pt, rhs_pt_hamiltonian, rhs_von_neumann}
    with pytest.raises(ValueError):
        DynamicsKind("nope")


def test_schrodinger_at_crossing():
    out = rhs_schrodinger(toy_problem(eps=1.0), 0.5, E1)[:, 0]
    np.testing.assert_allclose(out, [0, -1j], atol=1e-15)


def test_pt_at_crossing():
    out = rhs_pt(toy_problem(eps=0.01), 0.5, E1)[:, 0]
    np.testing.assert_allclose(out, [0, -100j], atol=1e-12)


def test_pt_of_static_eigenvector_vanishes():
    prob = toy_problem(frozen=0.2)
    v = np.linalg.eigh(prob.hamiltonian.matrix(0.0))[1][:, 0]
    assert np.linalg.norm(rhs_pt(prob, 0.7, v)) <= 1e-12


def test_pt_ham_scaled_state():
    prob = toy_problem()
    phi = np.sqrt(2) * np.array([0.6, 0.8])[:, None]
    e = (phi.conj().T @ prob.hamiltonian.matrix(0.3) @ phi)[0, 0]
    expected = -e * phi / (1j * prob.epsilon)
    np.testing.assert_allclose(rhs_pt_hamiltonian(prob, 0.3, phi), expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0, 1))
def test_norm_derivative_zero_and_pt_condition(seed, t):
    rng = np.random.default_rng(seed)
    for prob in (toy_problem(), ProblemConfig(0.01, 1.0, NlseHamiltonian(50.0, 32))):
        phi = random_orbitals(rng, prob.hamiltonian.dim, 1)
        for rhs in (rhs_schrodinger, rhs_pt):
            r = rhs(prob, t, phi)
            assert abs(np.vdot(phi, r).real) <= 1e-12 * max(1.0, np.linalg.norm(r))
        r = rhs_pt(prob, t, phi)
        P = density_from_orbitals(phi).data
        assert np.linalg.norm(P @ r) <= 1e-12 * max(1.0, np.linalg.norm(r))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0, 1))
def test_pt_ham_equals_pt_on_normalized(seed, t):
    rng = np.random.default_rng(seed)
    prob = ProblemConfig(0.01, 1.0, MatrixHamiltonian.synthetic(), 2)
    phi = random_orbitals(rng, 4, 2)
    np.testing.assert_allclose(rhs_pt_hamiltonian(prob, t, phi), rhs_pt(prob, t, phi), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0, 1), scale=st.floats(0.5, 1.5))
def test_qp_split_matches_complex_form(seed, t, scale):
    rng = np.random.default_rng(seed)
    prob = ProblemConfig(0.05, 1.0, MatrixHamiltonian.synthetic(), 1)
    phi = scale * random_orbitals(rng, 4, 1)
    dq, dp = qp_rhs_pt_hamiltonian(prob, t, phi.real, phi.imag)
    r = rhs_pt_hamiltonian(prob, t, phi)
    np.testing.assert_allclose(dq, r.real, atol=1e-12 * np.abs(r).max())
    np.testing.assert_allclose(dp, r.imag, atol=1e-12 * np.abs(r).max())


def test_nlse_stationary_state():
    ham = NlseHamiltonian(50.0, 200)
    prob = ProblemConfig(0.01, 1.0, ham)
    g = ham.ground_state(0.0)
    hg = apply_h(ham, 0.0, g)
    lam = np.vdot(g, hg).real
    np.testing.assert_allclose(rhs_schrodinger(prob, 0.0, g), lam * g / (1j * prob.epsilon), atol=1e-7)
    assert np.linalg.norm(rhs_pt(prob, 0.0, g)) <= 1e-7


def test_von_neumann_static_eigenprojector():
    prob = toy_problem(frozen=0.1)
    v = np.linalg.eigh(prob.hamiltonian.matrix(0.0))[1][:, :1]
    P = v @ v.conj().T
    assert np.linalg.norm(rhs_von_neumann(prob, 0.4, P)) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0, 1))
def test_von_neumann_trace_and_product_rule(seed, t):
    rng = np.random.default_rng(seed)
    for prob in (toy_problem(), ProblemConfig(0.02, 1.0, NlseHamiltonian(50.0, 16))):
        d = prob.hamiltonian.dim
        phi = random_orbitals(rng, d, 1)
        P = density_from_orbitals(phi).data
        r = rhs_von_neumann(prob, t, P)
        assert abs(np.trace(r)) <= 1e-12 * max(1.0, np.linalg.norm(r))
        # i eps r is a commutator of Hermitians, hence anti-Hermitian
        c = 1j * prob.epsilon * r
        np.testing.assert_allclose(c, -c.conj().T, atol=1e-12 * max(1.0, np.abs(c).max()))
        # d/dt (phi phi*) along the PT flow
        dphi = rhs_pt(prob, t, phi)
        dP = dphi @ phi.conj().T + phi @ dphi.conj().T
        np.testing.assert_allclose(dP, r, atol=1e-10 * max(1.0, np.abs(r).max()))
