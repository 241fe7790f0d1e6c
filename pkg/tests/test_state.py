import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_orbitals, random_unitary
from ptgauge.state import (
    DensityMatrix,
    OrbitalSet,
    RealImagPair,
    as_orbitals,
    density_from_orbitals,
    gauge_distance,
    orthonormality_error,
)


def test_density_of_basis_vector():
    P = density_from_orbitals(np.array([1.0, 0.0]))
    np.testing.assert_allclose(P.data, [[1, 0], [0, 0]], atol=0)


def test_density_of_complex_vector():
    P = density_from_orbitals(np.array([1.0, 1j]) / np.sqrt(2))
    np.testing.assert_allclose(P.data, [[0.5, -0.5j], [0.5j, 0.5]], atol=1e-15)


def test_density_random_rank3(rng):
    P = density_from_orbitals(random_orbitals(rng, 8, 3))
    assert abs(P.trace() - 3) < 1e-12
    assert P.idempotency_error() <= 1e-12
    assert P.hermiticity_error() <= 1e-12


def test_density_rejects_nonfinite():
    with pytest.raises(ValueError):
        density_from_orbitals(np.array([np.nan, 1.0]))


def test_gauge_distance_phase():
    phi = np.array([0.6, 0.8j])
    assert gauge_distance(phi, np.exp(0.7j) * phi) <= 1e-14


def test_gauge_distance_orthogonal():
    assert gauge_distance(np.array([1.0, 0]), np.array([0, 1.0])) == pytest.approx(np.sqrt(2), abs=1e-14)


def test_gauge_distance_shape_mismatch():
    with pytest.raises(ValueError):
        gauge_distance(np.ones((3, 1)), np.ones((3, 2)))


def test_orbital_set_validation():
    with pytest.raises(ValueError):
        OrbitalSet.orthonormal(np.array([[1.0], [1.0]]))
    o = OrbitalSet.orthonormal(np.array([[1.0], [0.0]]))
    assert (o.d, o.N) == (2, 1)
    with pytest.raises(ValueError):
        OrbitalSet(np.array([[np.inf], [0.0]]))


def test_as_orbitals_shapes():
    assert as_orbitals([1, 0]).shape == (2, 1)
    assert as_orbitals(np.eye(3)[:, :2]).shape == (3, 2)
    with pytest.raises(ValueError):
        as_orbitals(np.zeros((2, 2, 2)))


def test_density_matrix_requires_square():
    with pytest.raises(ValueError):
        DensityMatrix(np.zeros((2, 3)))


def test_real_imag_roundtrip_bit_exact(rng):
    phi = random_orbitals(rng, 5, 2)
    back = RealImagPair.from_orbitals(phi).to_orbitals().data
    assert np.array_equal(back, phi)
    np.testing.assert_allclose(RealImagPair.from_orbitals(phi).gram(), np.eye(2), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(2, 9), n=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_projector_properties(d, n, seed):
    n = min(n, d)
    phi = random_orbitals(np.random.default_rng(seed), d, n)
    P = density_from_orbitals(phi)
    assert P.hermiticity_error() <= 1e-12
    assert P.idempotency_error() <= 1e-10
    assert abs(P.trace() - n) <= 1e-10
    assert orthonormality_error(phi) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(d=st.integers(2, 9), n=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_gauge_distance_unitary_invariance(d, n, seed):
    n = min(n, d)
    rng = np.random.default_rng(seed)
    phi = random_orbitals(rng, d, n)
    U = random_unitary(rng, n)
    assert gauge_distance(phi, phi @ U) <= 1e-13
    other = random_orbitals(rng, d, n)
    assert gauge_distance(phi, other) == pytest.approx(gauge_distance(other, phi), abs=1e-13)
