import numpy as np
import pytest

from ptgauge.hamiltonians import FrozenHamiltonian, MatrixHamiltonian, ProblemConfig, ToyHamiltonian
from ptgauge.reference import eig_hermitian


def toy_problem(eps=0.01, delta=1.0, t0=0.5, T=1.0, frozen=None):
    ham = ToyHamiltonian(t0, delta)
    if frozen is not None:
        ham = FrozenHamiltonian(ham, frozen)
    return ProblemConfig(eps, T, ham)


def ground(problem, t=0.0):
    n = problem.N
    return eig_hermitian(problem.hamiltonian.matrix(t), n).eigenvectors[:, :n].astype(complex)


def synthetic_problem(eps=0.01, T=1.0, N=2):
    return ProblemConfig(eps, T, MatrixHamiltonian.synthetic(4, 0.3, 7), N)


def random_orbitals(rng, d, n):
    z = rng.standard_normal((d, n)) + 1j * rng.standard_normal((d, n))
    q, _ = np.linalg.qr(z)
    return q


def random_unitary(rng, n):
    return random_orbitals(rng, n, n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
