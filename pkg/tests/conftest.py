import numpy as np
import pytest

from samplelin.model import DenseDesign, NoisePrecision, PriorPrecision, Problem


def random_instance(rng, n=8, m=1, d=5, alpha=1.0, correlated=False, scale=1.0):
    """Random dense problem ``(op, B, A, Y)``."""
    Phi = scale * rng.standard_normal((n * m, d))
    if correlated and m > 1:
        F = rng.standard_normal((n, m, m))
        blocks = np.einsum("nij,nkj->nik", F, F) + 0.5 * np.eye(m)
    else:
        blocks = np.broadcast_to(np.eye(m), (n, m, m)).copy() * rng.uniform(0.5, 2.0, (n, 1, 1))
    Y = rng.standard_normal((n, m))
    return DenseDesign(Phi, m=m), NoisePrecision(blocks), PriorPrecision.isotropic_prior(alpha, d), Y


def identity_fixture():
    op = DenseDesign(np.eye(2), m=1)
    B = NoisePrecision.isotropic(2, 1)
    A = PriorPrecision.isotropic_prior(1.0, 2)
    Y = np.array([[2.0], [4.0]])
    return op, B, A, Y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def identity():
    return identity_fixture()


@pytest.fixture
def identity_problem():
    op, B, _, Y = identity_fixture()
    return Problem(op, B, Y)


# acceptance criterion lines, printed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
