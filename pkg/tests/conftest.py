import numpy as np
import pytest

from slgeodesic.fields import BoundaryPair, PotentialSpec
from slgeodesic.solver import ContinuationSchedule, run_tau_sweep
from slgeodesic.spectral import select_branch

CONSTANT_TAUS = (1.0, 0.25, 1 / 16, 1 / 64)


def constant_pair(q=2.0, n=2):
    spec = PotentialSpec(q * np.eye(n))
    return BoundaryPair(spec, spec)


def perturbed_pair(amp=0.05):
    return BoundaryPair(PotentialSpec([[3.0]], (((1,), amp, 0.0),)), PotentialSpec([[3.0]]))


@pytest.fixture(scope="session")
def constant_sweep():
    """n = 2, Q = 2I, u0 = u1 over four tau values on the default grid."""
    schedule = ContinuationSchedule(tau_sequence=CONSTANT_TAUS)
    return run_tau_sweep(constant_pair(), select_branch(2), schedule)


@pytest.fixture(scope="session")
def perturbed_sweep():
    """n = 1, Q = 3, cosine amplitude 0.05 on u0, default schedule, N = 32."""
    return run_tau_sweep(perturbed_pair(), select_branch(1), ContinuationSchedule())


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
