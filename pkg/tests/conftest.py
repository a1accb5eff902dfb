import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kqcs.angular import build_dictionary
from kqcs.core import GradientScheme, GridShape

settings.register_profile("kqcs", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kqcs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scheme():
    return GradientScheme.fibonacci(8)


@pytest.fixture(scope="session")
def small_dict(small_scheme):
    # 1 isotropic + 4 directions x 2 concentrations + ... = 9 atoms >= G = 8
    return build_dictionary(small_scheme, n_atoms=9, concentrations=(2.0, 6.0))


@pytest.fixture(scope="session")
def small_shape():
    return GridShape(5, 4)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""

    def log(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
