import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lqturnpike.benchmarks import (coupled_scalar_model, scalar_model, three_regime_model,
                                   two_input_model)
from lqturnpike.riccati import solve_are
from lqturnpike.stability import dissipativity_certificate

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (criterion number, summary line) for every acceptance test that ran
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def scalar():
    return scalar_model()


@pytest.fixture(scope="session")
def coupled():
    return coupled_scalar_model()


@pytest.fixture(scope="session")
def three():
    return three_regime_model()


@pytest.fixture(scope="session")
def two_input():
    return two_input_model()


@pytest.fixture(scope="session")
def scalar_are(scalar):
    return solve_are(scalar)


@pytest.fixture(scope="session")
def scalar_cert(scalar, scalar_are):
    return dissipativity_certificate(scalar, scalar_are.Theta_inf)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    k, title = marker.args
    status = "PASS" if rep.passed else "FAIL"
    details = "; ".join(str(v) for name, v in item.user_properties if name == "detail")
    line = f"CRITERION {k:>2}: {status}  {title}"
    if details:
        line += f"  [{details}]"
    ACCEPTANCE_LINES.append((k, line))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
