import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rsgame.generators import birth_death_model, drift_ladder_model, one_state_model
from rsgame.model import LyapunovCertificate

settings.register_profile(
    "rsgame",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "rsgame"))

# -- acceptance report ------------------------------------------------------------
# Tests marked ``criterion(label, title)`` contribute one PASS/FAIL line to the
# terminal summary; details come from ``record_property("detail", ...)``.

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    label, title = mark.args
    if hasattr(rep, "wasxfail"):
        status = "FAIL (known, see notes/decisions.md)"
    elif rep.failed and "XPASS(strict)" in str(rep.longrepr):
        status = "PASS (unexpected, known failure fixed?)"
    else:
        status = "PASS" if rep.passed else "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.append(f"criterion {label:>3}  {status:<5}  {title}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

REPO = Path(__file__).resolve().parent.parent
MODELS = REPO / "models"

PENNIES = np.array([[1.0, -1.0], [-1.0, 1.0]])
A_REF = np.array([[0.0, 2.0], [3.0, 1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def bd():
    return birth_death_model()


@pytest.fixture(scope="session")
def bd_cert():
    return LyapunovCertificate([1.0, 2.0], 1.0, 3.0, (0,))


@pytest.fixture(scope="session")
def one_state():
    return one_state_model(A_REF)


@pytest.fixture(scope="session")
def ladder():
    return drift_ladder_model(np.random.default_rng(3), 5, (2, 2))


@pytest.fixture(scope="session")
def bd_solution(bd, bd_cert):
    from rsgame.ergodic import solve_ergodic

    return solve_ergodic(bd, bd_cert)


@pytest.fixture(scope="session")
def ladder_solution(ladder):
    from rsgame.ergodic import solve_ergodic

    model, cert = ladder
    return solve_ergodic(model, cert)
