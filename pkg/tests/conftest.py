import numpy as np
import pytest

from driveref.scene import default_scenes
from driveref.simulator import SimConfig, generate_dataset


@pytest.fixture(scope="session")
def scenes():
    return default_scenes()


@pytest.fixture(scope="session")
def small_dataset():
    """Four subjects, a few events per use case; quick to train on."""
    return generate_dataset(SimConfig(seed=5, n_subjects=4, cockpit_events=48, environment_events=48))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        name = report.nodeid.split("::test_criterion_")[1]
        _ACCEPTANCE.setdefault(name, "PASS" if report.passed else "FAIL")
        if not report.passed:
            _ACCEPTANCE[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[0])):
        number, _, label = name.partition("_")
        terminalreporter.write_line(f"{_ACCEPTANCE[name]} criterion {number}: {label.replace('_', ' ')}")
