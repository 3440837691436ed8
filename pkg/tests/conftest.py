import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mfchaos.core import reference_model  # noqa: E402
from mfchaos.mkv import value_iteration  # noqa: E402

ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def ref_solution(ref_model):
    return value_iteration(ref_model, 50, "randomized:8", tol=1e-8)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ACCEPTANCE_RESULTS[marker.args[0]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        status = "PASS" if ACCEPTANCE_RESULTS[label] == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {label}")
