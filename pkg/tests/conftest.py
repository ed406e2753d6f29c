import os

import pytest
from hypothesis import HealthCheck, settings

from nanoinvert.device import build_default_device
from nanoinvert.pde import build_mesh

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = {}


def record_criterion(number, title, ok, detail=""):
    """Remember an acceptance verdict for the end-of-run report and echo it."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    _CRITERIA[number] = line
    print(line, flush=True)
    return ok


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])


@pytest.fixture(scope="session")
def default_device():
    return build_default_device()


@pytest.fixture(scope="session")
def default_mesh(default_device):
    return build_mesh(default_device[0])
