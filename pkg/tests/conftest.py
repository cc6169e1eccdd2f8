import numpy as np
import pytest

from csmud.sysmodel import SystemConfig, make_dictionary


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_config():
    return SystemConfig(K=20, Ns=16, L=3, n=2, snr_db=10.0, seed=0)


@pytest.fixture(scope="session")
def desk_dictionary(desk_config):
    return make_dictionary(desk_config)


# --- acceptance summary -----------------------------------------------------------
# Acceptance tests call ``criterion(number, passed, detail)``; one line per
# criterion is printed at the end of the run, whatever the capture mode.

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
