import numpy as np
import pytest
import torch

from nowcast.data import DESK_GRID, synthesize_dataset

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def desk_dataset():
    return synthesize_dataset(4, DESK_GRID, seed=11, region_id="roxi_0004", year=2019)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome
    elif "test_acceptance.py" in report.nodeid and report.failed:
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = "failed"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        verdict = "PASS" if _ACCEPTANCE[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")
