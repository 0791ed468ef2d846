import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


# acceptance criteria: one PASS/FAIL line each in the terminal summary
_CRITERIA: dict[str, str] = {}
_OUTCOMES: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by the test")


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _CRITERIA[item.nodeid] = mark.args[0]


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    if report.failed:
        _OUTCOMES[report.nodeid] = "FAIL"
    elif report.skipped:
        _OUTCOMES.setdefault(report.nodeid, "SKIP")
    elif report.when == "call":
        _OUTCOMES.setdefault(report.nodeid, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, name in _CRITERIA.items():
        terminalreporter.write_line(f"{_OUTCOMES.get(nodeid, 'NOT RUN'):8} {name}")
