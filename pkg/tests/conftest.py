import sys

import pytest

from helpers import paradox_objects
from stablelink.registry import Registry


@pytest.fixture
def paradox():
    return paradox_objects()


@pytest.fixture
def registry(tmp_path):
    return Registry.init(tmp_path / "reg")


@pytest.fixture
def paradox_registry(registry, paradox):
    for obj in paradox.values():
        registry.update_obj(obj)
    registry.end_mgmt()
    return registry


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
