from pathlib import Path

import numpy as np
import pytest

from ctrstack import clicklog

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fixture_log_path():
    return DATA / "clicks_1000.txt"


@pytest.fixture(scope="session")
def fixture_records(fixture_log_path):
    return clicklog.read_log(fixture_log_path, clicklog.generator_schema())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
