import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("repro", derandomize=True, deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repro")

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_report():
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def default_scenario():
    from vnsemcom.scenario import Scenario
    return Scenario()


@pytest.fixture(scope="session")
def trained_codec(default_scenario):
    from vnsemcom.experiments import base_codec, codec_data
    train, test = codec_data(default_scenario)
    return base_codec(default_scenario, train), train, test


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
