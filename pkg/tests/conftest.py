from __future__ import annotations

import numpy as np
import pytest

from cellfree_loc.scenario import ScenarioConfig, build_scenario


@pytest.fixture(scope="session")
def desk():
    """Small scenario shared by the read-only tests."""
    return build_scenario(ScenarioConfig(antennas_per_ap=8, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed once more at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
