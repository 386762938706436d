import logging

import numpy as np
import pytest

from beamcast.harness.config import ScenarioConfig
from beamcast.harness.simulation import build_scenario, train_fusion_for

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def record_acceptance(tag: str, passed: bool, detail: str) -> None:
    line = f"{tag} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[tag] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for tag in sorted(ACCEPTANCE_LINES, key=lambda t: int(t[2:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[tag])


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="beamcast.track_geometry")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def table3():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def fusion_bundles(table3):
    """Fusion networks trained on simulated data for both track kinds (seed 0)."""
    out = {}
    for kind in ("linear", "quadratic"):
        scn = build_scenario(table3, kind, seed=0)
        out[kind] = train_fusion_for(scn, seed=0)
    return out
