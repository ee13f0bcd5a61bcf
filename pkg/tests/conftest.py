import math
import os

import pytest
from hypothesis import HealthCheck, settings

from superou.branching import BranchingMechanism
from superou.ou_spectral import OUParams

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def ou():
    return OUParams(math.sqrt(2.0), 1.0)


@pytest.fixture(scope="session")
def mech():
    return BranchingMechanism(3.0, 0.0, 1.0, 0.5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
