import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from dynlat.model import preset_hardware, preset_network  # noqa: E402
from dynlat.sched import select_block  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def r101():
    return preset_network("resnet101")


@pytest.fixture(scope="session")
def v100():
    return preset_hardware("v100")


@pytest.fixture(scope="session")
def block12(r101):
    """Stage-1 identity block of ResNet-101 (56x56, S=8 by default)."""
    return select_block(r101, "1.2")


@pytest.fixture(scope="session")
def block11(r101):
    return select_block(r101, "1.1")



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
