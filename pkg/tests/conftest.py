import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blursplat.scene import CameraIntrinsics, CameraPose

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr16():
    return CameraIntrinsics(fx=16.0, fy=16.0, cx=7.5, cy=7.5, width=16, height=16)


@pytest.fixture
def intr32():
    return CameraIntrinsics(fx=30.0, fy=30.0, cx=15.5, cy=15.5, width=32, height=32)


@pytest.fixture
def identity_pose():
    return CameraPose.identity()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
