import numpy as np
import pytest
from hypothesis import settings

from lidarfuse.geometry import Pose, rot_z
from lidarfuse.synthetic import SensorSpec, generate_world, simulate_scan, straight_trajectory

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def noiseless_world():
    traj = straight_trajectory(30, 1.0)
    return generate_world(11, traj)


@pytest.fixture(scope="session")
def noiseless_sensor():
    return SensorSpec(noise_sigma=0.0)


@pytest.fixture(scope="session")
def scan_pair(noiseless_world, noiseless_sensor):
    """Two noiseless scans and the pose of the second sensor in the first sensor's frame."""
    p0 = Pose(rot_z(0.1), [5.0, 0.3, 1.8])
    rel = Pose(rot_z(np.radians(5.0)), [0.3, 0.0, 0.0])
    p1 = p0 @ rel
    return simulate_scan(noiseless_world, p0, noiseless_sensor), simulate_scan(noiseless_world, p1, noiseless_sensor), rel



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("ab")), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})")
