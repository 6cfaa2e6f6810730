"""Shared synthetic fixtures; scenes are cached per session."""

import math

import numpy as np
import pytest
from hypothesis import settings

from pri3d.geometry import CameraFrame, Intrinsics, RigidPose
from pri3d.synthetic import circular_path, generate_scene, render_path

# JIT warm-up makes first-call timings meaningless
settings.register_profile("pri3d", deadline=None)
settings.load_profile("pri3d")

ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request) -> list:
    """Collects the per-criterion lines printed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def rot_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])


def random_pose(rng) -> RigidPose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return RigidPose.from_rt(R, rng.uniform(-2, 2, size=3))


def flat_frame(depth, index=0, pose=None, K=None, color=None) -> CameraFrame:
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    K = K or Intrinsics(float(w), float(w), (w - 1) / 2, (h - 1) / 2, w, h)
    if color is None:
        color = np.zeros((h, w, 3), dtype=np.uint8)
    return CameraFrame(index, color, depth, K, pose or RigidPose.identity())


@pytest.fixture(scope="session")
def scene():
    return generate_scene(7, 6)


@pytest.fixture(scope="session")
def frames_small(scene):
    """24 frames at 64x48 over a half circle."""
    return render_path(scene, circular_path(scene, 24, 64, 48, arc=math.pi))


@pytest.fixture(scope="session")
def frames_128(scene):
    """12 frames at 128x96 over a quarter circle."""
    return render_path(scene, circular_path(scene, 12, 128, 96, arc=math.pi / 2))
