import functools

import numpy as np
import pytest

from diffslam.geometry import exp_se3
from diffslam.registration import voxel_downsample
from diffslam.synthworld import SensorSpec, make_sequence, street_world


def blob(seed: int, n: int = 300, half: float = 3.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-half, half, (n, 3))


@functools.lru_cache(maxsize=8)
def rendered_cloud(seed: int = 0, max_points: int = 512) -> np.ndarray:
    """A downsampled static street scan: realistic structure, few points."""
    world = street_world(seed=seed, length=20.0, sensor=SensorSpec(beams=16, azimuth_steps=180))
    pts = make_sequence(world, "straight", 2).static_scans[0].points
    pts = pts[np.linalg.norm(pts, axis=1) < 25.0]
    return pts[voxel_downsample(pts, 0.3, max_points)]


def random_motion(rng, max_t: float, max_deg: float):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, max_t) / np.linalg.norm(t)
    return exp_se3(np.concatenate([axis * np.deg2rad(rng.uniform(0, max_deg)), t]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One summary line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
