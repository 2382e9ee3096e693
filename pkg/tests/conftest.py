import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.models.data_models import CameraIntrinsics, CameraPose, FrameObservation, GaussianMap  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end pipeline runs (deselect with -m 'not slow')")


@pytest.fixture
def intrinsics32():
    return CameraIntrinsics(30.0, 30.0, 16.0, 16.0, 32, 32)


def make_frame(rgb=None, depth=None, mask=None, shape=(32, 32), index=0, timestamp=0.0):
    height, width = shape
    rgb = np.full((height, width, 3), 0.5) if rgb is None else rgb
    depth = np.full((height, width), 2.0) if depth is None else depth
    mask = np.zeros((height, width), dtype=np.int64) if mask is None else mask
    return FrameObservation(index, timestamp, rgb, depth, mask)


def random_scene(seed: int, count: int = 6):
    """Small random map in front of the camera plus a slightly perturbed pose."""
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-0.3, 0.3, count), rng.uniform(-0.3, 0.3, count),
                             rng.uniform(1.5, 3.0, count)])
    rotations = rng.normal(size=(count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    gaussian_map = GaussianMap(means=means, scales=rng.uniform(0.03, 0.1, (count, 3)), rotations=rotations,
                               opacities=rng.uniform(0.1, 0.6, count), colors=rng.uniform(0.0, 1.0, (count, 3)),
                               object_ids=rng.integers(0, 3, count))
    from src.components.pose_utils import apply_increment
    pose = apply_increment(CameraPose.identity(), np.concatenate([rng.normal(0, 0.03, 3), rng.normal(0, 0.03, 3)]))
    return gaussian_map, pose
