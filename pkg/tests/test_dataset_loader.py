import os

import cv2
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.components.dataset_loader import DatasetLoader
from src.components.synthetic_generator import SyntheticGenerator, moving_object_scene
from src.models.data_models import CameraPose, GaussianMap, ProcessingError


def _write_dataset(root, rgb_times, depth_times, depth_value=5000):
    for folder in ("rgb", "depth"):
        os.makedirs(os.path.join(root, folder), exist_ok=True)
    rgb_lines, depth_lines = ["# timestamp filename"], ["# timestamp filename"]
    for t in rgb_times:
        cv2.imwrite(os.path.join(root, "rgb", f"{t:.3f}.png"), np.full((8, 8, 3), 128, dtype=np.uint8))
        rgb_lines.append(f"{t:.3f} rgb/{t:.3f}.png")
    for t in depth_times:
        cv2.imwrite(os.path.join(root, "depth", f"{t:.3f}.png"), np.full((8, 8), depth_value, dtype=np.uint16))
        depth_lines.append(f"{t:.3f} depth/{t:.3f}.png")
    with open(os.path.join(root, "rgb.txt"), "w") as handle:
        handle.write("\n".join(rgb_lines) + "\n")
    with open(os.path.join(root, "depth.txt"), "w") as handle:
        handle.write("\n".join(depth_lines) + "\n")
    with open(os.path.join(root, "intrinsics.txt"), "w") as handle:
        handle.write("6 6 3.5 3.5 8 8 5000\n")


def test_load_sequence_pairs_frames_and_converts_depth(tmp_path):
    root = str(tmp_path / "seq")
    _write_dataset(root, [1.000, 2.000], [1.010, 2.050])
    manifest, frames = DatasetLoader().load_sequence(root)
    frames = list(frames)

    assert manifest.associations == [(0, 0, None)]
    assert manifest.skipped == 2
    assert len(frames) == 1
    np.testing.assert_array_equal(frames[0].depth, 1.0)
    np.testing.assert_allclose(frames[0].rgb, 128 / 255.0)
    assert frames[0].mask_missing and not frames[0].mask.any()
    assert frames[0].timestamp == 1.0


def test_missing_dataset_and_malformed_index(tmp_path):
    loader = DatasetLoader()
    with pytest.raises(ProcessingError) as excinfo:
        loader.load_manifest(str(tmp_path / "nowhere"))
    assert excinfo.value.error_type == "DatasetError"
    assert "dataset not found" in str(excinfo.value)

    path = tmp_path / "rgb.txt"
    path.write_text("# header\n1.0 rgb/a.png\nbroken\n")
    with pytest.raises(ProcessingError) as excinfo:
        loader.read_index(str(path))
    assert excinfo.value.error_type == "ParseError"
    assert ":3:" in str(excinfo.value)

    with pytest.raises(ProcessingError) as excinfo:
        loader.read_index(str(tmp_path / "depth.txt"))
    assert excinfo.value.error_type == "IOError"


def test_identity_pose_line(tmp_path):
    path = str(tmp_path / "traj.txt")
    DatasetLoader.write_trajectory([(1.5, CameraPose.identity())], path)
    with open(path) as handle:
        assert handle.read() == "1.5 0 0 0 0 0 0 1\n"


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [(0.1 * i, CameraPose(Rotation.from_rotvec(rng.normal(0, 1, 3)).as_matrix(), rng.normal(0, 2, 3)))
             for i in range(10)]
    path = str(tmp_path / "traj.txt")
    DatasetLoader.write_trajectory(poses, path)
    loaded = DatasetLoader().read_poses(path)

    assert [t for t, _ in loaded] == [t for t, _ in poses]
    for (_, expected), (_, actual) in zip(poses, loaded):
        np.testing.assert_allclose(actual.rotation, expected.rotation, atol=1e-9)
        np.testing.assert_allclose(actual.translation, expected.translation, atol=1e-9)


def test_empty_trajectory_writes_an_empty_file(tmp_path):
    path = tmp_path / "empty.txt"
    DatasetLoader.write_trajectory([], str(path))
    assert path.read_text() == ""


def test_written_synthetic_sequence_reloads(tmp_path):
    spec = moving_object_scene(frame_count=3, width=24, height=20)
    sequence = SyntheticGenerator().generate(spec, seed=1)
    root = str(tmp_path / "synthetic")
    loader = DatasetLoader()
    loader.write_sequence(sequence, root)

    manifest, frames = loader.load_sequence(root, preset="synthetic")
    frames = list(frames)
    assert len(frames) == spec.frame_count
    assert loader.intrinsics_for(manifest) == spec.intrinsics
    for original, reloaded in zip(sequence.frames, frames):
        np.testing.assert_array_equal(reloaded.mask, original.mask)
        assert np.max(np.abs(reloaded.depth - original.depth)) <= 0.5 / 5000 + 1e-12
        assert np.max(np.abs(reloaded.rgb - original.rgb)) <= 0.5 / 255 + 1e-12
        assert not reloaded.mask_missing

    groundtruth = loader.groundtruth_poses(manifest)
    for (t_expected, expected), (t_actual, actual) in zip(sequence.trajectory, groundtruth):
        assert t_actual == pytest.approx(t_expected)
        np.testing.assert_allclose(actual.as_matrix(), expected.as_matrix(), atol=1e-9)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    gaussian_map = GaussianMap(means=rng.normal(size=(7, 3)), scales=rng.uniform(0.01, 0.1, (7, 3)),
                               rotations=rng.normal(size=(7, 4)), opacities=rng.uniform(size=7),
                               colors=rng.uniform(size=(7, 3)), object_ids=rng.integers(0, 4, 7), generation=9)
    path = str(tmp_path / "map.npz")
    DatasetLoader.save_checkpoint(gaussian_map, path)
    loaded = DatasetLoader.load_checkpoint(path)
    for name in ("means", "scales", "rotations", "opacities", "colors", "object_ids"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(gaussian_map, name))
    assert loaded.generation == 9
