import numpy as np
import pytest

from src.components.synthetic_generator import (
    SyntheticGenerator, moving_object_scene, static_desk_scene, synthetic_intrinsics
)
from src.models.data_models import CameraWaypoint, ProcessingError, SceneObject, SyntheticSceneSpec


def _still_camera():
    return [CameraWaypoint(0.0, np.zeros(3), np.zeros(3))]


def test_same_seed_gives_identical_frames():
    spec = moving_object_scene(frame_count=4, width=24, height=24, photometric_sigma=0.02, depth_sigma=0.01,
                               depth_dropout=0.05)
    first = SyntheticGenerator().generate(spec, seed=11)
    second = SyntheticGenerator().generate(spec, seed=11)
    for a, b in zip(first.frames, second.frames):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_static_scene_and_camera_render_identical_frames():
    spec = static_desk_scene(frame_count=3, width=24, height=24)
    spec.camera_path = _still_camera()
    frames = SyntheticGenerator().generate(spec).frames
    for frame in frames[1:]:
        np.testing.assert_array_equal(frame.rgb, frames[0].rgb)
        np.testing.assert_array_equal(frame.depth, frames[0].depth)


def test_masked_pixels_lie_on_their_object():
    spec = moving_object_scene(frame_count=2, width=48, height=48)
    generator = SyntheticGenerator()
    sequence = generator.generate(spec)
    frame, (time, pose) = sequence.frames[1], sequence.trajectory[1]
    intrinsics = spec.intrinsics
    sphere = next(obj for obj in spec.objects if obj.object_id == 3)

    v, u = np.nonzero(frame.mask == 3)
    assert len(v) > 0
    z = frame.depth[v, u]
    camera_points = np.stack([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z],
                             axis=1)
    world = pose.inverse().transform(camera_points)
    distances = np.linalg.norm(world - sphere.position_at(time), axis=1)
    np.testing.assert_allclose(distances, sphere.size, atol=1e-9)


def test_mask_centroid_follows_the_scripted_motion():
    intrinsics = synthetic_intrinsics(64, 64)
    interval = 1.0 / 30.0
    mover = SceneObject(4, "sphere", 0.15, np.array([0.9, 0.2, 0.2]),
                        [(0.0, np.array([0.0, 0.0, 2.0])), (interval, np.array([0.1, 0.0, 2.0]))])
    spec = SyntheticSceneSpec([], [mover], _still_camera(), intrinsics, frame_count=2, frame_interval=interval)
    frames = SyntheticGenerator().generate(spec).frames

    centroids = [np.array(np.nonzero(frame.mask == 4))[::-1].mean(axis=1) for frame in frames]
    shift = centroids[1] - centroids[0]
    assert shift[0] == pytest.approx(intrinsics.fx * 0.1 / 2.0, abs=1.0)
    assert abs(shift[1]) < 1.0


def test_trajectory_equals_the_camera_script():
    spec = static_desk_scene(frame_count=5, width=16, height=16)
    generator = SyntheticGenerator()
    sequence = generator.generate(spec)
    for index, (time, pose) in enumerate(sequence.trajectory):
        assert time == index * spec.frame_interval
        expected = generator.camera_pose_at(spec.camera_path, time)
        np.testing.assert_array_equal(pose.as_matrix(), expected.as_matrix())
    first = spec.camera_path[0]
    np.testing.assert_allclose(sequence.trajectory[0][1].camera_center, first.position, atol=1e-12)


def test_invalid_specs_name_the_field():
    spec = static_desk_scene(frame_count=3, width=16, height=16)
    spec.objects.append(SceneObject(1, "sphere", 0.1, np.ones(3), [(0.0, np.zeros(3))]))
    with pytest.raises(ProcessingError) as excinfo:
        SyntheticGenerator().generate(spec)
    assert excinfo.value.error_type == "SpecError"
    assert "duplicate object IDs [1]" in str(excinfo.value)

    spec = static_desk_scene(frame_count=1, width=16, height=16)
    with pytest.raises(ProcessingError, match="frame_count"):
        SyntheticGenerator().validate_spec(spec)
