import numpy as np
import pytest

from src.components.dynamic_filter import DynamicFilter
from src.components.pose_tracker import PoseTracker
from src.components.pose_utils import apply_increment
from src.components.scene_initializer import SceneInitializer
from src.components.splat_renderer import SplatRenderer
from src.models.data_models import (
    CameraPose, DynamicObjectRegistry, FrameObservation, GaussianMap, ObjectState, ProcessingError
)
from tests.conftest import make_frame


@pytest.fixture
def scene(intrinsics32):
    """A textured slanted plane with object 5 in the upper-left, observed from the identity pose."""
    v, u = np.mgrid[0:32, 0:32]
    rgb = np.stack([0.5 + 0.4 * np.sin(u / 3.0), 0.5 + 0.4 * np.cos(v / 4.0), 0.3 + 0.02 * (u + v) / 2], axis=2)
    depth = 1.8 + 0.01 * u
    mask = np.zeros((32, 32), dtype=np.int64)
    mask[4:12, 4:12] = 5
    source = make_frame(rgb=rgb, depth=depth, mask=mask)

    initializer = SceneInitializer()
    gaussian_map = initializer.init_gaussians(
        initializer.back_project(source, intrinsics32, CameraPose.identity()), CameraPose.identity())
    rendered = SplatRenderer().render(gaussian_map, CameraPose.identity(), intrinsics32)
    observed = FrameObservation(1, 0.1, rendered.color, rendered.depth, mask)
    return gaussian_map, observed


def test_flow_length_matches_iterations_and_optimum_is_kept(intrinsics32, scene):
    gaussian_map, frame = scene
    tracker = PoseTracker(intrinsics32)
    pose, flows = tracker.coarse_track(gaussian_map, frame, CameraPose.identity(), iterations=6)

    assert [record.object_id for record in flows] == [0, 5]
    assert all(len(record.values) == 6 for record in flows)
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(pose.translation, 0.0, atol=1e-12)
    assert flows[0].values[0] == pytest.approx(0.0, abs=1e-12)


def test_coarse_tracking_reduces_background_loss(intrinsics32, scene):
    gaussian_map, frame = scene
    start = apply_increment(CameraPose.identity(), np.array([0.0, 0.01, 0.0, 0.03, -0.02, 0.0]))
    # every covered pixel is tracked, so the recorded background flow is the descended loss
    tracker = PoseTracker(intrinsics32, tracking_alpha=0.0)
    _, flows = tracker.coarse_track(gaussian_map, frame, start, iterations=20)

    background = flows[0].values
    assert all(b <= a + 1e-12 for a, b in zip(background, background[1:]))
    assert background[-1] < background[0]
    assert tracker.last_coarse["accepted"] > 0


def test_coarse_tracking_input_errors(intrinsics32, scene):
    gaussian_map, frame = scene
    tracker = PoseTracker(intrinsics32)
    with pytest.raises(ProcessingError):
        tracker.coarse_track(gaussian_map, frame, CameraPose.identity(), iterations=1)
    with pytest.raises(ProcessingError):
        tracker.coarse_track(GaussianMap(), frame, CameraPose.identity())

    all_object = FrameObservation(2, 0.2, frame.rgb, frame.depth, np.full((32, 32), 5))
    with pytest.raises(ProcessingError) as excinfo:
        tracker.coarse_track(gaussian_map, all_object, CameraPose.identity())
    assert excinfo.value.error_type == "DegenerateInputError"


def test_fine_stage_ignores_dynamic_objects(intrinsics32, scene):
    gaussian_map, frame = scene
    rgb = frame.rgb.copy()
    rgb[frame.mask == 5] = 0.0
    corrupted = FrameObservation(1, 0.1, rgb, frame.depth, frame.mask)
    tracker = PoseTracker(intrinsics32, fine_max_iterations=5, tracking_alpha=0.0)
    registry = DynamicObjectRegistry(dynamic_set={5})

    result = tracker.fine_track(gaussian_map, corrupted, CameraPose.identity(), registry)

    tracked_map = tracker.tracking_map(gaussian_map, registry)
    assert 5 not in tracked_map.count_by_id()
    rendered = tracker.renderer.render(tracked_map, result.pose, intrinsics32)
    lambda_a = tracker.loss_calculator.adaptive_lambda(corrupted)
    background_only, _ = tracker.loss_calculator.joint_loss(rendered, corrupted, [corrupted.mask == 0], lambda_a)
    with_object, _ = tracker.loss_calculator.joint_loss(
        rendered, corrupted, [corrupted.mask == 0, corrupted.mask == 5], lambda_a)
    assert result.final_loss == pytest.approx(background_only)
    assert result.final_loss < with_object


def test_objects_absent_from_the_map_are_seeded(intrinsics32, scene):
    gaussian_map, frame = scene
    background_map = gaussian_map.subset(np.nonzero(gaussian_map.object_ids == 0)[0])
    tracker = PoseTracker(intrinsics32, coarse_stride=4)

    seeded = tracker.seed_missing_objects(background_map, frame, (frame, CameraPose.identity()))
    assert seeded.count_by_id()[5] == 16
    assert 5 not in background_map.count_by_id()
    assert tracker.seed_missing_objects(background_map, frame, None) is background_map


def test_track_frame_without_filter_classifies_nothing(intrinsics32, scene):
    gaussian_map, frame = scene
    tracker = PoseTracker(intrinsics32, coarse_iterations=4, fine_max_iterations=3)
    result = tracker.track_frame(gaussian_map, frame, CameraPose.identity(), DynamicObjectRegistry())
    assert result.classifications == {}
    assert result.coarse_iterations_run == 4
    assert [len(record.values) for record in result.loss_flows] == [4, 4]


def test_track_frame_with_filter_updates_registry(intrinsics32, scene):
    gaussian_map, frame = scene
    tracker = PoseTracker(intrinsics32, coarse_iterations=4, fine_max_iterations=3)
    registry = DynamicObjectRegistry()
    result = tracker.track_frame(gaussian_map, frame, CameraPose.identity(), registry,
                                 dynamic_filter=DynamicFilter(min_samples=6))
    # two entities are too few samples to fit a mixture
    assert result.classifications == {5: "Static"}
    assert registry.static_streak == {5: 1}


def test_predict_pose_uses_the_last_estimate():
    pose = apply_increment(CameraPose.identity(), np.array([0.1, 0, 0, 1.0, 0, 0]))
    assert PoseTracker.predict_pose([CameraPose.identity(), pose]) is pose
    assert np.allclose(PoseTracker.predict_pose([]).rotation, np.eye(3))


def test_uncovered_pixels_stay_out_of_the_tracking_loss(intrinsics32, scene):
    gaussian_map, frame = scene
    left_half = gaussian_map.subset(np.nonzero(gaussian_map.means[:, 0] < 0.0)[0])
    rendered = SplatRenderer().render(left_half, CameraPose.identity(), intrinsics32)
    rgb, depth = rendered.color.copy(), rendered.depth.copy()
    uncovered = rendered.alpha <= 0.5
    rgb[uncovered], depth[uncovered] = 1.0, 1.0
    observed = FrameObservation(1, 0.1, rgb, depth, np.zeros((32, 32), dtype=np.int64))

    tracker = PoseTracker(intrinsics32, fine_max_iterations=10, tracking_alpha=0.5)
    result = tracker.fine_track(left_half, observed, CameraPose.identity(), DynamicObjectRegistry())

    assert uncovered[:, 20:].all()
    assert result.final_loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(result.pose.translation, 0.0, atol=1e-12)


def test_fine_stage_converges_past_rejected_steps(intrinsics32, scene):
    gaussian_map, frame = scene
    start = apply_increment(CameraPose.identity(), np.array([0.004, -0.003, 0.0, 0.02, 0.015, -0.01]))
    tracker = PoseTracker(intrinsics32, fine_max_iterations=200, fine_patience=3)
    result = tracker.fine_track(gaussian_map, frame, start, DynamicObjectRegistry())

    assert result.fine_iterations_run > tracker.fine_patience
    assert np.linalg.norm(result.pose.translation) < 0.1 * np.linalg.norm(start.translation)


def test_coarse_stage_seeds_dynamic_objects_from_the_previous_frame(intrinsics32, scene):
    gaussian_map, frame = scene
    tracker = PoseTracker(intrinsics32, coarse_iterations=3, fine_max_iterations=2, coarse_stride=4)
    registry = DynamicObjectRegistry(state={5: ObjectState.DYNAMIC}, dynamic_set={5})
    seen = []
    original = tracker.coarse_track

    def spy(coarse_map, *args, **kwargs):
        seen.append((coarse_map.count_by_id(), kwargs["support"].copy()))
        return original(coarse_map, *args, **kwargs)

    tracker.coarse_track = spy
    result = tracker.track_frame(gaussian_map, frame, CameraPose.identity(), registry,
                                 previous=(frame, CameraPose.identity()))

    counts, support = seen[0]
    assert counts[5] == 16
    assert support.sum() == gaussian_map.count_by_id()[0]
    assert not support[-16:].any()
    assert [len(record.values) for record in result.loss_flows] == [3, 3]


def _block_frame(intrinsics, column):
    v, u = np.mgrid[0:32, 0:32]
    rgb = np.stack([0.5 + 0.4 * np.sin(u / 3.0), 0.5 + 0.4 * np.cos(v / 4.0), 0.3 + 0.02 * (u + v) / 2], axis=2)
    depth = 1.8 + 0.01 * u
    mask = np.zeros((32, 32), dtype=np.int64)
    block = (slice(9, 23), slice(column, column + 14))
    rgb[block], depth[block], mask[block] = (0.95, 0.85, 0.2), 1.2, 5

    initializer = SceneInitializer()
    source = make_frame(rgb=rgb, depth=depth, mask=mask)
    gaussian_map = initializer.init_gaussians(
        initializer.back_project(source, intrinsics, CameraPose.identity()), CameraPose.identity())
    rendered = SplatRenderer().render(gaussian_map, CameraPose.identity(), intrinsics)
    return gaussian_map, FrameObservation(1, 0.1, rendered.color, rendered.depth, mask)


def test_dynamic_set_removes_mover_bias_from_fine_tracking(intrinsics32):
    gaussian_map, _ = _block_frame(intrinsics32, column=6)
    _, moved = _block_frame(intrinsics32, column=11)
    assert 0.15 <= np.mean(moved.mask == 5) <= 0.25
    start = apply_increment(CameraPose.identity(), np.array([0.0, 0.0, 0.0, 0.01, -0.005, 0.0]))
    tracker = PoseTracker(intrinsics32, fine_max_iterations=150)

    ignored = tracker.fine_track(gaussian_map, moved, start, DynamicObjectRegistry(dynamic_set={5}))
    included = tracker.fine_track(gaussian_map, moved, start, DynamicObjectRegistry())

    filtered_error = np.linalg.norm(ignored.pose.camera_center)
    unfiltered_error = np.linalg.norm(included.pose.camera_center)
    assert filtered_error <= 0.5 * unfiltered_error
