import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from src.components.evaluator import Evaluator, associate
from src.models.data_models import CameraPose, ProcessingError


def _trajectory(count=12, seed=0):
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(count):
        rotation = Rotation.from_rotvec(rng.normal(0, 0.2, 3)).as_matrix()
        poses.append((i * 0.1, CameraPose(rotation, rng.normal(0, 1.0, 3))))
    return poses


def test_psnr_fixtures():
    reference = np.zeros((8, 8, 3))
    assert Evaluator.psnr(np.full((8, 8, 3), 0.5), reference) == pytest.approx(6.0206, abs=1e-3)
    assert Evaluator.psnr(np.full((8, 8, 3), 0.1), reference) == pytest.approx(20.0)
    assert Evaluator.psnr(reference, reference) == 100.0


def test_psnr_respects_the_mask():
    rendered = np.zeros((8, 8, 3))
    rendered[:4] = 1.0
    mask = np.zeros((8, 8), dtype=bool)
    mask[4:] = True
    assert Evaluator.psnr(rendered, np.zeros((8, 8, 3)), mask) == 100.0
    with pytest.raises(ProcessingError):
        Evaluator.psnr(rendered, rendered, np.zeros((8, 8), dtype=bool))


def test_ssim_identical_and_inverted_images():
    image = np.random.default_rng(0).uniform(size=(32, 32, 3))
    evaluator = Evaluator()
    assert evaluator.ssim(image, image) == pytest.approx(1.0)
    assert evaluator.ssim(image, 1.0 - image) < 0.0


def test_ssim_of_constant_images_is_the_luminance_term():
    a, b = 0.3, 0.7
    expected = (2 * a * b + 0.01 ** 2) / (a * a + b * b + 0.01 ** 2)
    score = Evaluator().ssim(np.full((20, 20), a), np.full((20, 20), b))
    assert score == pytest.approx(expected, rel=1e-6)


def test_ssim_is_symmetric_and_needs_a_full_window():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(24, 24)), rng.uniform(size=(24, 24))
    evaluator = Evaluator()
    assert evaluator.ssim(a, b) == pytest.approx(evaluator.ssim(b, a))
    with pytest.raises(ProcessingError):
        evaluator.ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ate_of_identical_trajectories_is_zero():
    poses = _trajectory()
    report = Evaluator().align_and_ate(poses, poses)
    assert report.rmse == pytest.approx(0.0, abs=1e-9)
    assert len(report.errors) == len(poses)


@settings(max_examples=20, deadline=None)
@given(rotvec=st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3),
       offset=st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3))
def test_ate_is_invariant_to_a_rigid_world_change(rotvec, offset):
    groundtruth = _trajectory(seed=2)
    world_change = CameraPose(Rotation.from_rotvec(rotvec).as_matrix(), np.array(offset))
    estimated = [(t, pose.compose(world_change.inverse())) for t, pose in groundtruth]
    assert Evaluator().align_and_ate(estimated, groundtruth).rmse < 1e-9


def test_ate_statistics_of_a_two_pose_fixture():
    rmse, std, mean = Evaluator.error_statistics(np.array([0.0, 0.3]))
    assert rmse == pytest.approx(0.3 / np.sqrt(2))
    assert std == pytest.approx(0.15) and mean == pytest.approx(0.15)


def test_ate_needs_overlapping_timestamps():
    poses = _trajectory(4)
    shifted = [(t + 100.0, pose) for t, pose in poses]
    with pytest.raises(ProcessingError):
        Evaluator().align_and_ate(poses, shifted)


def test_association_is_greedy_and_one_to_one():
    assert associate([1.0], [1.010]) == [(0, 0)]
    assert associate([1.0], [1.050]) == []
    assert associate([1.0, 1.01], [1.012]) == [(1, 0)]
    assert associate([], [1.0]) == []


def test_metric_schedule_and_lpips_scores(tmp_path):
    assert [i for i in range(12) if Evaluator.metric_schedule(i)] == [0, 5, 10]
    path = tmp_path / "lpips.csv"
    path.write_text("frame,lpips\n0,0.25\n5,0.5\n")
    assert Evaluator.load_lpips_scores(str(path)) == {0: 0.25, 5: 0.5}
    path.write_text("frame,lpips\nx,0.1\n")
    with pytest.raises(ProcessingError):
        Evaluator.load_lpips_scores(str(path))
