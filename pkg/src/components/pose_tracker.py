import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.models.data_models import (
    BACKGROUND_ID, CameraIntrinsics, CameraPose, DynamicObjectRegistry, FrameObservation,
    GaussianMap, LossFlowRecord, ProcessingError, RenderedFrame, TrackingResult
)
from src.components.dynamic_filter import DynamicFilter
from src.components.loss_calculator import LossCalculator
from src.components.pose_utils import apply_increment
from src.components.scene_initializer import SceneInitializer
from src.components.splat_renderer import SplatRenderer

logger = logging.getLogger(__name__)


class PoseTracker:
    """Coarse-to-fine camera tracking against a fixed Gaussian map.

    Both stages run normalised gradient descent on the SE(3) tangent: the
    rotation and translation blocks each move by at most their step size,
    steps grow by 1.25 after an accepted move (capped at the base step) and
    halve after a rejected one. Only pixels the map already covers with
    more than `tracking_alpha` enter the loss.
    """

    def __init__(self, intrinsics: CameraIntrinsics, renderer: Optional[SplatRenderer] = None,
                 loss_calculator: Optional[LossCalculator] = None,
                 initializer: Optional[SceneInitializer] = None,
                 coarse_iterations: int = 40, fine_max_iterations: int = 100,
                 fine_tolerance: float = 1e-5, fine_patience: int = 3,
                 rotation_step: float = 0.003, translation_step: float = 0.01,
                 coarse_stride: int = 128, tracking_alpha: float = 0.5,
                 min_step_scale: float = 2.0 ** -10):
        self.intrinsics = intrinsics
        self.renderer = renderer or SplatRenderer()
        self.loss_calculator = loss_calculator or LossCalculator()
        self.initializer = initializer or SceneInitializer()
        self.coarse_iterations = coarse_iterations
        self.fine_max_iterations = fine_max_iterations
        self.fine_tolerance = fine_tolerance
        self.fine_patience = fine_patience
        self.base_steps = np.array([rotation_step] * 3 + [translation_step] * 3)
        self.coarse_stride = coarse_stride
        self.tracking_alpha = tracking_alpha
        self.min_step_scale = min_step_scale
        self.last_coarse: dict = {}

    @staticmethod
    def predict_pose(history: Sequence[CameraPose]) -> CameraPose:
        # constant-position model
        return history[-1] if history else CameraPose.identity()

    # --------------------------------------------------------------- descent

    def _direction(self, gradient: np.ndarray) -> np.ndarray:
        direction = np.zeros(6)
        for block in (slice(0, 3), slice(3, 6)):
            norm = np.linalg.norm(gradient[block])
            if norm > 1e-12:
                direction[block] = -gradient[block] / norm
        return direction

    def _evaluate(self, gaussian_map: GaussianMap, pose: CameraPose, frame: FrameObservation,
                  pixel_sets: List[np.ndarray], lambda_a: float) -> Tuple[RenderedFrame, float, np.ndarray]:
        rendered = self.renderer.render(gaussian_map, pose, self.intrinsics)
        loss, upstream = self.loss_calculator.joint_loss(rendered, frame, pixel_sets, lambda_a)
        return rendered, loss, upstream

    def silhouette(self, rendered: RenderedFrame, support: Optional[np.ndarray] = None) -> np.ndarray:
        """Pixels where the `support` primitives composite to more than `tracking_alpha`."""
        return self.renderer.partial_alpha(rendered, support) > self.tracking_alpha

    def _descend(self, gaussian_map: GaussianMap, frame: FrameObservation, pose: CameraPose,
                 pixel_sets: List[np.ndarray], lambda_a: float, iterations: int,
                 on_iteration=None, tolerance: Optional[float] = None, patience: int = 0,
                 support: Optional[np.ndarray] = None) -> dict:
        """Runs up to `iterations` descent steps; `on_iteration(rendered)` sees the accepted render.

        The silhouette of the start render restricts `pixel_sets` for the whole
        descent. With a `tolerance`, the descent stops after `patience`
        accepted steps in a row that improve the loss by less than that
        relative amount, or once every step has shrunk below `min_step_scale`.
        """
        scales = np.ones(6)
        rendered = self.renderer.render(gaussian_map, pose, self.intrinsics)
        covered = self.silhouette(rendered, support)
        tracked = [pixels & covered for pixels in pixel_sets]
        if not any(np.any(pixels) for pixels in tracked):
            logger.debug("Frame %d: no pixel passes the silhouette; tracking on every pixel", frame.index)
            tracked = pixel_sets
        loss, upstream = self.loss_calculator.joint_loss(rendered, frame, tracked, lambda_a)
        if not np.isfinite(loss):
            raise ProcessingError(f"Frame {frame.index}: non-finite loss at the initial pose", "NumericsError")

        run, slow, aborted, accepted, rejected = 0, 0, False, 0, 0
        for _ in range(iterations):
            if on_iteration is not None:
                on_iteration(rendered)
            run += 1
            try:
                gradient = self.renderer.backward(rendered, gaussian_map, pose, self.intrinsics, upstream,
                                                  pose_only=True).pose
                candidate = apply_increment(pose, scales * self.base_steps * self._direction(gradient))
                cand_rendered, cand_loss, cand_upstream = self._evaluate(
                    gaussian_map, candidate, frame, tracked, lambda_a)
            except ProcessingError as exc:
                if exc.error_type != "NumericsError":
                    raise
                logger.warning("Frame %d: %s; keeping last finite pose", frame.index, exc)
                aborted = True
                break
            if not np.isfinite(cand_loss):
                logger.warning("Frame %d: non-finite loss; keeping last finite pose", frame.index)
                aborted = True
                break

            if cand_loss <= loss:
                improvement = (loss - cand_loss) / max(abs(loss), 1e-12)
                pose, rendered, loss, upstream = candidate, cand_rendered, cand_loss, cand_upstream
                scales = np.minimum(scales * 1.25, 1.0)
                accepted += 1
                slow = slow + 1 if improvement < (tolerance or 0.0) else 0
            else:
                scales = scales * 0.5
                rejected += 1

            if tolerance is not None and (slow >= patience or np.all(scales < self.min_step_scale)):
                break
        return {"pose": pose, "loss": loss, "iterations": run, "aborted": aborted,
                "accepted": accepted, "rejected": rejected}

    # ---------------------------------------------------------------- stages

    @staticmethod
    def tracking_map(gaussian_map: GaussianMap, registry: DynamicObjectRegistry) -> GaussianMap:
        """The map without the primitives of objects in the dynamic set."""
        if not registry.dynamic_set:
            return gaussian_map
        keep = ~np.isin(gaussian_map.object_ids, sorted(registry.dynamic_set))
        return gaussian_map.subset(np.nonzero(keep)[0])

    def seed_missing_objects(self, gaussian_map: GaussianMap, frame: FrameObservation,
                  previous: Optional[Tuple[FrameObservation, CameraPose]]) -> GaussianMap:
        """Map plus transient primitives for objects seen now but absent from the map.

        Seeded primitives are appended after the map's own primitives.
        """
        if previous is None:
            return gaussian_map
        prev_frame, prev_pose = previous
        present = gaussian_map.count_by_id()
        missing = [j for j in frame.object_ids() if j not in present and j in prev_frame.object_ids()]
        if not missing:
            return gaussian_map

        seeded = gaussian_map.copy()
        for object_id in missing:
            try:
                cloud = self.initializer.back_project(prev_frame, self.intrinsics, prev_pose,
                                                      stride=self.coarse_stride,
                                                      pixel_filter=prev_frame.mask == object_id)
            except ProcessingError:
                continue
            seeded.extend(self.initializer.init_gaussians(cloud, prev_pose))
            logger.debug("Frame %d: seeded %d transient Gaussians for object %d", frame.index, len(cloud), object_id)
        return seeded

    def coarse_track(self, gaussian_map: GaussianMap, frame: FrameObservation, init_pose: CameraPose,
                     iterations: Optional[int] = None,
                     support: Optional[np.ndarray] = None) -> Tuple[CameraPose, List[LossFlowRecord]]:
        """Optimises the pose on the background loss and records every object's loss flow.

        The background flow comes first in the returned list (object ID 0).
        `support` flags the primitives whose silhouette bounds the background
        pixels; transient seeded primitives are left out of it.
        """
        iterations = self.coarse_iterations if iterations is None else iterations
        if iterations < 2:
            raise ProcessingError(f"coarse tracking needs at least 2 iterations, got {iterations}", "InputError")
        if len(gaussian_map) == 0:
            raise ProcessingError("Cannot track against an empty map", "InputError")

        partition = self.initializer.split_frame(frame)
        if not partition.background.any():
            raise ProcessingError(f"Frame {frame.index}: no background pixels to track on", "DegenerateInputError")
        lambda_a = self.loss_calculator.adaptive_lambda(frame)

        flows: Dict[int, LossFlowRecord] = {BACKGROUND_ID: LossFlowRecord(BACKGROUND_ID)}
        for object_id in partition.object_ids():
            flows[object_id] = LossFlowRecord(object_id)

        def record(rendered: RenderedFrame) -> None:
            breakdown = self.loss_calculator.object_breakdown(rendered, frame, partition, lambda_a)
            flows[BACKGROUND_ID].values.append(breakdown.background.combined)
            for object_id, entity in breakdown.per_object.items():
                flows[object_id].values.append(entity.combined)

        outcome = self._descend(gaussian_map, frame, init_pose, [partition.background], lambda_a,
                                iterations, on_iteration=record, support=support)
        self.last_coarse = outcome
        logger.debug("Frame %d coarse: %d iterations, %d accepted, loss %.5f",
                     frame.index, outcome["iterations"], outcome["accepted"], outcome["loss"])
        return outcome["pose"], list(flows.values())

    def fine_track(self, gaussian_map: GaussianMap, frame: FrameObservation, pose: CameraPose,
                   registry: DynamicObjectRegistry) -> TrackingResult:
        """Refines the pose on the background and every non-dynamic object.

        Primitives of dynamic objects are left out of the render.
        """
        partition = self.initializer.split_frame(frame)
        pixel_sets = [partition.background]
        for object_id in partition.object_ids():
            if not registry.is_dynamic(object_id):
                pixel_sets.append(partition.objects[object_id])
        if not any(np.any(pixels) for pixels in pixel_sets):
            raise ProcessingError(f"Frame {frame.index}: every pixel belongs to a dynamic object",
                                  "DegenerateInputError")

        tracked_map = self.tracking_map(gaussian_map, registry)
        if len(tracked_map) == 0:
            raise ProcessingError(f"Frame {frame.index}: the map holds only dynamic primitives",
                                  "DegenerateInputError")
        lambda_a = self.loss_calculator.adaptive_lambda(frame)
        outcome = self._descend(tracked_map, frame, pose, pixel_sets, lambda_a, self.fine_max_iterations,
                                tolerance=self.fine_tolerance, patience=self.fine_patience)
        return TrackingResult(pose=outcome["pose"], fine_iterations_run=outcome["iterations"],
                              final_loss=float(outcome["loss"]), aborted=outcome["aborted"])

    def track_frame(self, gaussian_map: GaussianMap, frame: FrameObservation, init_pose: CameraPose,
                    registry: DynamicObjectRegistry, dynamic_filter: Optional[DynamicFilter] = None,
                    previous: Optional[Tuple[FrameObservation, CameraPose]] = None) -> TrackingResult:
        """Coarse stage, dynamic classification and registry update, then the fine stage.

        The coarse stage renders the map without the current dynamic objects,
        plus primitives seeded from the previous frame for every object the map
        lacks. Without a `dynamic_filter` no object is ever classified and the
        fine stage optimises over every object.
        """
        static_map = self.tracking_map(gaussian_map, registry)
        coarse_map = self.seed_missing_objects(static_map, frame, previous)
        support = np.arange(len(coarse_map)) < len(static_map)
        coarse_pose, flows = self.coarse_track(coarse_map, frame, init_pose, support=support)
        coarse = self.last_coarse

        classifications = {}
        if dynamic_filter is not None:
            # an aborted coarse stage may leave flows too short to difference
            usable = [record for record in flows if len(record.values) >= 2]
            classifications, _ = dynamic_filter.analyze_flows(usable)
            dynamic_filter.update_registry(registry, classifications)

        result = self.fine_track(gaussian_map, frame, coarse_pose, registry)
        result.loss_flows = flows
        result.classifications = classifications
        result.coarse_iterations_run = coarse["iterations"]
        result.aborted = result.aborted or coarse["aborted"]
        return result
