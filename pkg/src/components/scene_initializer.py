import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from src.models.data_models import (
    BACKGROUND_ID, CameraIntrinsics, CameraPose, FrameObservation, GaussianMap,
    LabeledPointCloud, ProcessingError
)

logger = logging.getLogger(__name__)


@dataclass
class FramePartition:
    """Boolean pixel sets of one frame: one per object ID plus the background."""
    objects: Dict[int, np.ndarray] = field(default_factory=dict)
    background: Optional[np.ndarray] = None

    def object_ids(self):
        return sorted(self.objects)


class SceneInitializer:
    def __init__(self, scale_coefficient: float = 0.01, initial_opacity: float = 0.5,
                 min_scale: float = 1e-4, max_scale: float = 0.5):
        self.scale_coefficient = scale_coefficient
        self.initial_opacity = initial_opacity
        self.min_scale = min_scale
        self.max_scale = max_scale

    def back_project(self, frame: FrameObservation, intrinsics: CameraIntrinsics, pose: CameraPose,
                     stride: int = 1, pixel_filter: Optional[np.ndarray] = None) -> LabeledPointCloud:
        """Lifts every `stride`-th candidate pixel (row-major order) with valid depth to world space.

        `pixel_filter` restricts the candidates before sub-sampling.
        """
        if stride < 1:
            raise ProcessingError(f"stride must be >= 1, got {stride}", "InputError")
        if frame.shape != intrinsics.shape:
            raise ProcessingError(
                f"Frame {frame.index} is {frame.shape}, intrinsics expect {intrinsics.shape}", "InputError")

        height, width = frame.shape
        candidates = np.arange(height * width)
        if pixel_filter is not None:
            candidates = candidates[np.asarray(pixel_filter, dtype=bool).reshape(-1)]
        sampled = candidates[::stride]
        valid = frame.valid_depth.reshape(-1)[sampled]
        sampled = sampled[valid]
        if len(sampled) == 0:
            raise ProcessingError(f"Frame {frame.index}: no valid depth among sampled pixels", "EmptyCloudError")

        v, u = np.divmod(sampled, width)
        z = frame.depth.reshape(-1)[sampled]
        camera_points = np.stack([(u - intrinsics.cx) * z / intrinsics.fx,
                                  (v - intrinsics.cy) * z / intrinsics.fy,
                                  z], axis=1)
        world_points = pose.inverse().transform(camera_points)
        colors = frame.rgb.reshape(-1, 3)[sampled]
        ids = frame.mask.reshape(-1)[sampled].astype(np.float64)
        return LabeledPointCloud(np.concatenate([colors, world_points, ids[:, None]], axis=1))

    @staticmethod
    def project_points(points: np.ndarray, pose: CameraPose,
                       intrinsics: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
        camera_points = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        z = camera_points[:, 2]
        pixels = np.stack([intrinsics.fx * camera_points[:, 0] / z + intrinsics.cx,
                           intrinsics.fy * camera_points[:, 1] / z + intrinsics.cy], axis=1)
        return pixels, z

    def initial_scale(self, cloud: LabeledPointCloud, pose: Optional[CameraPose] = None) -> float:
        depths = (pose.transform(cloud.xyz)[:, 2] if pose is not None else cloud.xyz[:, 2])
        return float(np.clip(np.mean(depths) * self.scale_coefficient, self.min_scale, self.max_scale))

    def init_gaussians(self, cloud: LabeledPointCloud, pose: Optional[CameraPose] = None,
                       generation: int = 0) -> GaussianMap:
        """One isotropic primitive per point, sized from the mean depth of the whole cloud."""
        if len(cloud) == 0:
            raise ProcessingError("Cannot initialise Gaussians from an empty cloud", "EmptyCloudError")

        count = len(cloud)
        scale = self.initial_scale(cloud, pose)
        rotations = np.zeros((count, 4))
        rotations[:, 0] = 1.0
        gaussian_map = GaussianMap(
            means=cloud.xyz.copy(),
            scales=np.full((count, 3), scale),
            rotations=rotations,
            opacities=np.full(count, self.initial_opacity),
            colors=np.clip(cloud.colors, 0.0, 1.0),
            object_ids=cloud.object_ids,
            generation=generation,
        )
        logger.debug("Initialised %d Gaussians with isotropic scale %.4f m", count, scale)
        return gaussian_map

    def split_frame(self, frame: FrameObservation) -> FramePartition:
        partition = FramePartition(background=frame.mask == BACKGROUND_ID)
        for object_id in frame.object_ids():
            partition.objects[object_id] = frame.mask == object_id
        return partition
