from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Dict, Any, Set, Tuple

import numpy as np

BACKGROUND_ID = 0


class ProcessingError(Exception):
    def __init__(self, message: str, error_type: str = "ProcessingError"):
        self.message = message
        self.error_type = error_type
        super().__init__(self.message)


@dataclass
class ValidationResult:
    is_valid: bool
    errors: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        errors = []
        if not (self.fx > 0 and self.fy > 0):
            errors.append("focal lengths must be positive")
        if not (0 <= self.cx < self.width):
            errors.append(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            errors.append(f"cy={self.cy} outside [0, {self.height})")
        if not self.depth_scale > 0:
            errors.append("depth_scale must be positive")
        if errors:
            raise ProcessingError(f"Invalid intrinsics: {'; '.join(errors)}", "InputError")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ProcessingError("Pose contains non-finite values", "NumericsError")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6):
            raise ProcessingError("Pose rotation is not orthonormal", "InputError")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise ProcessingError("Pose rotation determinant is not 1", "InputError")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "CameraPose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def inverse(self) -> "CameraPose":
        rotation_t = self.rotation.T
        return CameraPose(rotation_t, -rotation_t @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """Returns self ∘ other (apply other first)."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray  # (w, x, y, z)
    opacity: float
    color: np.ndarray
    object_id: int = BACKGROUND_ID


class GaussianMap:
    """Structure-of-arrays store of Gaussian primitives.

    Every structural change (insert, remove) bumps `generation`. Parameter
    updates from optimisation do not.
    """

    def __init__(self, means: Optional[np.ndarray] = None, scales: Optional[np.ndarray] = None,
                 rotations: Optional[np.ndarray] = None, opacities: Optional[np.ndarray] = None,
                 colors: Optional[np.ndarray] = None, object_ids: Optional[np.ndarray] = None,
                 generation: int = 0):
        self.means = _as_rows(means, 3)
        count = len(self.means)
        self.scales = _as_rows(scales, 3) if scales is not None else np.full((count, 3), 1e-2)
        self.rotations = _as_rows(rotations, 4) if rotations is not None else _identity_quaternions(count)
        self.opacities = (np.asarray(opacities, dtype=np.float64).reshape(-1)
                          if opacities is not None else np.full(count, 0.5))
        self.colors = _as_rows(colors, 3) if colors is not None else np.zeros((count, 3))
        self.object_ids = (np.asarray(object_ids, dtype=np.int64).reshape(-1)
                           if object_ids is not None else np.zeros(count, dtype=np.int64))
        self.generation = int(generation)

        lengths = {len(self.scales), len(self.rotations), len(self.opacities),
                   len(self.colors), len(self.object_ids)}
        if lengths != {count}:
            raise ProcessingError("GaussianMap arrays have inconsistent lengths", "InputError")

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def from_primitives(cls, primitives: List[GaussianPrimitive], generation: int = 0) -> "GaussianMap":
        if not primitives:
            return cls(generation=generation)
        return cls(
            means=np.array([p.mean for p in primitives]),
            scales=np.array([p.scale for p in primitives]),
            rotations=np.array([p.orientation for p in primitives]),
            opacities=np.array([p.opacity for p in primitives]),
            colors=np.array([p.color for p in primitives]),
            object_ids=np.array([p.object_id for p in primitives]),
            generation=generation,
        )

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[index].copy(),
            scale=self.scales[index].copy(),
            orientation=self.rotations[index].copy(),
            opacity=float(self.opacities[index]),
            color=self.colors[index].copy(),
            object_id=int(self.object_ids[index]),
        )

    @property
    def primitives(self) -> List[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def copy(self) -> "GaussianMap":
        return GaussianMap(self.means.copy(), self.scales.copy(), self.rotations.copy(),
                           self.opacities.copy(), self.colors.copy(), self.object_ids.copy(),
                           self.generation)

    def subset(self, indices: np.ndarray) -> "GaussianMap":
        """Returns a new map holding only `indices`; generation is carried over."""
        indices = np.asarray(indices, dtype=np.int64)
        return GaussianMap(self.means[indices], self.scales[indices], self.rotations[indices],
                           self.opacities[indices], self.colors[indices], self.object_ids[indices],
                           self.generation)

    def extend(self, other: "GaussianMap") -> None:
        if len(other) == 0:
            return
        self.means = np.concatenate([self.means, other.means])
        self.scales = np.concatenate([self.scales, other.scales])
        self.rotations = np.concatenate([self.rotations, other.rotations])
        self.opacities = np.concatenate([self.opacities, other.opacities])
        self.colors = np.concatenate([self.colors, other.colors])
        self.object_ids = np.concatenate([self.object_ids, other.object_ids])
        self.generation += 1

    def remove(self, indices) -> int:
        indices = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
        if len(indices) == 0:
            return 0
        keep = np.ones(len(self), dtype=bool)
        keep[indices] = False
        self.means = self.means[keep]
        self.scales = self.scales[keep]
        self.rotations = self.rotations[keep]
        self.opacities = self.opacities[keep]
        self.colors = self.colors[keep]
        self.object_ids = self.object_ids[keep]
        self.generation += 1
        return len(indices)

    def count_by_id(self) -> Dict[int, int]:
        ids, counts = np.unique(self.object_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


def _as_rows(values, width: int) -> np.ndarray:
    if values is None:
        return np.zeros((0, width))
    return np.asarray(values, dtype=np.float64).reshape(-1, width)


def _identity_quaternions(count: int) -> np.ndarray:
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    return rotations


@dataclass
class FrameObservation:
    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    mask_missing: bool = False

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(np.int64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ProcessingError(f"Frame {self.index}: rgb must be HxWx3", "InputError")
        if self.depth.shape != self.rgb.shape[:2] or self.mask.shape != self.rgb.shape[:2]:
            raise ProcessingError(f"Frame {self.index}: rgb, depth and mask dimensions differ", "InputError")
        if np.any(self.depth < 0):
            raise ProcessingError(f"Frame {self.index}: negative depth values", "InputError")
        if np.any(self.mask < 0):
            raise ProcessingError(f"Frame {self.index}: negative mask labels", "InputError")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def valid_depth(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)

    def object_ids(self) -> List[int]:
        return [int(i) for i in np.unique(self.mask) if i != BACKGROUND_ID]


@dataclass
class LabeledPointCloud:
    """N x 7 records: r, g, b, x, y, z, object_id."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 7)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def colors(self) -> np.ndarray:
        return self.points[:, 0:3]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, 3:6]

    @property
    def object_ids(self) -> np.ndarray:
        return self.points[:, 6].astype(np.int64)


@dataclass
class Projected2DGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    camera_depth: float
    source_index: int
    object_id: int


@dataclass
class ProjectedGaussians:
    """Batched projection result; entries are the primitives that survived culling."""
    means2d: np.ndarray          # (K, 2)
    cov2d: np.ndarray            # (K, 2, 2), regularised
    conics: np.ndarray           # (K, 2, 2), inverse of cov2d
    camera_points: np.ndarray    # (K, 3)
    jacobians: np.ndarray        # (K, 2, 3)
    cov3d: np.ndarray            # (K, 3, 3) world covariance
    radii: np.ndarray            # (K,) pixel radius of the 3-sigma footprint
    source_index: np.ndarray     # (K,)
    object_ids: np.ndarray       # (K,)

    def __len__(self) -> int:
        return len(self.source_index)

    @property
    def camera_depth(self) -> np.ndarray:
        return self.camera_points[:, 2]

    def entry(self, i: int) -> Projected2DGaussian:
        return Projected2DGaussian(self.means2d[i].copy(), self.cov2d[i].copy(),
                                   float(self.camera_points[i, 2]), int(self.source_index[i]),
                                   int(self.object_ids[i]))

    def entries(self) -> List[Projected2DGaussian]:
        return [self.entry(i) for i in range(len(self))]


@dataclass
class PixelContributors:
    """Front-to-back contributor pairs kept for the backward pass.

    Pair arrays are flat (N,), grouped by pixel and sorted front to back
    inside each group. `row` points into `pixel_index` (P,) and `rank` is the
    layer of the pair within its pixel.
    """
    pixel_index: np.ndarray
    row: np.ndarray
    rank: np.ndarray
    entry: np.ndarray
    alpha: np.ndarray
    raw_alpha: np.ndarray
    falloff: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray
    offsets: np.ndarray          # (N, 2) pixel minus projected mean

    @property
    def depth_layers(self) -> int:
        return int(self.rank.max()) + 1 if len(self.rank) else 0


@dataclass
class RenderedFrame:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    per_pixel_contributors: Optional[PixelContributors] = None
    projected: Optional[ProjectedGaussians] = None


@dataclass
class RenderGradients:
    pose: np.ndarray             # (6,) rotation then translation
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


@dataclass
class EntityLoss:
    photometric: float
    geometric: float
    combined: float
    pixel_count: int = 0
    degenerate: bool = False


@dataclass
class ObjectLossBreakdown:
    per_object: Dict[int, EntityLoss]
    background: EntityLoss
    lambda_a: float
    invalid_depth_fraction: float


@dataclass
class LossFlowRecord:
    object_id: int
    values: List[float] = field(default_factory=list)

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(np.asarray(self.values, dtype=np.float64))


class ObjectState(str, Enum):
    DYNAMIC = "Dynamic"
    STATIC = "Static"


@dataclass
class DynamicObjectRegistry:
    state: Dict[int, ObjectState] = field(default_factory=dict)
    static_streak: Dict[int, int] = field(default_factory=dict)
    dynamic_set: Set[int] = field(default_factory=set)

    def is_dynamic(self, object_id: int) -> bool:
        return object_id in self.dynamic_set


@dataclass
class GmmModel:
    component_count: int
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    static_component: int
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    aic: Optional[float] = None
    converged: bool = True
    log_likelihood: float = 0.0
    feature_definition: str = "mean and standard deviation of loss deltas, standardized"
    estimator: Any = field(default=None, repr=False)


@dataclass
class TrackingResult:
    pose: CameraPose
    loss_flows: List[LossFlowRecord] = field(default_factory=list)
    classifications: Dict[int, ObjectState] = field(default_factory=dict)
    coarse_iterations_run: int = 0
    fine_iterations_run: int = 0
    final_loss: float = 0.0
    aborted: bool = False


@dataclass
class KeyframeEntry:
    frame_index: int
    pose: CameraPose
    frame: FrameObservation
    dynamic_mask: np.ndarray


@dataclass
class KeyframeWindow:
    capacity: int = 8
    entries: List[KeyframeEntry] = field(default_factory=list)

    def add(self, entry: KeyframeEntry) -> None:
        self.entries.append(entry)
        self.entries.sort(key=lambda e: e.frame_index)
        while len(self.entries) > self.capacity:
            self.entries.pop(0)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def newest(self) -> KeyframeEntry:
        return self.entries[-1]


@dataclass
class ManifestEntry:
    timestamp: float
    path: str


@dataclass
class GroundTruthEntry:
    timestamp: float
    translation: np.ndarray
    quaternion: np.ndarray  # (qx, qy, qz, qw)


@dataclass
class SequenceManifest:
    root: str
    rgb: List[ManifestEntry] = field(default_factory=list)
    depth: List[ManifestEntry] = field(default_factory=list)
    masks: List[ManifestEntry] = field(default_factory=list)
    groundtruth: List[GroundTruthEntry] = field(default_factory=list)
    associations: List[Tuple[int, int, Optional[int]]] = field(default_factory=list)
    intrinsics_preset: str = "tum"
    skipped: int = 0


@dataclass
class TexturedPlane:
    point: np.ndarray
    normal: np.ndarray
    color_a: np.ndarray
    color_b: np.ndarray
    tile_size: float = 0.25


@dataclass
class SceneObject:
    object_id: int
    shape: str                   # "sphere" or "box"
    size: float                  # radius, or half edge length
    color: np.ndarray
    keyframes: List[Tuple[float, np.ndarray]] = field(default_factory=list)

    def position_at(self, time: float) -> np.ndarray:
        times = np.array([k[0] for k in self.keyframes])
        positions = np.array([k[1] for k in self.keyframes], dtype=np.float64)
        return np.array([np.interp(time, times, positions[:, axis]) for axis in range(3)])


@dataclass
class CameraWaypoint:
    time: float
    position: np.ndarray         # camera centre in world
    rotvec: np.ndarray           # camera-to-world rotation as rotation vector


@dataclass
class SyntheticSceneSpec:
    planes: List[TexturedPlane]
    objects: List[SceneObject]
    camera_path: List[CameraWaypoint]
    intrinsics: CameraIntrinsics
    frame_count: int
    frame_interval: float = 1.0 / 30.0
    photometric_sigma: float = 0.0
    depth_sigma: float = 0.0
    depth_dropout: float = 0.0


@dataclass
class SyntheticSequence:
    frames: List[FrameObservation]
    trajectory: List[Tuple[float, CameraPose]]
    intrinsics: CameraIntrinsics


@dataclass
class AteReport:
    rmse: float
    std: float
    mean: float
    errors: np.ndarray
    timestamps: np.ndarray
    alignment: CameraPose
    scale: float = 1.0


@dataclass
class PipelineConfig:
    dataset: str = ""
    synthetic_spec: str = ""
    preset: str = "tum"
    output_dir: str = "output"
    lambda_lo: float = 0.88
    lambda_up: float = 0.95
    theta: float = 0.999
    coarse_iterations: int = 40
    fine_max_iterations: int = 100
    fine_tolerance: float = 1e-5
    fine_patience: int = 3
    rotation_step: float = 0.003
    translation_step: float = 0.01
    iou_max: float = 0.8
    oc_min: float = 0.2
    static_streak: int = 3
    coarse_stride: int = 128
    fine_stride: int = 32
    scale_coefficient: float = 0.01
    initial_opacity: float = 0.5
    near_plane: float = 0.01
    tile_size: int = 16
    initial_mapping_iterations: int = 300
    mapping_iterations: int = 60
    window_capacity: int = 8
    window_samples: int = 2
    densify_alpha: float = 0.5
    visibility_alpha: float = 1e-3
    min_opacity: float = 0.05
    gmm_seed: int = 7
    gmm_history_frames: int = 10
    gmm_min_samples: int = 6
    relative_flows: bool = True
    flow_decrease_ratio: float = 0.5
    tracking_alpha: float = 0.5
    keyframe_every: int = 0
    lpips_scores: str = ""
    mapping_seed: int = 0
    association_tolerance: float = 0.02
    max_frames: int = 0
    filtering: bool = True
    synthetic_seed: int = 0
