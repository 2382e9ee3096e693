import logging
from typing import List, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from src.models.data_models import (
    CameraIntrinsics, CameraPose, CameraWaypoint, FrameObservation, ProcessingError, SceneObject,
    SyntheticSceneSpec, SyntheticSequence, TexturedPlane
)

logger = logging.getLogger(__name__)

SHAPES = ("sphere", "box")


class SyntheticGenerator:
    """Ray-casts scripted scenes of textured planes, spheres and boxes.

    Depth is the camera z distance of the nearest hit. Masks carry the ID of
    the object hit, 0 for planes and misses.
    """

    def validate_spec(self, spec: SyntheticSceneSpec) -> None:
        errors = []
        ids = [obj.object_id for obj in spec.objects]
        if len(set(ids)) != len(ids):
            errors.append(f"objects: duplicate object IDs {sorted(i for i in set(ids) if ids.count(i) > 1)}")
        if any(i < 1 for i in ids):
            errors.append("objects: object IDs must be >= 1")
        for obj in spec.objects:
            if obj.shape not in SHAPES:
                errors.append(f"objects[{obj.object_id}].shape: unknown shape {obj.shape!r}")
            if not obj.size > 0:
                errors.append(f"objects[{obj.object_id}].size: must be positive")
            if not obj.keyframes:
                errors.append(f"objects[{obj.object_id}].keyframes: at least one keyframe required")
        if spec.frame_count < 2:
            errors.append(f"frame_count: {spec.frame_count} < 2")
        if not spec.camera_path:
            errors.append("camera_path: at least one waypoint required")
        if not (0.0 <= spec.depth_dropout <= 1.0):
            errors.append("depth_dropout: must lie in [0, 1]")
        if spec.photometric_sigma < 0 or spec.depth_sigma < 0:
            errors.append("noise sigmas must be non-negative")
        if errors:
            raise ProcessingError("; ".join(errors), "SpecError")

    # ---------------------------------------------------------------- camera

    @staticmethod
    def camera_pose_at(path: List[CameraWaypoint], time: float) -> CameraPose:
        """World-to-camera pose interpolated along the camera script."""
        waypoints = sorted(path, key=lambda w: w.time)
        times = np.array([w.time for w in waypoints])
        positions = np.array([w.position for w in waypoints], dtype=np.float64)
        if len(waypoints) == 1:
            rotation = Rotation.from_rotvec(waypoints[0].rotvec)
            centre = positions[0]
        else:
            clamped = float(np.clip(time, times[0], times[-1]))
            rotation = Slerp(times, Rotation.from_rotvec([w.rotvec for w in waypoints]))([clamped])[0]
            centre = np.array([np.interp(clamped, times, positions[:, axis]) for axis in range(3)])
        return CameraPose(rotation.as_matrix(), centre).inverse()

    # --------------------------------------------------------------- casting

    @staticmethod
    def _plane_basis(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        first = np.cross(normal, helper)
        first /= np.linalg.norm(first)
        return first, np.cross(normal, first)

    def _hit_plane(self, plane: TexturedPlane, origin: np.ndarray, rays: np.ndarray):
        normal = np.asarray(plane.normal, dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        denom = rays @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, (np.asarray(plane.point) - origin) @ normal / denom, np.inf)
        t = np.where(t > 0, t, np.inf)

        points = origin + rays * np.where(np.isfinite(t), t, 0.0)[:, None]
        first, second = self._plane_basis(normal)
        a = (points - plane.point) @ first
        b = (points - plane.point) @ second
        checker = (np.floor(a / plane.tile_size) + np.floor(b / plane.tile_size)) % 2 == 0
        color = np.where(checker[:, None], np.asarray(plane.color_a, float), np.asarray(plane.color_b, float))
        # smooth ripple so flat tiles still carry image gradients
        ripple = 0.85 + 0.15 * np.sin(np.pi * a / plane.tile_size) * np.cos(np.pi * b / plane.tile_size)
        return t, np.clip(color * ripple[:, None], 0.0, 1.0)

    @staticmethod
    def _hit_sphere(centre: np.ndarray, radius: float, origin: np.ndarray, rays: np.ndarray):
        offset = origin - centre
        a = np.sum(rays * rays, axis=1)
        b = 2.0 * rays @ offset
        c = offset @ offset - radius * radius
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        near, far = (-b - root) / (2 * a), (-b + root) / (2 * a)
        t = np.where(near > 0, near, far)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        normals = offset + rays * np.where(np.isfinite(t), t, 0.0)[:, None]
        return t, normals / radius

    @staticmethod
    def _hit_box(centre: np.ndarray, half: float, origin: np.ndarray, rays: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            inverse = 1.0 / rays
            t1 = (centre - half - origin) * inverse
            t2 = (centre + half - origin) * inverse
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_far > 0)
        t = np.where(hit, np.where(t_near > 0, t_near, t_far), np.inf)
        normals = np.zeros_like(rays)
        axis = np.argmax(np.minimum(t1, t2), axis=1)
        normals[np.arange(len(rays)), axis] = -np.sign(rays[np.arange(len(rays)), axis])
        return t, normals

    def render_view(self, spec: SyntheticSceneSpec, pose: CameraPose,
                    time: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        intrinsics = spec.intrinsics
        v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
        camera_rays = np.stack([(u.ravel() - intrinsics.cx) / intrinsics.fx,
                                (v.ravel() - intrinsics.cy) / intrinsics.fy,
                                np.ones(u.size)], axis=1)
        camera_to_world = pose.inverse()
        origin = camera_to_world.translation
        rays = camera_rays @ camera_to_world.rotation.T

        count = u.size
        best = np.full(count, np.inf)
        color = np.zeros((count, 3))
        mask = np.zeros(count, dtype=np.int64)

        for plane in spec.planes:
            t, plane_color = self._hit_plane(plane, origin, rays)
            closer = t < best
            best[closer], color[closer], mask[closer] = t[closer], plane_color[closer], 0

        for obj in spec.objects:
            centre = obj.position_at(time)
            if obj.shape == "sphere":
                t, normals = self._hit_sphere(centre, obj.size, origin, rays)
            else:
                t, normals = self._hit_box(centre, obj.size, origin, rays)
            directions = rays / np.linalg.norm(rays, axis=1, keepdims=True)
            shade = 0.5 + 0.5 * np.abs(np.sum(normals * directions, axis=1))
            closer = t < best
            best[closer] = t[closer]
            color[closer] = np.clip(np.asarray(obj.color, float) * shade[closer, None], 0.0, 1.0)
            mask[closer] = obj.object_id

        # rays have unit camera z, so the ray parameter is the z depth
        depth = np.where(np.isfinite(best), best, 0.0)
        shape = (intrinsics.height, intrinsics.width)
        return color.reshape(shape + (3,)), depth.reshape(shape), mask.reshape(shape)

    def generate(self, spec: SyntheticSceneSpec, seed: int = 0) -> SyntheticSequence:
        self.validate_spec(spec)
        rng = np.random.default_rng(seed)
        frames, trajectory = [], []
        for index in range(spec.frame_count):
            time = index * spec.frame_interval
            pose = self.camera_pose_at(spec.camera_path, time)
            rgb, depth, mask = self.render_view(spec, pose, time)
            if spec.photometric_sigma > 0:
                rgb = np.clip(rgb + rng.normal(0.0, spec.photometric_sigma, rgb.shape), 0.0, 1.0)
            if spec.depth_sigma > 0:
                depth = np.where(depth > 0, np.maximum(depth + rng.normal(0.0, spec.depth_sigma, depth.shape), 0.0),
                                 0.0)
            if spec.depth_dropout > 0:
                depth = np.where(rng.random(depth.shape) < spec.depth_dropout, 0.0, depth)
            frames.append(FrameObservation(index, time, rgb, depth, mask))
            trajectory.append((time, pose))
        logger.debug("Generated %d synthetic frames (%d objects)", len(frames), len(spec.objects))
        return SyntheticSequence(frames, trajectory, spec.intrinsics)


# --------------------------------------------------------------------- scenes

def synthetic_intrinsics(width: int = 64, height: int = 64) -> CameraIntrinsics:
    focal = 0.95 * width
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height, 5000.0)


def _room() -> List[TexturedPlane]:
    warm, cool = np.array([0.85, 0.7, 0.45]), np.array([0.3, 0.45, 0.7])
    light, dark = np.array([0.9, 0.9, 0.85]), np.array([0.35, 0.3, 0.3])
    return [
        TexturedPlane(np.array([0.0, 0.0, 3.0]), np.array([0.0, 0.0, -1.0]), light, dark, 0.3),
        TexturedPlane(np.array([0.0, 0.8, 0.0]), np.array([0.0, -1.0, 0.0]), warm, cool, 0.25),
        TexturedPlane(np.array([-1.6, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), cool, light, 0.35),
        TexturedPlane(np.array([1.6, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]), dark, warm, 0.35),
        TexturedPlane(np.array([0.0, -1.2, 0.0]), np.array([0.0, 1.0, 0.0]), light, cool, 0.4),
    ]


def _camera_arc(frame_count: int, frame_interval: float, sweep: float) -> List[CameraWaypoint]:
    duration = max(frame_count - 1, 1) * frame_interval
    waypoints = []
    for k, fraction in enumerate(np.linspace(0.0, 1.0, 5)):
        angle = sweep * (fraction - 0.5)
        position = np.array([0.6 * np.sin(angle), -0.05 * k / 4.0, 0.6 * (1.0 - np.cos(angle))])
        # yaw back towards the scene centre
        waypoints.append(CameraWaypoint(fraction * duration, position, np.array([0.0, -angle * 0.5, 0.0])))
    return waypoints


def static_desk_scene(frame_count: int = 30, width: int = 64, height: int = 64, sweep: float = 0.2,
                      frame_interval: float = 1.0 / 30.0) -> SyntheticSceneSpec:
    objects = [
        SceneObject(1, "box", 0.18, np.array([0.8, 0.25, 0.2]), [(0.0, np.array([-0.45, 0.45, 2.0]))]),
        SceneObject(2, "sphere", 0.2, np.array([0.25, 0.75, 0.35]), [(0.0, np.array([0.5, 0.35, 2.2]))]),
    ]
    return SyntheticSceneSpec(_room(), objects, _camera_arc(frame_count, frame_interval, sweep),
                              synthetic_intrinsics(width, height), frame_count, frame_interval)


def moving_object_scene(frame_count: int = 60, width: int = 64, height: int = 64, sweep: float = 1.0,
                        frame_interval: float = 1.0 / 30.0, speed: float = 0.055,
                        leg_frames: int = 20, radius: float = 0.38,
                        photometric_sigma: float = 0.0, depth_sigma: float = 0.0,
                        depth_dropout: float = 0.0) -> SyntheticSceneSpec:
    """Desk scene plus a sphere sweeping left and right at `speed` metres per frame."""
    spec = static_desk_scene(frame_count, width, height, sweep, frame_interval)
    leg = speed * leg_frames
    keyframes, x, direction = [], -leg / 2.0, 1.0
    for k in range(0, frame_count + leg_frames, leg_frames):
        keyframes.append((k * frame_interval, np.array([x, 0.1, 1.5])))
        x += direction * leg
        direction = -direction
    spec.objects.append(SceneObject(3, "sphere", radius, np.array([0.95, 0.85, 0.2]), keyframes))
    spec.photometric_sigma = photometric_sigma
    spec.depth_sigma = depth_sigma
    spec.depth_dropout = depth_dropout
    return spec
