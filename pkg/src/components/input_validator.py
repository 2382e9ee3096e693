import json
import logging
import os
from dataclasses import fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.models.data_models import (
    CameraIntrinsics, CameraWaypoint, PipelineConfig, ProcessingError, SceneObject, SyntheticSceneSpec,
    TexturedPlane, ValidationResult
)
from src.components.synthetic_generator import moving_object_scene, static_desk_scene, synthetic_intrinsics

logger = logging.getLogger(__name__)

PRESETS = {
    "tum": {"coarse_stride": 128, "fine_stride": 32},
    "bonn": {"coarse_stride": 256, "fine_stride": 64},
    "synthetic": {"coarse_stride": 3, "fine_stride": 3, "scale_coefficient": 0.02, "mapping_iterations": 30,
                  "window_samples": 1, "keyframe_every": 5, "initial_mapping_iterations": 200},
}
TRUE_WORDS = {"true", "yes", "on", "1"}
FALSE_WORDS = {"false", "no", "off", "0"}
SCENE_TEMPLATES = {"static_desk": static_desk_scene, "moving_object": moving_object_scene}


class InputValidator:
    def __init__(self):
        self.field_types = {f.name: f.type for f in fields(PipelineConfig)}

    # ------------------------------------------------------------------ config

    @staticmethod
    def parse_config_text(text: str, source: str = "<config>") -> List[Tuple[int, str, str]]:
        """`key = value` lines with `#` comments → (line, key, raw value)."""
        entries = []
        for line_number, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ProcessingError(f"{source}:{line_number}: expected 'key = value'", "ConfigError")
            key, value = (part.strip() for part in stripped.split("=", 1))
            entries.append((line_number, key, value))
        return entries

    def coerce(self, key: str, raw: str) -> Any:
        kind = self.field_types[key]
        kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
        if kind is bool:
            word = raw.lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        return kind(raw)

    def build_config(self, path: Optional[str] = None, overrides: Sequence[str] = ()) -> PipelineConfig:
        """Preset defaults, then the config file, then `key=value` overrides."""
        assignments: List[Tuple[str, str, str]] = []
        if path:
            if not os.path.exists(path):
                raise ProcessingError(f"Config file not found: {path}", "IOError")
            with open(path, "r") as handle:
                for line_number, key, value in self.parse_config_text(handle.read(), path):
                    assignments.append((f"{path}:{line_number}", key, value))
        for item in overrides:
            if "=" not in item:
                raise ProcessingError(f"Override {item!r} is not key=value", "ConfigError")
            key, value = (part.strip() for part in item.split("=", 1))
            assignments.append(("--set", key, value))

        errors, values = [], {}
        for origin, key, raw in assignments:
            if key not in self.field_types:
                errors.append(f"{origin}: unknown key '{key}'")
                continue
            try:
                values[key] = self.coerce(key, raw)
            except ValueError as exc:
                errors.append(f"{origin}: {key}: {exc}")
        if errors:
            raise ProcessingError("; ".join(errors), "ConfigError")

        preset = values.get("preset", PipelineConfig.preset)
        base = replace(PipelineConfig(), **PRESETS.get(preset, {}))
        config = replace(base, **values)
        result = self.validate_config(config)
        if not result.is_valid:
            raise ProcessingError("; ".join(result.errors), "ConfigError")
        return config

    def validate_config(self, config: PipelineConfig) -> ValidationResult:
        errors = []
        if config.preset not in PRESETS:
            errors.append(f"preset: unknown preset '{config.preset}' (choose from {', '.join(PRESETS)})")
        if not 0.0 <= config.lambda_lo <= config.lambda_up <= 1.0:
            errors.append("lambda_lo/lambda_up: need 0 <= lambda_lo <= lambda_up <= 1")
        if not 0.0 < config.theta < 1.0:
            errors.append("theta: must lie in (0, 1)")
        if config.coarse_iterations < 2:
            errors.append("coarse_iterations: must be >= 2")
        if not 0.0 < config.iou_max <= 1.0:
            errors.append("iou_max: must lie in (0, 1]")
        if not 0.0 <= config.oc_min <= 1.0:
            errors.append("oc_min: must lie in [0, 1]")
        for name in ("coarse_stride", "fine_stride", "static_streak", "window_capacity", "tile_size",
                     "fine_max_iterations", "fine_patience", "gmm_min_samples"):
            if getattr(config, name) < 1:
                errors.append(f"{name}: must be >= 1")
        for name in ("initial_mapping_iterations", "mapping_iterations", "window_samples", "max_frames",
                     "gmm_history_frames", "keyframe_every"):
            if getattr(config, name) < 0:
                errors.append(f"{name}: must be >= 0")
        for name in ("rotation_step", "translation_step", "scale_coefficient", "near_plane",
                     "association_tolerance", "fine_tolerance"):
            if not getattr(config, name) > 0:
                errors.append(f"{name}: must be positive")
        for name in ("initial_opacity", "densify_alpha", "visibility_alpha", "min_opacity"):
            if not 0.0 < getattr(config, name) < 1.0:
                errors.append(f"{name}: must lie in (0, 1)")
        if not 0.0 <= config.tracking_alpha < 1.0:
            errors.append("tracking_alpha: must lie in [0, 1)")
        if not config.flow_decrease_ratio > 0:
            errors.append("flow_decrease_ratio: must be positive")
        return ValidationResult(is_valid=len(errors) == 0, errors=errors)

    # -------------------------------------------------------- synthetic scenes

    @staticmethod
    def _vector(data: Dict[str, Any], key: str, where: str, length: int = 3) -> np.ndarray:
        if key not in data:
            raise ProcessingError(f"{where}.{key}: missing", "SpecError")
        try:
            vector = np.asarray(data[key], dtype=np.float64).reshape(length)
        except (TypeError, ValueError):
            raise ProcessingError(f"{where}.{key}: expected {length} numbers", "SpecError")
        return vector

    def parse_synthetic_spec(self, data: Dict[str, Any]) -> SyntheticSceneSpec:
        """Either a named template with keyword overrides, or an explicit scene description."""
        if not isinstance(data, dict):
            raise ProcessingError("spec: expected a JSON object", "SpecError")
        if "template" in data:
            template = data["template"]
            if template not in SCENE_TEMPLATES:
                raise ProcessingError(f"template: unknown template {template!r}", "SpecError")
            try:
                return SCENE_TEMPLATES[template](**data.get("parameters", {}))
            except TypeError as exc:
                raise ProcessingError(f"parameters: {exc}", "SpecError")

        try:
            width, height = int(data.get("width", 64)), int(data.get("height", 64))
            camera = data.get("intrinsics")
            intrinsics = (synthetic_intrinsics(width, height) if camera is None else
                          CameraIntrinsics(float(camera["fx"]), float(camera["fy"]), float(camera["cx"]),
                                           float(camera["cy"]), width, height,
                                           float(camera.get("depth_scale", 5000.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProcessingError(f"intrinsics: {exc}", "SpecError")

        planes = []
        for i, plane in enumerate(data.get("planes", [])):
            where = f"planes[{i}]"
            planes.append(TexturedPlane(self._vector(plane, "point", where), self._vector(plane, "normal", where),
                                        self._vector(plane, "color_a", where), self._vector(plane, "color_b", where),
                                        float(plane.get("tile_size", 0.25))))

        objects = []
        for i, obj in enumerate(data.get("objects", [])):
            where = f"objects[{i}]"
            for key in ("id", "shape", "size", "motion"):
                if key not in obj:
                    raise ProcessingError(f"{where}.{key}: missing", "SpecError")
            try:
                keyframes = [(float(t), np.asarray(p, dtype=np.float64).reshape(3)) for t, p in obj["motion"]]
            except (TypeError, ValueError):
                raise ProcessingError(f"{where}.motion: expected [[time, [x, y, z]], ...]", "SpecError")
            objects.append(SceneObject(int(obj["id"]), str(obj["shape"]), float(obj["size"]),
                                       self._vector(obj, "color", where), keyframes))

        path = []
        for i, waypoint in enumerate(data.get("camera", [])):
            where = f"camera[{i}]"
            if "time" not in waypoint:
                raise ProcessingError(f"{where}.time: missing", "SpecError")
            rotvec = self._vector(waypoint, "rotvec", where) if "rotvec" in waypoint else np.zeros(3)
            path.append(CameraWaypoint(float(waypoint["time"]), self._vector(waypoint, "position", where), rotvec))

        noise = data.get("noise", {})
        if "frame_count" not in data:
            raise ProcessingError("frame_count: missing", "SpecError")
        return SyntheticSceneSpec(planes, objects, path, intrinsics, int(data["frame_count"]),
                                  float(data.get("frame_interval", 1.0 / 30.0)),
                                  float(noise.get("photometric_sigma", 0.0)), float(noise.get("depth_sigma", 0.0)),
                                  float(noise.get("depth_dropout", 0.0)))

    def load_synthetic_spec(self, path: str) -> SyntheticSceneSpec:
        if not os.path.exists(path):
            raise ProcessingError(f"Synthetic spec not found: {path}", "IOError")
        try:
            with open(path, "r") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ProcessingError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})", "SpecError")
        return self.parse_synthetic_spec(data)
