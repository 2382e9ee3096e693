import logging
import os
from typing import Iterator, List, Sequence, Tuple

import cv2
import numpy as np

from src.models.data_models import (
    CameraIntrinsics, CameraPose, FrameObservation, GaussianMap, GroundTruthEntry, ManifestEntry,
    ProcessingError, SequenceManifest, SyntheticSequence
)
from src.components.evaluator import associate
from src.components.pose_utils import pose_to_tum, tum_to_pose

logger = logging.getLogger(__name__)

INTRINSICS_PRESETS = {
    "tum": CameraIntrinsics(535.4, 539.2, 320.1, 247.6, 640, 480, 5000.0),
    "bonn": CameraIntrinsics(542.822841, 542.576870, 315.593520, 237.756098, 640, 480, 5000.0),
}
INTRINSICS_FILE = "intrinsics.txt"
CHECKPOINT_VERSION = 1


def _format_number(value: float) -> str:
    # adding 0.0 folds -0.0 into 0.0
    return f"{float(value) + 0.0:.17g}"


class DatasetLoader:
    """TUM-layout RGB-D sequences with per-frame instance masks."""

    def __init__(self, association_tolerance: float = 0.02):
        self.association_tolerance = association_tolerance

    # ------------------------------------------------------------ index files

    @staticmethod
    def _data_lines(path: str) -> Iterator[Tuple[int, List[str]]]:
        if not os.path.exists(path):
            raise ProcessingError(f"Index file not found: {path}", "IOError")
        with open(path, "r") as handle:
            for line_number, line in enumerate(handle, start=1):
                stripped = line.strip()
                if stripped and not stripped.startswith("#"):
                    yield line_number, stripped.split()

    def read_index(self, path: str) -> List[ManifestEntry]:
        entries: List[ManifestEntry] = []
        for line_number, fields in self._data_lines(path):
            if len(fields) < 2:
                raise ProcessingError(f"{path}:{line_number}: expected 'timestamp path'", "ParseError")
            try:
                timestamp = float(fields[0])
            except ValueError:
                raise ProcessingError(f"{path}:{line_number}: bad timestamp {fields[0]!r}", "ParseError")
            if entries and timestamp <= entries[-1].timestamp:
                raise ProcessingError(f"{path}:{line_number}: timestamps must increase strictly", "ParseError")
            entries.append(ManifestEntry(timestamp, fields[1]))
        return entries

    def read_trajectory(self, path: str) -> List[GroundTruthEntry]:
        entries: List[GroundTruthEntry] = []
        for line_number, fields in self._data_lines(path):
            if len(fields) != 8:
                raise ProcessingError(f"{path}:{line_number}: expected 8 values, found {len(fields)}", "ParseError")
            try:
                values = [float(v) for v in fields]
            except ValueError:
                raise ProcessingError(f"{path}:{line_number}: non-numeric trajectory value", "ParseError")
            if entries and values[0] <= entries[-1].timestamp:
                raise ProcessingError(f"{path}:{line_number}: timestamps must increase strictly", "ParseError")
            entries.append(GroundTruthEntry(values[0], np.array(values[1:4]), np.array(values[4:8])))
        return entries

    def read_poses(self, path: str) -> List[Tuple[float, CameraPose]]:
        return [(e.timestamp, tum_to_pose(e.translation, e.quaternion)) for e in self.read_trajectory(path)]

    @staticmethod
    def write_trajectory(poses: Sequence[Tuple[float, CameraPose]], path: str) -> None:
        """Writes world-to-camera poses as TUM camera-to-world lines."""
        lines = []
        for timestamp, pose in poses:
            translation, quaternion = pose_to_tum(pose)
            quaternion = quaternion / np.linalg.norm(quaternion)
            values = [timestamp, *translation, *quaternion]
            if not np.all(np.isfinite(values)):
                raise ProcessingError(f"Non-finite pose at t={timestamp}", "NumericsError")
            lines.append(" ".join(_format_number(v) for v in values))
        try:
            with open(path, "w") as handle:
                handle.write("".join(line + "\n" for line in lines))
        except OSError as exc:
            raise ProcessingError(f"Cannot write trajectory {path}: {exc}", "IOError")

    # ---------------------------------------------------------------- sequence

    def load_manifest(self, root: str, preset: str = "tum") -> SequenceManifest:
        if not os.path.isdir(root):
            raise ProcessingError(f"dataset not found: {root}", "DatasetError")
        manifest = SequenceManifest(root=root, intrinsics_preset=preset)
        manifest.rgb = self.read_index(os.path.join(root, "rgb.txt"))
        manifest.depth = self.read_index(os.path.join(root, "depth.txt"))
        masks_path = os.path.join(root, "masks.txt")
        if os.path.exists(masks_path):
            manifest.masks = self.read_index(masks_path)
        gt_path = os.path.join(root, "groundtruth.txt")
        if os.path.exists(gt_path):
            manifest.groundtruth = self.read_trajectory(gt_path)

        rgb_times = [e.timestamp for e in manifest.rgb]
        pairs = associate(rgb_times, [e.timestamp for e in manifest.depth], self.association_tolerance)
        mask_of = dict(associate(rgb_times, [e.timestamp for e in manifest.masks], self.association_tolerance))
        manifest.associations = [(i, j, mask_of.get(i)) for i, j in pairs]
        manifest.skipped = len(manifest.rgb) + len(manifest.depth) - 2 * len(pairs)
        if manifest.skipped:
            logger.warning("%s: %d rgb/depth entries without a partner within %.3f s",
                           root, manifest.skipped, self.association_tolerance)
        return manifest

    def intrinsics_for(self, manifest: SequenceManifest) -> CameraIntrinsics:
        """intrinsics.txt in the sequence root overrides the preset."""
        path = os.path.join(manifest.root, INTRINSICS_FILE)
        if os.path.exists(path):
            for line_number, fields in self._data_lines(path):
                try:
                    fx, fy, cx, cy, width, height, depth_scale = (float(v) for v in fields)
                except ValueError:
                    raise ProcessingError(f"{path}:{line_number}: expected 'fx fy cx cy width height "
                                          f"depth_scale'", "ParseError")
                return CameraIntrinsics(fx, fy, cx, cy, int(width), int(height), depth_scale)
        if manifest.intrinsics_preset not in INTRINSICS_PRESETS:
            raise ProcessingError(f"No intrinsics preset '{manifest.intrinsics_preset}' and no {INTRINSICS_FILE} "
                                  f"in {manifest.root}", "ConfigError")
        return INTRINSICS_PRESETS[manifest.intrinsics_preset]

    def _read_image(self, manifest: SequenceManifest, relative: str) -> np.ndarray:
        path = os.path.join(manifest.root, relative)
        image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if image is None:
            raise ProcessingError(f"Cannot read image {path}", "IOError")
        return image

    def frames(self, manifest: SequenceManifest, intrinsics: CameraIntrinsics,
               max_frames: int = 0) -> Iterator[FrameObservation]:
        associations = manifest.associations[:max_frames] if max_frames > 0 else manifest.associations
        for index, (rgb_i, depth_i, mask_i) in enumerate(associations):
            bgr = self._read_image(manifest, manifest.rgb[rgb_i].path)
            if bgr.ndim == 2:
                bgr = cv2.cvtColor(bgr, cv2.COLOR_GRAY2BGR)
            rgb = cv2.cvtColor(bgr[..., :3], cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0
            depth = self._read_image(manifest, manifest.depth[depth_i].path).astype(np.float64) \
                / intrinsics.depth_scale

            if mask_i is None:
                mask, missing = np.zeros(depth.shape, dtype=np.int64), True
            else:
                mask = self._read_image(manifest, manifest.masks[mask_i].path)
                mask, missing = (mask[..., 0] if mask.ndim == 3 else mask).astype(np.int64), False
            yield FrameObservation(index, manifest.rgb[rgb_i].timestamp, rgb, depth, mask, missing)

    def load_sequence(self, root: str, preset: str = "tum",
                      max_frames: int = 0) -> Tuple[SequenceManifest, Iterator[FrameObservation]]:
        manifest = self.load_manifest(root, preset)
        intrinsics = self.intrinsics_for(manifest)
        return manifest, self.frames(manifest, intrinsics, max_frames)

    @staticmethod
    def groundtruth_poses(manifest: SequenceManifest) -> List[Tuple[float, CameraPose]]:
        return [(e.timestamp, tum_to_pose(e.translation, e.quaternion)) for e in manifest.groundtruth]

    # ------------------------------------------------------------------ writing

    def write_sequence(self, sequence: SyntheticSequence, out_dir: str) -> None:
        """Writes frames, masks, index files, ground truth and intrinsics in TUM layout."""
        intrinsics = sequence.intrinsics
        try:
            for folder in ("rgb", "depth", "masks"):
                os.makedirs(os.path.join(out_dir, folder), exist_ok=True)
        except OSError as exc:
            raise ProcessingError(f"Cannot create {out_dir}: {exc}", "IOError")

        index = {"rgb": [], "depth": [], "masks": []}
        for frame in sequence.frames:
            name = f"{frame.timestamp:.6f}.png"
            rgb8 = np.clip(np.round(frame.rgb * 255.0), 0, 255).astype(np.uint8)
            depth = np.where(frame.valid_depth, frame.depth, 0.0)
            depth16 = np.clip(np.round(depth * intrinsics.depth_scale), 0, 65535).astype(np.uint16)
            mask = frame.mask.astype(np.uint16 if frame.mask.max() > 255 else np.uint8)
            for folder, image in (("rgb", cv2.cvtColor(rgb8, cv2.COLOR_RGB2BGR)), ("depth", depth16),
                                  ("masks", mask)):
                path = os.path.join(out_dir, folder, name)
                if not cv2.imwrite(path, image):
                    raise ProcessingError(f"Cannot write image {path}", "IOError")
                index[folder].append(f"{frame.timestamp:.6f} {folder}/{name}")

        for folder, lines in index.items():
            with open(os.path.join(out_dir, f"{folder}.txt"), "w") as handle:
                handle.write(f"# {folder} index\n")
                handle.write("".join(line + "\n" for line in lines))
        self.write_trajectory(sequence.trajectory, os.path.join(out_dir, "groundtruth.txt"))
        with open(os.path.join(out_dir, INTRINSICS_FILE), "w") as handle:
            handle.write("# fx fy cx cy width height depth_scale\n")
            handle.write(" ".join(_format_number(v) for v in (
                intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                intrinsics.width, intrinsics.height, intrinsics.depth_scale)) + "\n")
        logger.info("Wrote %d frames to %s", len(sequence.frames), out_dir)

    # -------------------------------------------------------------- checkpoints

    @staticmethod
    def save_checkpoint(gaussian_map: GaussianMap, path: str) -> None:
        try:
            with open(path, "wb") as handle:
                np.savez(handle, version=np.int64(CHECKPOINT_VERSION), means=gaussian_map.means,
                         scales=gaussian_map.scales, rotations=gaussian_map.rotations,
                         opacities=gaussian_map.opacities, colors=gaussian_map.colors,
                         object_ids=gaussian_map.object_ids, generation=np.int64(gaussian_map.generation))
        except OSError as exc:
            raise ProcessingError(f"Cannot write checkpoint {path}: {exc}", "IOError")

    @staticmethod
    def load_checkpoint(path: str) -> GaussianMap:
        if not os.path.exists(path):
            raise ProcessingError(f"Checkpoint not found: {path}", "IOError")
        with np.load(path) as data:
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise ProcessingError(f"Unsupported checkpoint version {version}", "ParseError")
            return GaussianMap(data["means"], data["scales"], data["rotations"], data["opacities"],
                               data["colors"], data["object_ids"], int(data["generation"]))
