import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Tuple

import cv2
import numpy as np

from src.models.data_models import AteReport, LossFlowRecord, PipelineConfig, ProcessingError, RenderedFrame

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["frame", "psnr", "ssim", "psnr_static_region", "ssim_static_region"]
FLOW_COLUMNS = ["frame", "object_id", "iteration", "loss"]


class OutputGenerator:
    def __init__(self, output_dir: str = "output"):
        self.output_dir = output_dir
        self.timestamp_format = "%Y-%m-%dT%H:%M:%S.%f"

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_dir, *parts)

    def prepare(self) -> None:
        try:
            os.makedirs(self.path("renders"), exist_ok=True)
        except OSError as exc:
            raise ProcessingError(f"Cannot create output directory {self.output_dir}: {exc}", "IOError")

    def generate_timestamp(self) -> str:
        return datetime.now().strftime(self.timestamp_format)

    @staticmethod
    def config_hash(config: PipelineConfig) -> str:
        canonical = json.dumps(asdict(config), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # --------------------------------------------------------------------- csv

    @staticmethod
    def _write_rows(path: str, columns: List[str], rows: Iterable[Dict[str, Any]]) -> None:
        try:
            with open(path, "w", newline="") as handle:
                writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        except OSError as exc:
            raise ProcessingError(f"Cannot write {path}: {exc}", "IOError")

    def write_metrics(self, rows: List[Dict[str, Any]], path: Optional[str] = None) -> str:
        path = path or self.path("metrics.csv")
        columns = METRIC_COLUMNS + (["lpips"] if any("lpips" in row for row in rows) else [])
        self._write_rows(path, columns, rows)
        return path

    @staticmethod
    def flow_rows(frame_index: int, flows: List[LossFlowRecord]) -> List[Dict[str, Any]]:
        """One row per recorded loss value; the background is object 0."""
        return [{"frame": frame_index, "object_id": record.object_id, "iteration": iteration, "loss": float(value)}
                for record in flows for iteration, value in enumerate(record.values)]

    def write_flows(self, rows: List[Dict[str, Any]], path: Optional[str] = None) -> str:
        path = path or self.path("loss_flows.csv")
        self._write_rows(path, FLOW_COLUMNS, rows)
        return path

    # ------------------------------------------------------------------ images

    def write_render(self, rendered: RenderedFrame, frame_index: int, depth_scale: float = 5000.0) -> Tuple[str, str]:
        """8-bit RGB and 16-bit depth PNGs, matching the input conventions."""
        rgb_path = self.path("renders", f"{frame_index:06d}_rgb.png")
        depth_path = self.path("renders", f"{frame_index:06d}_depth.png")
        rgb8 = np.clip(np.round(rendered.color * 255.0), 0, 255).astype(np.uint8)
        depth16 = np.clip(np.round(rendered.depth * depth_scale), 0, 65535).astype(np.uint16)
        if not (cv2.imwrite(rgb_path, cv2.cvtColor(rgb8, cv2.COLOR_RGB2BGR)) and cv2.imwrite(depth_path, depth16)):
            raise ProcessingError(f"Cannot write renders for frame {frame_index}", "IOError")
        return rgb_path, depth_path

    # ----------------------------------------------------------------- reports

    def write_ate(self, report: AteReport, text_path: Optional[str] = None, csv_path: Optional[str] = None) -> None:
        text_path = text_path or self.path("ate.txt")
        csv_path = csv_path or self.path("ate_errors.csv")
        try:
            with open(text_path, "w") as handle:
                handle.write(f"matched_poses {len(report.errors)}\n")
                handle.write(f"ate_rmse_m {report.rmse:.9f}\n")
                handle.write(f"ate_std_m {report.std:.9f}\n")
                handle.write(f"ate_mean_m {report.mean:.9f}\n")
                handle.write(f"alignment_scale {report.scale:.9f}\n")
        except OSError as exc:
            raise ProcessingError(f"Cannot write {text_path}: {exc}", "IOError")
        self._write_rows(csv_path, ["timestamp", "error"],
                         ({"timestamp": float(t), "error": float(e)} for t, e in zip(report.timestamps, report.errors)))

    def save_summary(self, summary: Dict[str, Any], path: Optional[str] = None) -> str:
        path = path or self.path("summary.json")
        try:
            with open(path, "w", encoding="utf-8") as handle:
                json.dump(summary, handle, indent=2, ensure_ascii=False, default=_json_default)
        except OSError as exc:
            raise ProcessingError(f"Cannot write {path}: {exc}", "IOError")
        return path

    def create_summary(self, config: PipelineConfig, stats: Dict[str, Any],
                       ate: Optional[AteReport] = None, error: Optional[str] = None) -> Dict[str, Any]:
        summary = {
            "generated_at": self.generate_timestamp(),
            "config_hash": self.config_hash(config),
            "config": asdict(config),
            "statistics": stats,
            "ate": None if ate is None else {"rmse": ate.rmse, "std": ate.std, "mean": ate.mean,
                                             "matched_poses": int(len(ate.errors))},
        }
        if error is not None:
            summary["error"] = error
        return summary


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)
