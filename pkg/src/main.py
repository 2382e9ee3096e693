#!/usr/bin/env python3

import argparse
import logging
import os
import sys
import time
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import psutil
from tqdm import tqdm

# Repository root on the path so `src.` imports resolve when run as a script
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.models.data_models import (
    CameraIntrinsics, CameraPose, DynamicObjectRegistry, FrameObservation, KeyframeEntry,
    KeyframeWindow, ObjectState, PipelineConfig, ProcessingError
)
from src.components.dataset_loader import DatasetLoader
from src.components.dynamic_filter import DynamicFilter
from src.components.evaluator import Evaluator
from src.components.gaussian_mapper import GaussianMapper
from src.components.input_validator import InputValidator
from src.components.loss_calculator import LossCalculator
from src.components.output_generator import OutputGenerator
from src.components.pose_tracker import PoseTracker
from src.components.scene_initializer import SceneInitializer
from src.components.splat_renderer import SplatRenderer
from src.components.synthetic_generator import SyntheticGenerator

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_PIPELINE, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = {"ConfigError", "DatasetError", "IOError", "SpecError", "ParseError"}


class PipelineError(ProcessingError):
    """A module error raised while processing a specific frame and stage."""

    def __init__(self, frame_index: int, stage: str, cause: ProcessingError):
        super().__init__(f"frame {frame_index} [{stage}]: {cause.message}", cause.error_type)
        self.frame_index = frame_index
        self.stage = stage


class DynamicGaussianSLAM:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.input_validator = InputValidator()
        self.dataset_loader = DatasetLoader(config.association_tolerance)
        self.synthetic_generator = SyntheticGenerator()
        self.evaluator = Evaluator(config.association_tolerance)
        self.output_generator = OutputGenerator(config.output_dir)

        self.renderer = SplatRenderer(near_plane=config.near_plane, tile_size=config.tile_size)
        self.loss_calculator = LossCalculator(config.lambda_lo, config.lambda_up)
        self.initializer = SceneInitializer(config.scale_coefficient, config.initial_opacity)
        self.dynamic_filter = DynamicFilter(
            theta=config.theta, static_streak=config.static_streak, seed=config.gmm_seed,
            history_frames=config.gmm_history_frames, min_samples=config.gmm_min_samples,
            relative_flows=config.relative_flows, decrease_ratio=config.flow_decrease_ratio,
        ) if config.filtering else None

        # Performance monitoring
        self.start_time = None
        self.performance_stats: Dict[str, Any] = {}
        self.peak_memory_mb = 0.0

    # ----------------------------------------------------------------- inputs

    def open_sequence(self) -> Tuple[Iterator[FrameObservation], CameraIntrinsics, List[Tuple[float, CameraPose]]]:
        config = self.config
        if config.synthetic_spec:
            spec = self.input_validator.load_synthetic_spec(config.synthetic_spec)
            sequence = self.synthetic_generator.generate(spec, config.synthetic_seed)
            frames = sequence.frames[:config.max_frames] if config.max_frames > 0 else sequence.frames
            return iter(frames), sequence.intrinsics, sequence.trajectory
        if not config.dataset or not os.path.isdir(config.dataset):
            raise ProcessingError(f"dataset not found: {config.dataset or '<unset>'}", "DatasetError")
        manifest = self.dataset_loader.load_manifest(config.dataset, config.preset)
        intrinsics = self.dataset_loader.intrinsics_for(manifest)
        frames = self.dataset_loader.frames(manifest, intrinsics, config.max_frames)
        return frames, intrinsics, self.dataset_loader.groundtruth_poses(manifest)

    def _sample_memory(self) -> None:
        try:
            current = psutil.Process().memory_info().rss / 1024 / 1024
        except psutil.Error:
            return
        self.peak_memory_mb = max(self.peak_memory_mb, current)

    def _timed(self, stage: str, started: float) -> None:
        self.performance_stats[f"{stage}_time"] = self.performance_stats.get(f"{stage}_time", 0.0) \
            + time.time() - started

    # ------------------------------------------------------------------- run

    def run(self, flows_only: bool = False) -> Dict[str, Any]:
        """Tracks and maps the whole sequence and writes every artifact.

        With `flows_only` only the loss-flow CSV is written.
        """
        config = self.config
        self.start_time = time.time()
        self.performance_stats = {}
        self.output_generator.prepare()

        frames, intrinsics, groundtruth = self.open_sequence()
        lpips_scores = self.evaluator.load_lpips_scores(config.lpips_scores) if config.lpips_scores else {}
        tracker = PoseTracker(
            intrinsics, self.renderer, self.loss_calculator, self.initializer,
            coarse_iterations=config.coarse_iterations, fine_max_iterations=config.fine_max_iterations,
            fine_tolerance=config.fine_tolerance, fine_patience=config.fine_patience,
            rotation_step=config.rotation_step, translation_step=config.translation_step,
            coarse_stride=config.coarse_stride, tracking_alpha=config.tracking_alpha,
        )
        mapper = GaussianMapper(
            intrinsics, self.renderer, self.loss_calculator, self.initializer,
            iou_max=config.iou_max, oc_min=config.oc_min,
            initial_iterations=config.initial_mapping_iterations, iterations=config.mapping_iterations,
            window_samples=config.window_samples, densify_alpha=config.densify_alpha,
            visibility_alpha=config.visibility_alpha, min_opacity=config.min_opacity,
            fine_stride=config.fine_stride, seed=config.mapping_seed, keyframe_every=config.keyframe_every,
        )
        registry = DynamicObjectRegistry()
        window = KeyframeWindow(capacity=config.window_capacity)

        trajectory: List[Tuple[float, CameraPose]] = []
        flow_rows: List[Dict[str, Any]] = []
        metric_rows: List[Dict[str, Any]] = []
        dynamic_counts: Dict[int, int] = {}
        membership_counts: Dict[int, int] = {}
        keyframes, aborted_frames, since_keyframe = 0, 0, 0
        gaussian_map, last_visibility, previous = None, set(), None

        for frame in tqdm(frames, desc="Tracking", unit="frame", disable=not sys.stderr.isatty()):
            stage = "initialization"
            try:
                if gaussian_map is None:
                    started = time.time()
                    pose = CameraPose.identity()
                    cloud = self.initializer.back_project(frame, intrinsics, pose, stride=config.fine_stride)
                    gaussian_map = self.initializer.init_gaussians(cloud, pose)
                    stage = "initial_mapping"
                    mapper.initial_mapping(gaussian_map, frame, pose)
                    self.performance_stats["initial_psnr"] = mapper.last_report.get("psnr")
                    window.add(KeyframeEntry(frame.index, pose, frame, np.zeros(frame.shape, dtype=bool)))
                    last_visibility = mapper.visibility_set(gaussian_map, pose)
                    keyframes += 1
                    self._timed("mapping", started)
                else:
                    stage = "tracking"
                    started = time.time()
                    init_pose = tracker.predict_pose([p for _, p in trajectory])
                    result = tracker.track_frame(gaussian_map, frame, init_pose, registry,
                                                 self.dynamic_filter, previous)
                    pose = result.pose
                    aborted_frames += int(result.aborted)
                    flow_rows.extend(self.output_generator.flow_rows(frame.index, result.loss_flows))
                    for object_id, label in result.classifications.items():
                        if label == ObjectState.DYNAMIC:
                            dynamic_counts[object_id] = dynamic_counts.get(object_id, 0) + 1
                    for object_id in registry.dynamic_set:
                        membership_counts[object_id] = membership_counts.get(object_id, 0) + 1
                    self._timed("tracking", started)

                    stage = "mapping"
                    started = time.time()
                    visibility = mapper.visibility_set(gaussian_map, pose)
                    since_keyframe += 1
                    if mapper.keyframe_decision(visibility, last_visibility, since_keyframe):
                        since_keyframe = 0
                        dynamic_mask = np.isin(frame.mask, sorted(registry.dynamic_set))
                        window.add(KeyframeEntry(frame.index, pose, frame, dynamic_mask))
                        mapper.map_update(gaussian_map, window, registry)
                        last_visibility = mapper.visibility_set(gaussian_map, pose)
                        keyframes += 1
                        if not flows_only:
                            rendered = self.renderer.render(gaussian_map, pose, intrinsics)
                            self.output_generator.write_render(rendered, frame.index, intrinsics.depth_scale)
                    self._timed("mapping", started)

                trajectory.append((frame.timestamp, pose))
                previous = (frame, pose)

                if not flows_only and self.evaluator.metric_schedule(frame.index):
                    stage = "evaluation"
                    started = time.time()
                    row = self.frame_metrics(gaussian_map, frame, pose, intrinsics, registry)
                    if frame.index in lpips_scores:
                        row["lpips"] = lpips_scores[frame.index]
                    metric_rows.append(row)
                    self._timed("evaluation", started)
            except ProcessingError as exc:
                raise PipelineError(frame.index, stage, exc)
            self._sample_memory()

        if gaussian_map is None:
            raise ProcessingError("Sequence contains no frames", "DatasetError")

        self.output_generator.write_flows(flow_rows)
        if flows_only:
            return {"frames": len(trajectory), "flow_rows": len(flow_rows)}

        self.dataset_loader.write_trajectory(trajectory, self.output_generator.path("trajectory.txt"))
        self.output_generator.write_metrics(metric_rows)
        self.dataset_loader.save_checkpoint(gaussian_map, self.output_generator.path("map.npz"))

        ate = None
        if len(groundtruth) >= 2:
            ate = self.evaluator.align_and_ate(trajectory, groundtruth)
            self.output_generator.write_ate(ate)

        stats = self._get_performance_summary()
        stats.update({
            "frames": len(trajectory), "keyframes": keyframes, "aborted_frames": aborted_frames,
            "map_size": len(gaussian_map), "dynamic_frames_per_object": dynamic_counts,
            "dynamic_set_frames_per_object": membership_counts,
            "final_dynamic_set": sorted(registry.dynamic_set),
        })
        summary = self.output_generator.create_summary(self.config, stats, ate)
        self.output_generator.save_summary(summary)
        logger.info("Processed %d frames (%d keyframes), map holds %d Gaussians",
                    len(trajectory), keyframes, len(gaussian_map))
        return summary

    def frame_metrics(self, gaussian_map, frame: FrameObservation, pose: CameraPose,
                      intrinsics: CameraIntrinsics, registry: DynamicObjectRegistry) -> Dict[str, Any]:
        rendered = self.renderer.render(gaussian_map, pose, intrinsics)
        static = ~np.isin(frame.mask, sorted(registry.dynamic_set)) if registry.dynamic_set \
            else np.ones(frame.shape, dtype=bool)
        row = {"frame": frame.index,
               "psnr": self.evaluator.psnr(rendered.color, frame.rgb),
               "ssim": self.evaluator.ssim(rendered.color, frame.rgb),
               "psnr_static_region": float("nan"), "ssim_static_region": float("nan")}
        if static.any():
            row["psnr_static_region"] = self.evaluator.psnr(rendered.color, frame.rgb, static)
            try:
                row["ssim_static_region"] = self.evaluator.ssim(rendered.color, frame.rgb, static)
            except ProcessingError:
                logger.debug("Frame %d: static region misses every SSIM window", frame.index)
        return row

    def _get_performance_summary(self) -> Dict[str, Any]:
        summary = {
            "total_processing_time": time.time() - self.start_time if self.start_time else 0.0,
            "peak_memory_mb": self.peak_memory_mb,
            "thresholds": {
                "lambda_lo": self.config.lambda_lo, "lambda_up": self.config.lambda_up,
                "theta": self.config.theta, "iou_max": self.config.iou_max, "oc_min": self.config.oc_min,
                "static_streak": self.config.static_streak,
            },
        }
        summary.update(self.performance_stats)
        return summary


# -------------------------------------------------------------------- commands

def cmd_run(args: argparse.Namespace, flows_only: bool = False) -> int:
    overrides = list(args.set or [])
    if args.dataset:
        overrides.append(f"dataset={args.dataset}")
    if args.synthetic:
        overrides.append(f"synthetic_spec={args.synthetic}")
    if args.output:
        overrides.append(f"output_dir={args.output}")
    if flows_only and args.frames:
        overrides.append(f"max_frames={args.frames}")
    config = InputValidator().build_config(args.config, overrides)
    summary = DynamicGaussianSLAM(config).run(flows_only=flows_only)
    if summary.get("ate"):
        print(f"ATE rmse {summary['ate']['rmse']:.4f} m, std {summary['ate']['std']:.4f} m")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    loader = DatasetLoader(args.tolerance)
    estimated = loader.read_poses(args.estimated)
    groundtruth = loader.read_poses(args.groundtruth)
    try:
        report = Evaluator(args.tolerance).align_and_ate(estimated, groundtruth)
    except ProcessingError as exc:
        if exc.error_type != "InputError":
            raise
        # unassociable trajectories are bad input
        raise ProcessingError(exc.message, "DatasetError")
    output = OutputGenerator(args.output)
    os.makedirs(args.output, exist_ok=True)
    output.write_ate(report)
    print(f"ATE rmse {report.rmse:.6f} m, std {report.std:.6f} m over {len(report.errors)} poses")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = InputValidator().load_synthetic_spec(args.spec)
    sequence = SyntheticGenerator().generate(spec, args.seed)
    DatasetLoader().write_sequence(sequence, args.out_dir)
    print(f"Wrote {len(sequence.frames)} frames to {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynamic-gs-slam",
                                     description="RGB-D Gaussian splatting SLAM with loss-flow dynamic filtering")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "track and map a sequence"),
                            ("dump-flows", "write only the coarse-tracking loss flows")):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", help="key = value configuration file")
        sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sub.add_argument("--dataset", help="TUM-layout sequence directory")
        sub.add_argument("--synthetic", help="synthetic scene spec (JSON)")
        sub.add_argument("--output", help="output directory")
        if name == "dump-flows":
            sub.add_argument("--frames", type=int, default=0, help="number of frames to process")

    evaluate = commands.add_parser("eval", help="ATE of an estimated trajectory")
    evaluate.add_argument("estimated")
    evaluate.add_argument("groundtruth")
    evaluate.add_argument("--output", default="output")
    evaluate.add_argument("--tolerance", type=float, default=0.02)

    synth = commands.add_parser("synth", help="write a synthetic sequence in TUM layout")
    synth.add_argument("spec")
    synth.add_argument("out_dir")
    synth.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "dump-flows":
            return cmd_run(args, flows_only=True)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_synth(args)
    except ProcessingError as exc:
        logger.error("%s: %s", exc.error_type, exc.message)
        return EXIT_USAGE if exc.error_type in USAGE_ERRORS else EXIT_PIPELINE
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
