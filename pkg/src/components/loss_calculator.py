import logging
from typing import Iterable, Optional, Set, Tuple

import numpy as np

from src.models.data_models import (
    EntityLoss, FrameObservation, ObjectLossBreakdown, ProcessingError, RenderedFrame
)
from src.components.scene_initializer import FramePartition

logger = logging.getLogger(__name__)


class LossCalculator:
    """Masked photometric / geometric rendering losses with depth-quality weighting."""

    def __init__(self, lambda_lo: float = 0.88, lambda_up: float = 0.95):
        if not 0.0 <= lambda_lo <= lambda_up <= 1.0:
            raise ProcessingError(f"Invalid lambda range [{lambda_lo}, {lambda_up}]", "ConfigError")
        self.lambda_lo = lambda_lo
        self.lambda_up = lambda_up

    @staticmethod
    def invalid_depth_fraction(frame: FrameObservation) -> float:
        return float(1.0 - np.mean(frame.valid_depth))

    def adaptive_lambda(self, frame: FrameObservation) -> float:
        # poorer depth → more photometric weight
        return self.lambda_lo + (self.lambda_up - self.lambda_lo) * self.invalid_depth_fraction(frame)

    @staticmethod
    def combine(photometric: float, geometric: float, lambda_a: float) -> float:
        """Blends photometric and geometric terms as lambda * photometric + (1 - lambda) * geometric."""
        if not (np.isfinite(photometric) and np.isfinite(geometric)):
            raise ProcessingError("Cannot combine non-finite losses", "NumericsError")
        if not 0.0 <= lambda_a <= 1.0:
            raise ProcessingError(f"lambda_a={lambda_a} outside [0, 1]", "InputError")
        return lambda_a * photometric + (1.0 - lambda_a) * geometric

    @staticmethod
    def masked_photometric(rendered: RenderedFrame, frame: FrameObservation, pixel_set: np.ndarray) -> float:
        pixel_set = np.asarray(pixel_set, dtype=bool)
        if not pixel_set.any():
            raise ProcessingError("Photometric loss over an empty pixel set", "InputError")
        per_pixel = np.mean(np.abs(rendered.color - frame.rgb), axis=2)
        return float(np.mean(per_pixel[pixel_set]))

    @staticmethod
    def masked_geometric(rendered: RenderedFrame, frame: FrameObservation,
                         pixel_set: np.ndarray) -> Tuple[float, bool]:
        """Mean |D̂ - D| over pixels of the set with valid depth; (0, True) when none are valid."""
        pixel_set = np.asarray(pixel_set, dtype=bool)
        if not pixel_set.any():
            raise ProcessingError("Geometric loss over an empty pixel set", "InputError")
        usable = pixel_set & frame.valid_depth
        if not usable.any():
            return 0.0, True
        return float(np.mean(np.abs(rendered.depth[usable] - frame.depth[usable]))), False

    def entity_loss(self, rendered: RenderedFrame, frame: FrameObservation, pixel_set: np.ndarray,
                    lambda_a: float) -> EntityLoss:
        photometric = self.masked_photometric(rendered, frame, pixel_set)
        geometric, degenerate = self.masked_geometric(rendered, frame, pixel_set)
        return EntityLoss(photometric, geometric, self.combine(photometric, geometric, lambda_a),
                          int(np.count_nonzero(pixel_set)), degenerate)

    def object_breakdown(self, rendered: RenderedFrame, frame: FrameObservation, partition: FramePartition,
                         lambda_a: Optional[float] = None) -> ObjectLossBreakdown:
        if lambda_a is None:
            lambda_a = self.adaptive_lambda(frame)
        per_object = {}
        for object_id, pixel_set in partition.objects.items():
            if pixel_set.any():
                per_object[object_id] = self.entity_loss(rendered, frame, pixel_set, lambda_a)
        if partition.background is not None and partition.background.any():
            background = self.entity_loss(rendered, frame, partition.background, lambda_a)
        else:
            background = EntityLoss(0.0, 0.0, 0.0, 0, True)
        return ObjectLossBreakdown(per_object, background, lambda_a, self.invalid_depth_fraction(frame))

    def weighted_loss(self, rendered: RenderedFrame, frame: FrameObservation, pixel_weight: np.ndarray,
                      lambda_a: float) -> Tuple[float, np.ndarray]:
        """Blended L1 loss averaged under `pixel_weight` and its derivative w.r.t. rendered r, g, b, depth."""
        pixel_weight = np.asarray(pixel_weight, dtype=np.float64)
        total = pixel_weight.sum()
        height, width = frame.shape
        upstream = np.zeros((height, width, 4))
        if total <= 0:
            raise ProcessingError("Weighted loss over an empty pixel set", "InputError")

        color_residual = rendered.color - frame.rgb
        photometric = float(np.sum(pixel_weight * np.mean(np.abs(color_residual), axis=2)) / total)
        upstream[..., :3] = lambda_a * pixel_weight[..., None] * np.sign(color_residual) / (3.0 * total)

        depth_weight = np.where(frame.valid_depth, pixel_weight, 0.0)
        depth_total = depth_weight.sum()
        geometric = 0.0
        if depth_total > 0:
            depth_residual = np.where(frame.valid_depth, rendered.depth - np.nan_to_num(frame.depth), 0.0)
            geometric = float(np.sum(depth_weight * np.abs(depth_residual)) / depth_total)
            upstream[..., 3] = (1.0 - lambda_a) * depth_weight * np.sign(depth_residual) / depth_total
        return self.combine(photometric, geometric, lambda_a), upstream

    def joint_loss(self, rendered: RenderedFrame, frame: FrameObservation, pixel_sets: Iterable[np.ndarray],
                   lambda_a: float) -> Tuple[float, np.ndarray]:
        """Sum of per-entity losses (each a mean over its own pixels) and the summed derivative image."""
        loss = 0.0
        upstream = np.zeros(frame.shape + (4,))
        for pixel_set in pixel_sets:
            if not np.any(pixel_set):
                continue
            entity, entity_upstream = self.weighted_loss(rendered, frame, pixel_set, lambda_a)
            loss += entity
            upstream += entity_upstream
        return loss, upstream

    def mapping_weights(self, frame: FrameObservation, dynamic_ids: Set[int],
                        rendered: Optional[RenderedFrame] = None,
                        uncovered_alpha: Optional[float] = None) -> np.ndarray:
        keep = ~np.isin(frame.mask, list(dynamic_ids)) if dynamic_ids else np.ones(frame.shape, dtype=bool)
        if rendered is not None and uncovered_alpha is not None:
            # pruned regions without any Gaussians yet stay out of the optimisation
            keep &= rendered.alpha >= uncovered_alpha
        return keep.astype(np.float64)

    def mapping_loss(self, rendered: RenderedFrame, frame: FrameObservation, dynamic_ids: Set[int],
                     lambda_a: Optional[float] = None,
                     uncovered_alpha: Optional[float] = None) -> Tuple[float, np.ndarray]:
        weight_image = self.mapping_weights(frame, dynamic_ids, rendered, uncovered_alpha)
        if not weight_image.any():
            raise ProcessingError(f"Frame {frame.index}: every pixel is masked as dynamic", "DegenerateInputError")
        if lambda_a is None:
            lambda_a = self.adaptive_lambda(frame)
        loss, _ = self.weighted_loss(rendered, frame, weight_image, lambda_a)
        return loss, weight_image
