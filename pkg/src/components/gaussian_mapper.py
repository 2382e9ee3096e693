import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
from scipy.special import expit, logit

from src.models.data_models import (
    CameraIntrinsics, CameraPose, DynamicObjectRegistry, FrameObservation, GaussianMap,
    KeyframeEntry, KeyframeWindow, ProcessingError
)
from src.components.dynamic_filter import DynamicFilter
from src.components.evaluator import Evaluator
from src.components.loss_calculator import LossCalculator
from src.components.scene_initializer import SceneInitializer
from src.components.splat_renderer import SplatRenderer

logger = logging.getLogger(__name__)

PARAMETERS = ("means", "log_scales", "rotations", "opacity_logits", "colors")

DEFAULT_LEARNING_RATES = {
    "means": 5e-4,
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "opacity_logits": 5e-2,
    "colors": 1e-2,
}


@dataclass
class AdamState:
    learning_rates: Dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.step += 1
        for name, grad in grads.items():
            m = self.first.get(name, np.zeros_like(grad))
            v = self.second.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first[name], self.second[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** self.step)
            v_hat = v / (1.0 - self.beta2 ** self.step)
            params[name] -= self.learning_rates[name] * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class MappingView:
    frame: FrameObservation
    pose: CameraPose
    weights: np.ndarray


class GaussianMapper:
    """Keyframe selection and map optimisation under the dynamic-masked loss."""

    def __init__(self, intrinsics: CameraIntrinsics, renderer: Optional[SplatRenderer] = None,
                 loss_calculator: Optional[LossCalculator] = None,
                 initializer: Optional[SceneInitializer] = None,
                 iou_max: float = 0.8, oc_min: float = 0.2,
                 initial_iterations: int = 300, iterations: int = 60, window_samples: int = 2,
                 densify_alpha: float = 0.5, visibility_alpha: float = 1e-3, min_opacity: float = 0.05,
                 fine_stride: int = 32, divergence_patience: int = 10, seed: int = 0, keyframe_every: int = 0,
                 learning_rates: Optional[Dict[str, float]] = None):
        self.intrinsics = intrinsics
        self.renderer = renderer or SplatRenderer()
        self.loss_calculator = loss_calculator or LossCalculator()
        self.initializer = initializer or SceneInitializer()
        self.evaluator = Evaluator()
        self.iou_max = iou_max
        self.oc_min = oc_min
        self.initial_iterations = initial_iterations
        self.iterations = iterations
        self.window_samples = window_samples
        self.densify_alpha = densify_alpha
        self.visibility_alpha = visibility_alpha
        self.min_opacity = min_opacity
        self.fine_stride = fine_stride
        self.divergence_patience = divergence_patience
        self.keyframe_every = keyframe_every
        self.learning_rates = dict(DEFAULT_LEARNING_RATES, **(learning_rates or {}))
        self.rng = np.random.default_rng(seed)
        self.last_report: Dict[str, float] = {}

    # ------------------------------------------------------------- keyframes

    def visibility_set(self, gaussian_map: GaussianMap, pose: CameraPose) -> Set[int]:
        return set(self.renderer.visibility(gaussian_map, pose, self.intrinsics, self.visibility_alpha).tolist())

    @staticmethod
    def covisibility(current: Set[int], last: Set[int]) -> Tuple[float, float]:
        """(IoU, overlap coefficient) of two visibility sets."""
        shared = len(current & last)
        union = len(current | last)
        smaller = min(len(current), len(last))
        return (shared / union if union else 0.0), (shared / smaller if smaller else 0.0)

    def keyframe_check(self, current_visibility: Set[int], last_keyframe_visibility: Set[int]) -> Tuple[bool, bool]:
        """(is_keyframe, degenerate); an empty set on either side forces a keyframe."""
        if not current_visibility or not last_keyframe_visibility:
            return True, True
        iou, overlap = self.covisibility(set(current_visibility), set(last_keyframe_visibility))
        return self.admits(iou, overlap), False

    def admits(self, iou: float, overlap: float) -> bool:
        return iou < self.iou_max and overlap > self.oc_min

    def keyframe_decision(self, current_visibility: Set[int], last_keyframe_visibility: Set[int],
                          frames_since_keyframe: int = 0) -> bool:
        """Covisibility test, or `keyframe_every` frames since the last keyframe (0 disables the interval)."""
        if self.keyframe_every > 0 and frames_since_keyframe >= self.keyframe_every:
            return True
        return self.keyframe_check(current_visibility, last_keyframe_visibility)[0]

    def sample_window(self, window: KeyframeWindow) -> List[KeyframeEntry]:
        """The newest keyframe plus up to `window_samples` others drawn without replacement."""
        if len(window) == 0:
            raise ProcessingError("Keyframe window is empty", "InputError")
        older = window.entries[:-1]
        count = min(self.window_samples, len(older))
        picked = sorted(self.rng.choice(len(older), size=count, replace=False).tolist()) if count else []
        return [older[i] for i in picked] + [window.newest]

    # ----------------------------------------------------------- optimisation

    @staticmethod
    def _to_params(gaussian_map: GaussianMap) -> Dict[str, np.ndarray]:
        return {
            "means": gaussian_map.means.copy(),
            "log_scales": np.log(gaussian_map.scales),
            "rotations": gaussian_map.rotations.copy(),
            "opacity_logits": logit(np.clip(gaussian_map.opacities, 1e-6, 1.0 - 1e-6)),
            "colors": gaussian_map.colors.copy(),
        }

    @staticmethod
    def _write_params(gaussian_map: GaussianMap, params: Dict[str, np.ndarray]) -> None:
        gaussian_map.means = params["means"].copy()
        gaussian_map.scales = np.exp(params["log_scales"])
        norms = np.linalg.norm(params["rotations"], axis=1, keepdims=True)
        params["rotations"] = params["rotations"] / np.maximum(norms, 1e-12)
        gaussian_map.rotations = params["rotations"].copy()
        gaussian_map.opacities = expit(params["opacity_logits"])
        params["colors"] = np.clip(params["colors"], 0.0, 1.0)
        gaussian_map.colors = params["colors"].copy()

    def _loss_and_grads(self, gaussian_map: GaussianMap,
                        views: List[MappingView]) -> Tuple[float, Dict[str, np.ndarray]]:
        count = len(gaussian_map)
        total = 0.0
        grads = {"means": np.zeros((count, 3)), "scales": np.zeros((count, 3)), "rotations": np.zeros((count, 4)),
                 "opacities": np.zeros(count), "colors": np.zeros((count, 3))}
        for view in views:
            if not view.weights.any():
                continue
            rendered = self.renderer.render(gaussian_map, view.pose, self.intrinsics)
            lambda_a = self.loss_calculator.adaptive_lambda(view.frame)
            loss, upstream = self.loss_calculator.weighted_loss(rendered, view.frame, view.weights, lambda_a)
            frame_grads = self.renderer.backward(rendered, gaussian_map, view.pose, self.intrinsics, upstream)
            total += loss
            for name in grads:
                grads[name] += getattr(frame_grads, name)

        opacities = gaussian_map.opacities
        return total, {
            "means": grads["means"],
            "log_scales": grads["scales"] * gaussian_map.scales,
            "rotations": grads["rotations"],
            "opacity_logits": grads["opacities"] * opacities * (1.0 - opacities),
            "colors": grads["colors"],
        }

    def _optimize(self, gaussian_map: GaussianMap, iterations: int, view_sampler) -> Dict[str, float]:
        params = self._to_params(gaussian_map)
        adam = AdamState(self.learning_rates)
        history: List[float] = []
        rising, diverged = 0, False
        for _ in range(iterations):
            loss, grads = self._loss_and_grads(gaussian_map, view_sampler())
            if not np.isfinite(loss):
                raise ProcessingError("Non-finite mapping loss", "NumericsError")
            if history and loss > history[-1]:
                rising += 1
                if rising >= self.divergence_patience:
                    diverged = True
                    logger.warning("Mapping loss rose for %d consecutive iterations; stopping", rising)
                    break
            else:
                rising = 0
            history.append(loss)
            adam.update(params, grads)
            self._write_params(gaussian_map, params)
        return {"iterations": len(history), "diverged": diverged,
                "initial_loss": history[0] if history else 0.0,
                "final_loss": history[-1] if history else 0.0}

    def initial_mapping(self, gaussian_map: GaussianMap, first_frame: FrameObservation, pose: CameraPose,
                        iterations: Optional[int] = None) -> GaussianMap:
        """Fits every primitive parameter to the first frame without dynamic exclusion."""
        iterations = self.initial_iterations if iterations is None else iterations
        if iterations <= 0:
            self.last_report = {"iterations": 0, "diverged": False}
            return gaussian_map
        view = MappingView(first_frame, pose, np.ones(first_frame.shape))
        report = self._optimize(gaussian_map, iterations, lambda: [view])
        rendered = self.renderer.render(gaussian_map, pose, self.intrinsics)
        report["psnr"] = self.evaluator.psnr(rendered.color, first_frame.rgb, np.ones(first_frame.shape, bool))
        self.last_report = report
        logger.info("Initial mapping: %d iterations, loss %.4f -> %.4f, PSNR %.2f dB",
                    report["iterations"], report["initial_loss"], report["final_loss"], report["psnr"])
        return gaussian_map

    def _view_for(self, entry: KeyframeEntry, dynamic_ids: Set[int]) -> MappingView:
        weights = self.loss_calculator.mapping_weights(entry.frame, dynamic_ids)
        if entry.dynamic_mask is not None:
            weights = np.where(entry.dynamic_mask, 0.0, weights)
        return MappingView(entry.frame, entry.pose, weights)

    def densify(self, gaussian_map: GaussianMap, entry: KeyframeEntry, dynamic_ids: Set[int]) -> int:
        """Back-projects uncovered non-dynamic pixels of a keyframe at the fine stride."""
        rendered = self.renderer.render(gaussian_map, entry.pose, self.intrinsics)
        candidates = rendered.alpha < self.densify_alpha
        if dynamic_ids:
            candidates &= ~np.isin(entry.frame.mask, sorted(dynamic_ids))
        if entry.dynamic_mask is not None:
            candidates &= ~entry.dynamic_mask
        if not candidates.any():
            return 0
        try:
            cloud = self.initializer.back_project(entry.frame, self.intrinsics, entry.pose,
                                                  stride=self.fine_stride, pixel_filter=candidates)
        except ProcessingError as exc:
            if exc.error_type != "EmptyCloudError":
                raise
            return 0
        gaussian_map.extend(self.initializer.init_gaussians(cloud, entry.pose, gaussian_map.generation))
        return len(cloud)

    def map_update(self, gaussian_map: GaussianMap, window: KeyframeWindow,
                   registry: DynamicObjectRegistry, iterations: Optional[int] = None) -> GaussianMap:
        """Prunes dynamic primitives, densifies the newest keyframe, then optimises over the window."""
        if len(window) == 0:
            raise ProcessingError("map_update needs at least one keyframe", "InputError")
        iterations = self.iterations if iterations is None else iterations
        dynamic_ids = set(registry.dynamic_set)

        pruned = gaussian_map.remove(DynamicFilter.prune_set(registry, gaussian_map))
        inserted = self.densify(gaussian_map, window.newest, dynamic_ids)

        report = {"iterations": 0, "diverged": False}
        if len(gaussian_map) and iterations > 0:
            report = self._optimize(gaussian_map, iterations,
                                    lambda: [self._view_for(e, dynamic_ids) for e in self.sample_window(window)])

        faded = gaussian_map.remove(np.nonzero(gaussian_map.opacities < self.min_opacity)[0])
        report.update({"pruned_dynamic": pruned, "densified": inserted, "pruned_opacity": faded,
                       "size": len(gaussian_map)})
        self.last_report = report
        logger.debug("Map update: -%d dynamic, +%d new, -%d faded, %d primitives",
                     pruned, inserted, faded, len(gaussian_map))
        return gaussian_map
