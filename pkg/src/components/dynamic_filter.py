import logging
import warnings
from collections import deque
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from src.models.data_models import (
    BACKGROUND_ID, DynamicObjectRegistry, GaussianMap, GmmModel, LossFlowRecord,
    ObjectState, ProcessingError
)

logger = logging.getLogger(__name__)


class DynamicFilter:
    """Classifies objects as dynamic from their coarse-tracking loss flows.

    Each entity (background + every observed object) contributes the feature
    (mean ΔL, std ΔL). With `relative_flows` the deltas are divided by the
    entity's loss at the first coarse iteration, so textured and flat objects
    land on one scale. Features of the last `history_frames` frames are pooled
    with the current ones so the mixture has enough samples to fit.
    """

    def __init__(self, theta: float = 0.999, static_streak: int = 3, seed: int = 7,
                 max_iter: int = 100, tol: float = 1e-6, reg_covar: float = 1e-6,
                 history_frames: int = 10, min_samples: int = 6, relative_flows: bool = True,
                 decrease_ratio: float = 0.5, loss_floor: float = 1e-6):
        if not 0.0 < theta < 1.0:
            raise ProcessingError(f"theta={theta} must lie in (0, 1)", "ConfigError")
        self.theta = theta
        self.static_streak = static_streak
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol
        self.reg_covar = reg_covar
        self.min_samples = min_samples
        self.relative_flows = relative_flows
        self.decrease_ratio = decrease_ratio
        self.loss_floor = loss_floor
        self.history = deque(maxlen=max(0, history_frames))
        self.last_model: Optional[GmmModel] = None
        self.last_probabilities: Dict[int, float] = {}

    @staticmethod
    def extract_features(record: LossFlowRecord) -> np.ndarray:
        if len(record.values) < 2:
            raise ProcessingError(f"Loss flow of object {record.object_id} needs at least 2 values", "InputError")
        deltas = record.deltas
        features = np.array([np.mean(deltas), np.std(deltas)])
        if not np.all(np.isfinite(features)):
            raise ProcessingError(f"Non-finite loss flow for object {record.object_id}", "NumericsError")
        return features

    def flow_features(self, record: LossFlowRecord) -> np.ndarray:
        """The features the mixture sees: raw, or relative to the flow's starting loss."""
        features = self.extract_features(record)
        if self.relative_flows:
            features = features / max(abs(record.values[0]), self.loss_floor)
        return features

    def relative_decrease(self, record: LossFlowRecord) -> float:
        """Fraction of the starting loss removed by the end of the flow."""
        start = record.values[0]
        return float((start - record.values[-1]) / max(abs(start), self.loss_floor))

    def fit_gmm(self, features: np.ndarray) -> GmmModel:
        """Two-component mixture on standardized features, or one component when AIC > 0."""
        samples = np.asarray(features, dtype=np.float64).reshape(-1, 2)
        if len(samples) < 2:
            raise ProcessingError("GMM fitting needs at least 2 feature vectors", "InputError")

        feature_mean = samples.mean(axis=0)
        feature_scale = samples.std(axis=0)
        feature_scale[feature_scale < 1e-12] = 1.0
        standardized = (samples - feature_mean) / feature_scale

        aic = None
        distinct = len(np.unique(np.round(standardized, 9), axis=0))
        if distinct < 2:
            estimator = self._fit_mixture(standardized, 1)
        else:
            estimator = self._fit_mixture(standardized, 2)
            aic = float(estimator.aic(standardized))
            if aic > 0:
                logger.debug("AIC %.3f > 0, falling back to a single component", aic)
                estimator = self._fit_mixture(standardized, 1)

        static_component = int(np.argmin(estimator.means_[:, 1]))
        return GmmModel(
            component_count=int(estimator.n_components),
            means=estimator.means_.copy(),
            covariances=estimator.covariances_.copy(),
            weights=estimator.weights_.copy(),
            static_component=static_component,
            feature_mean=feature_mean,
            feature_scale=feature_scale,
            aic=aic,
            converged=bool(estimator.converged_),
            log_likelihood=float(estimator.score(standardized) * len(standardized)),
            estimator=estimator,
        )

    def _fit_mixture(self, samples: np.ndarray, components: int) -> GaussianMixture:
        estimator = GaussianMixture(n_components=components, covariance_type="full", max_iter=self.max_iter,
                                    tol=self.tol, reg_covar=self.reg_covar, init_params="k-means++",
                                    random_state=self.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            estimator.fit(samples)
        if not estimator.converged_:
            logger.warning("EM did not converge within %d iterations (%d components)", self.max_iter, components)
        return estimator

    @staticmethod
    def component_posteriors(model: GmmModel, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - model.feature_mean) / model.feature_scale
        log_joint = np.array([
            np.log(model.weights[k]) + multivariate_normal.logpdf(z, model.means[k], model.covariances[k])
            for k in range(model.component_count)
        ])
        return np.exp(log_joint - logsumexp(log_joint))

    @classmethod
    def dynamic_probability(cls, model: GmmModel, features: np.ndarray) -> float:
        if model.component_count < 2:
            return 0.0
        return float(1.0 - cls.component_posteriors(model, features)[model.static_component])

    def classify(self, model: Optional[GmmModel], record: LossFlowRecord,
                 theta: Optional[float] = None) -> ObjectState:
        """Dynamic iff the posterior of the non-static component exceeds `theta`."""
        theta = self.theta if theta is None else theta
        features = self.flow_features(record)
        if model is None or model.component_count < 2:
            return ObjectState.STATIC
        probability = self.dynamic_probability(model, features)
        self.last_probabilities[record.object_id] = probability
        return ObjectState.DYNAMIC if probability > theta else ObjectState.STATIC

    def anchor_static_component(self, model: GmmModel, background: LossFlowRecord) -> GmmModel:
        """Makes the component that explains the background flow the static one."""
        if model.component_count < 2:
            return model
        component = int(np.argmax(self.component_posteriors(model, self.flow_features(background))))
        if component != model.static_component:
            logger.debug("Static component %d -> %d to match the background flow",
                         model.static_component, component)
            model.static_component = component
        return model

    def decrease_guard(self, classifications: Dict[int, ObjectState], flows: List[LossFlowRecord],
                       background: LossFlowRecord) -> Dict[int, ObjectState]:
        """Keeps static every flagged object whose loss fell like the background's.

        An object stays dynamic only when its relative decrease is below
        `decrease_ratio` times the background's.
        """
        reference = self.decrease_ratio * self.relative_decrease(background)
        guarded = dict(classifications)
        for record in flows:
            if guarded.get(record.object_id) != ObjectState.DYNAMIC:
                continue
            decrease = self.relative_decrease(record)
            if decrease >= reference:
                logger.debug("Object %d: loss fell by %.3f against %.3f for the background; kept static",
                             record.object_id, decrease, reference / self.decrease_ratio)
                guarded[record.object_id] = ObjectState.STATIC
        return guarded

    def analyze_flows(self, flows: List[LossFlowRecord]) -> Tuple[Dict[int, ObjectState], Optional[GmmModel]]:
        """Classifies every non-background flow of one frame."""
        self.last_probabilities = {}
        if not flows:
            return {}, None
        current = np.array([self.flow_features(record) for record in flows])
        pooled = np.concatenate(list(self.history) + [current]) if self.history else current
        self.history.append(current)

        objects = [record for record in flows if record.object_id != BACKGROUND_ID]
        if len(pooled) < max(2, self.min_samples):
            logger.debug("Only %d loss-flow samples; every object kept static", len(pooled))
            self.last_model = None
            return {record.object_id: ObjectState.STATIC for record in objects}, None

        model = self.fit_gmm(pooled)
        background = next((record for record in flows if record.object_id == BACKGROUND_ID), None)
        if background is not None:
            model = self.anchor_static_component(model, background)
        self.last_model = model
        classifications = {record.object_id: self.classify(model, record) for record in objects}
        if background is not None:
            classifications = self.decrease_guard(classifications, objects, background)
        return classifications, model

    def update_registry(self, registry: DynamicObjectRegistry,
                        classifications: Dict[int, ObjectState]) -> DynamicObjectRegistry:
        for object_id, label in sorted(classifications.items()):
            if label == ObjectState.DYNAMIC:
                if object_id not in registry.dynamic_set:
                    logger.info("Object %d marked dynamic", object_id)
                registry.state[object_id] = ObjectState.DYNAMIC
                registry.static_streak[object_id] = 0
                registry.dynamic_set.add(object_id)
                continue

            streak = registry.static_streak.get(object_id, 0) + 1
            registry.static_streak[object_id] = streak
            if registry.state.get(object_id) == ObjectState.DYNAMIC:
                if streak >= self.static_streak:
                    logger.info("Object %d reintroduced after %d static frames", object_id, streak)
                    registry.state[object_id] = ObjectState.STATIC
                    registry.dynamic_set.discard(object_id)
            else:
                registry.state[object_id] = ObjectState.STATIC
        return registry

    @staticmethod
    def prune_set(registry: DynamicObjectRegistry, gaussian_map: GaussianMap) -> np.ndarray:
        if not registry.dynamic_set:
            return np.zeros(0, dtype=np.int64)
        return np.nonzero(np.isin(gaussian_map.object_ids, sorted(registry.dynamic_set)))[0]

    def reset(self) -> None:
        self.history.clear()
        self.last_model = None
        self.last_probabilities = {}
