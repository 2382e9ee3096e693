import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from src.components.dynamic_filter import DynamicFilter
from src.models.data_models import (
    DynamicObjectRegistry, GaussianMap, GmmModel, LossFlowRecord, ObjectState, ProcessingError
)

D, S = ObjectState.DYNAMIC, ObjectState.STATIC


def _static_flow(object_id, rng, length=40):
    values = 1.0 - 0.01 * np.arange(length) + rng.normal(0.0, 1e-3, length)
    return LossFlowRecord(object_id, values.tolist())


def _dynamic_flow(object_id, length=40):
    return LossFlowRecord(object_id, [1.0 + 0.3 * (i % 2) for i in range(length)])


def test_features_are_mean_and_std_of_deltas():
    features = DynamicFilter.extract_features(LossFlowRecord(1, [3.0, 2.0, 2.0, 0.0]))
    np.testing.assert_allclose(features, [-1.0, np.std([-1.0, 0.0, -2.0])])
    with pytest.raises(ProcessingError):
        DynamicFilter.extract_features(LossFlowRecord(1, [1.0]))


def test_unimodal_features_collapse_to_one_component():
    features = np.random.default_rng(0).normal(size=(200, 2))
    model = DynamicFilter().fit_gmm(features)
    assert model.component_count == 1
    assert DynamicFilter.dynamic_probability(model, features[0]) == 0.0


def test_separated_clusters_keep_two_components():
    rng = np.random.default_rng(1)
    static = rng.normal([-0.01, 0.002], 1e-4, (20, 2))
    moving = rng.normal([0.0, 0.3], 1e-3, (5, 2))
    model = DynamicFilter().fit_gmm(np.concatenate([static, moving]))

    assert model.component_count == 2 and model.aic < 0
    assert DynamicFilter.dynamic_probability(model, moving[0]) > 0.999
    assert DynamicFilter.dynamic_probability(model, static[0]) < 1e-3


def test_posterior_agrees_with_the_fitted_estimator():
    rng = np.random.default_rng(2)
    samples = np.concatenate([rng.normal([0, 0], 0.01, (15, 2)), rng.normal([1, 1], 0.01, (10, 2))])
    model = DynamicFilter().fit_gmm(samples)
    standardized = (samples - model.feature_mean) / model.feature_scale
    expected = 1.0 - model.estimator.predict_proba(standardized)[:, model.static_component]
    actual = [DynamicFilter.dynamic_probability(model, s) for s in samples]
    np.testing.assert_allclose(actual, expected, atol=1e-9)


def test_analyze_flows_flags_the_oscillating_object():
    rng = np.random.default_rng(3)
    flows = [_static_flow(0, rng)] + [_static_flow(i, rng) for i in range(1, 9)] + [_dynamic_flow(42)]
    classifications, model = DynamicFilter(min_samples=6).analyze_flows(flows)

    assert model is not None and model.component_count == 2
    assert 0 not in classifications
    assert classifications[42] == D
    assert all(classifications[i] == S for i in range(1, 9))


def test_too_few_samples_keep_everything_static():
    rng = np.random.default_rng(4)
    dynamic_filter = DynamicFilter(min_samples=6)
    classifications, model = dynamic_filter.analyze_flows([_static_flow(0, rng), _dynamic_flow(5)])
    assert model is None and classifications == {5: S}
    assert len(dynamic_filter.history) == 1
    dynamic_filter.reset()
    assert len(dynamic_filter.history) == 0


def _run(stream, streak=3):
    dynamic_filter = DynamicFilter(static_streak=streak)
    registry = DynamicObjectRegistry()
    membership = []
    for label in stream:
        dynamic_filter.update_registry(registry, {7: label})
        membership.append(7 in registry.dynamic_set)
    return registry, membership


def test_object_is_reintroduced_after_consecutive_static_frames():
    registry, membership = _run([D, S, S, S])
    assert membership == [True, True, True, False]
    assert registry.state[7] == S


def test_interrupted_static_streak_resets():
    _, membership = _run([D, S, S, D, S, S, S])
    assert membership == [True, True, True, True, True, True, False]


def test_never_dynamic_objects_stay_out_of_the_set():
    registry, membership = _run([S, S])
    assert membership == [False, False] and registry.state[7] == S


def test_prune_set_selects_dynamic_primitives():
    gaussian_map = GaussianMap(means=np.zeros((5, 3)), object_ids=[0, 3, 3, 5, 1])
    registry = DynamicObjectRegistry(dynamic_set={3, 5})
    assert DynamicFilter.prune_set(registry, gaussian_map).tolist() == [1, 2, 3]
    assert DynamicFilter.prune_set(DynamicObjectRegistry(), gaussian_map).tolist() == []


def _two_cluster_model(static_mean, dynamic_mean):
    return GmmModel(component_count=2, means=np.array([static_mean, dynamic_mean], dtype=float),
                    covariances=np.stack([np.eye(2) * 1e-4] * 2), weights=np.array([0.5, 0.5]),
                    static_component=0, feature_mean=np.zeros(2), feature_scale=np.ones(2))


def test_classify_thresholds_the_dynamic_posterior():
    dynamic_filter = DynamicFilter()
    model = _two_cluster_model([-0.01, 0.0], [0.0, 0.5])
    oscillating = LossFlowRecord(4, [1.0, 1.5, 1.0, 1.5, 1.0])

    assert dynamic_filter.classify(model, oscillating) == D
    assert dynamic_filter.last_probabilities[4] > 0.999
    assert dynamic_filter.classify(None, oscillating) == S
    single = _two_cluster_model([0.0, 0.0], [0.0, 0.0])
    single.component_count = 1
    assert dynamic_filter.classify(single, oscillating) == S


def test_classify_rejects_single_value_flows():
    model = _two_cluster_model([-0.01, 0.0], [0.0, 0.5])
    with pytest.raises(ProcessingError) as excinfo:
        DynamicFilter().classify(model, LossFlowRecord(2, [1.0]))
    assert excinfo.value.error_type == "InputError"


def test_relative_features_are_scaled_by_the_starting_loss():
    record = LossFlowRecord(1, [4.0, 3.0, 3.0, 1.0])
    np.testing.assert_allclose(DynamicFilter().flow_features(record),
                               DynamicFilter.extract_features(record) / 4.0)
    np.testing.assert_allclose(DynamicFilter(relative_flows=False).flow_features(record),
                               DynamicFilter.extract_features(record))
    assert DynamicFilter().relative_decrease(record) == pytest.approx(0.75)


def test_decreasing_object_is_kept_static_despite_the_posterior():
    rng = np.random.default_rng(5)
    decreasing = LossFlowRecord(43, [1.0 - 0.02 * i + 0.3 * (i % 2) for i in range(40)])
    flows = ([_static_flow(0, rng)] + [_static_flow(i, rng) for i in range(1, 9)]
             + [_dynamic_flow(42), decreasing])
    dynamic_filter = DynamicFilter(min_samples=6)
    classifications, _ = dynamic_filter.analyze_flows(flows)

    assert dynamic_filter.last_probabilities[43] > 0.999
    assert classifications[43] == S
    assert classifications[42] == D


def test_background_component_is_the_static_one():
    rng = np.random.default_rng(6)

    def noisy_static(object_id):
        values = 1.0 - 0.01 * np.arange(40) + rng.normal(0.0, 0.02, 40)
        return LossFlowRecord(object_id, values.tolist())

    flat = LossFlowRecord(42, (1.0 + rng.normal(0.0, 1e-4, 40)).tolist())
    flows = [noisy_static(0)] + [noisy_static(i) for i in range(1, 9)] + [flat]
    dynamic_filter = DynamicFilter(min_samples=6)
    classifications, model = dynamic_filter.analyze_flows(flows)

    # the flat flow has the lowest std, yet the background decides which component is static
    assert model.component_count == 2
    assert model.static_component == int(np.argmax(
        DynamicFilter.component_posteriors(model, dynamic_filter.flow_features(flows[0]))))
    assert classifications[42] == D
    assert all(classifications[i] == S for i in range(1, 9))


def _em_log_likelihood(samples, labels, reg_covar=1e-6, iterations=500, tol=1e-12):
    """Plain EM for a full-covariance two-component mixture, started from `labels`."""
    resp = np.stack([labels == 0, labels == 1], axis=1).astype(float)
    previous = -np.inf
    for _ in range(iterations):
        counts = resp.sum(axis=0)
        weights = counts / len(samples)
        means = resp.T @ samples / counts[:, None]
        covariances = []
        for k in range(2):
            centred = samples - means[k]
            covariances.append((resp[:, k, None] * centred).T @ centred / counts[k] + reg_covar * np.eye(2))
        log_joint = np.stack([np.log(weights[k]) + multivariate_normal.logpdf(samples, means[k], covariances[k])
                              for k in range(2)], axis=1)
        log_likelihood = float(np.sum(logsumexp(log_joint, axis=1)))
        resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        if abs(log_likelihood - previous) < tol:
            break
        previous = log_likelihood
    return log_likelihood


@pytest.mark.parametrize("seed", range(10))
def test_mixture_log_likelihood_matches_plain_em(seed):
    rng = np.random.default_rng(seed + 100)
    first = rng.normal([-0.02, 0.001], [1e-3, 1e-4], (25, 2))
    second = rng.normal([0.0, 0.05], [2e-3, 5e-3], (8, 2))
    samples = np.concatenate([first, second])
    labels = np.array([0] * 25 + [1] * 8)

    model = DynamicFilter().fit_gmm(samples)
    standardized = (samples - model.feature_mean) / model.feature_scale
    assert model.component_count == 2
    assert model.log_likelihood == pytest.approx(_em_log_likelihood(standardized, labels), abs=1e-6)


def test_dynamic_flows_separate_from_static_ones():
    c, sigma = 0.005, 0.0005
    flagged = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        flows = [LossFlowRecord(i, (1.0 + np.concatenate([[0.0], np.cumsum(rng.normal(-c, sigma, 39))])).tolist())
                 for i in range(6)]
        flows.append(LossFlowRecord(9, (1.0 + np.concatenate(
            [[0.0], np.cumsum(rng.normal(0.0, 6.0 * sigma, 39))])).tolist()))
        classifications, _ = DynamicFilter(theta=0.999).analyze_flows(flows)
        flagged += classifications[9] == D
        assert all(classifications[i] == S for i in range(1, 6))
    assert flagged >= 95
