import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from causal_transfer.env import Rollout
from causal_transfer.expert import Trajectory
from causal_transfer.policy import (BasisPolicySet, BehaviorCloning, PolicyGradientConfig,
                                    TabularSoftmaxPolicy, behavior_clone, flatten_batch,
                                    mixture_policy, policy_gradient_update, surrogate_gradient,
                                    surrogate_objective)


@pytest.mark.parametrize("logits, p0", [
    ([0.0, 0.0], 0.5),
    ([np.log(2.0), 0.0], 2.0 / 3.0),
])
def test_action_prob(logits, p0):
    assert TabularSoftmaxPolicy([logits]).action_prob(0, 0) == pytest.approx(p0, abs=1e-15)


def test_saturated_logits():
    assert TabularSoftmaxPolicy([[10.0, -10.0]]).action_prob(0, 0) > 0.9999


@settings(max_examples=100)
@given(arrays(np.float64, (3, 4), elements=st.floats(-60, 60)))
def test_rows_normalised(logits):
    p = TabularSoftmaxPolicy(logits).action_probs()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)


@pytest.mark.parametrize("logits, n, lo, hi", [
    ([[0.0, 0.0]], 10_000, 0.48, 0.52),
    ([[np.log(2.0), 0.0]], 100_000, 0.66, 0.674),
    ([[50.0, -50.0]], 1_000, 1.0, 1.0),
])
def test_sample_frequencies(logits, n, lo, hi, rng):
    pol = TabularSoftmaxPolicy(logits)
    freq = np.mean([pol.sample_action(0, rng) == 0 for _ in range(n)])
    assert lo <= freq <= hi


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        TabularSoftmaxPolicy([[np.inf, 0.0]])


def test_json_roundtrip():
    pol = TabularSoftmaxPolicy(np.random.default_rng(0).normal(size=(4, 3)))
    assert TabularSoftmaxPolicy.from_json(pol.to_json()) == pol


def _traj(pairs):
    s, a = zip(*pairs)
    return Trajectory(list(s), list(a), 0.0)


@pytest.mark.parametrize("pairs, smoothing, expected", [
    ([(0, 1)] * 5, 0.0, [0.0, 1.0]),
    ([(0, 0), (0, 1)], 0.0, [0.5, 0.5]),
    ([(0, 0), (0, 0), (0, 0), (0, 1)], 1.0, [4 / 6, 2 / 6]),
])
def test_behavior_clone_counts(pairs, smoothing, expected):
    pol = behavior_clone([_traj(pairs)], 1, 2, smoothing)
    np.testing.assert_allclose(pol.probs(0), expected, atol=1e-12)


def test_unvisited_states_uniform():
    pol = behavior_clone([_traj([(0, 1)])], 3, 2)
    np.testing.assert_allclose(pol.probs(2), [0.5, 0.5])


def test_behavior_cloning_estimator():
    bc = BehaviorCloning(2, 3, smoothing=0.0).fit([_traj([(0, 2), (1, 1)])])
    assert bc.predict([0, 1]).tolist() == [2, 1]
    assert bc.get_params() == {"n_states": 2, "n_actions": 3, "smoothing": 0.0}


@pytest.mark.parametrize("weights, expected", [
    ([0.5, 0.5], [0.5, 0.5]),
    ([1.0, 0.0], [1.0, 0.0]),
    ([0.7, 0.3], [0.7, 0.3]),
])
def test_mixture_of_deterministic_basis(weights, expected, action_basis):
    np.testing.assert_allclose(mixture_policy(action_basis, weights).probs(0), expected,
                               atol=1e-12)


@pytest.mark.parametrize("weights", [[0.5, 0.6], [1.0], [-0.5, 1.5]])
def test_mixture_bad_weights(weights, action_basis):
    with pytest.raises(ValueError):
        mixture_policy(action_basis, weights)


def test_basis_set_roundtrip(action_basis):
    back = BasisPolicySet.from_dict(action_basis.to_dict())
    assert all(a == b for a, b in zip(back, action_basis))


def _episode(state, action, ret, prob):
    return Rollout(np.array([state]), np.array([action]), np.array([ret]), np.array([prob]), ret)


def _two_arm_batch():
    return [_episode(0, 1, 1.0, 0.5), _episode(0, 0, 0.0, 0.5)]


def test_zero_learning_rate_is_noop():
    pol = TabularSoftmaxPolicy.uniform(1, 2)
    out = policy_gradient_update(pol, _two_arm_batch(), PolicyGradientConfig(learning_rate=0.0))
    assert out == pol


def test_better_action_gains_probability():
    pol = TabularSoftmaxPolicy.uniform(1, 2)
    out = policy_gradient_update(pol, _two_arm_batch(), PolicyGradientConfig())
    assert out.probs(0)[1] > pol.probs(0)[1]


def test_update_respects_trust_region():
    cfg = PolicyGradientConfig(learning_rate=100.0, clip_ratio=0.2)
    pol = TabularSoftmaxPolicy.uniform(1, 2)
    out = policy_gradient_update(pol, _two_arm_batch(), cfg)
    ratio = out.probs(0) / pol.probs(0)
    assert np.all(ratio <= 1.2 + 1e-12) and np.all(ratio >= 0.8 - 1e-12)


def test_update_shrinks_with_clip_ratio():
    pol = TabularSoftmaxPolicy.uniform(1, 2)
    steps = []
    for eps in [0.3, 0.1, 0.01, 1e-4, 1e-8]:
        out = policy_gradient_update(pol, _two_arm_batch(),
                                     PolicyGradientConfig(learning_rate=10.0, clip_ratio=eps))
        steps.append(np.abs(out.logits - pol.logits).max())
    assert all(a >= b for a, b in zip(steps, steps[1:]))
    assert steps[-1] < 1e-7


def test_mean_return_baseline_uses_given_value():
    _, _, _, adv = flatten_batch(_two_arm_batch(), "mean-return", baseline_value=0.25)
    np.testing.assert_allclose(adv, [0.75, -0.25])
    _, _, _, adv = flatten_batch(_two_arm_batch(), "mean-return")
    np.testing.assert_allclose(adv, [0.5, -0.5])
    _, _, _, adv = flatten_batch(_two_arm_batch(), "none")
    np.testing.assert_allclose(adv, [1.0, 0.0])


def test_overflowing_ratios_warn():
    logits = np.array([[200.0, 0.0]])
    with pytest.warns(RuntimeWarning):
        surrogate_objective(logits, np.array([0]), np.array([0]), np.array([1e-30]),
                            np.array([1.0]), 0.2)


def random_instance(seed, n_states=3, n_actions=3, n_steps=12):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n_states, n_actions))
    states = rng.integers(0, n_states, n_steps)
    actions = rng.integers(0, n_actions, n_steps)
    old = rng.uniform(0.05, 0.95, n_steps)
    adv = rng.normal(size=n_steps)
    return logits, states, actions, old, adv


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("entropy", [0.0, 0.05])
def test_surrogate_gradient_matches_finite_differences(seed, entropy):
    logits, s, a, old, adv = random_instance(seed)
    f = lambda th: surrogate_objective(th, s, a, old, adv, 0.2, entropy)  # noqa: E731
    g = surrogate_gradient(logits, s, a, old, adv, 0.2, entropy)
    assert relative_error(g, central_difference(f, logits)) <= 1e-5


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": -1.0}, {"clip_ratio": 0.0}, {"clip_ratio": 1.0},
    {"epochs_per_episode": 0}, {"baseline": "critic"},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PolicyGradientConfig(**kwargs)
