"""Tabular softmax policies, behaviour cloning and clipped policy-gradient steps."""
import json
import warnings
from dataclasses import dataclass
from typing import List

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_probability_vector, check_scalar

# log(0) is replaced by this; exp(-50) ~ 2e-22 vanishes next to 1.0 in float64
MIN_LOGIT = -50.0
_MAX_LOG_RATIO = 50.0


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), MIN_LOGIT)


class TabularSoftmaxPolicy:
    """pi(a | s) = softmax(logits[s])[a].

    Parameters
    ----------
    logits : array-like of shape (n_states, n_actions)
    """

    def __init__(self, logits):
        logits = np.array(logits, dtype=float)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
            raise ValueError(f"logits must be a non-empty 2-d array, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        self.logits = logits

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("probs must be 2-d")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("each row of probs must be a probability vector")
        return cls(_safe_log(probs))

    @classmethod
    def deterministic(cls, actions, n_actions):
        """Policy that (numerically) always plays ``actions[s]`` in state ``s``."""
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls.from_probs(probs)

    @property
    def n_states(self):
        return self.logits.shape[0]

    @property
    def n_actions(self):
        return self.logits.shape[1]

    def __repr__(self):
        return f"TabularSoftmaxPolicy(n_states={self.n_states}, n_actions={self.n_actions})"

    def __eq__(self, other):
        return isinstance(other, TabularSoftmaxPolicy) and np.array_equal(self.logits, other.logits)

    def copy(self):
        return TabularSoftmaxPolicy(self.logits.copy())

    def action_probs(self):
        """Full (n_states, n_actions) matrix of action probabilities."""
        return _softmax(self.logits)

    def probs(self, state):
        return _softmax(self.logits[state])

    def action_prob(self, state, action):
        return float(self.probs(state)[action])

    def sample_action(self, state, rng):
        cdf = np.cumsum(self.probs(state))
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return min(a, self.n_actions - 1)

    def to_dict(self):
        return {"n_states": self.n_states, "n_actions": self.n_actions,
                "logits": self.logits.tolist()}

    @classmethod
    def from_dict(cls, d):
        logits = np.asarray(d["logits"], dtype=float)
        if logits.shape != (d["n_states"], d["n_actions"]):
            raise ValueError("logits shape does not match declared dimensions")
        return cls(logits)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass
class BasisPolicySet:
    """K policies sharing state and action dimensions."""

    policies: List[TabularSoftmaxPolicy]

    def __post_init__(self):
        self.policies = list(self.policies)
        if not self.policies:
            raise ValueError("a basis needs at least one policy")
        shape = self.policies[0].logits.shape
        if any(p.logits.shape != shape for p in self.policies):
            raise ValueError("basis policies must share state/action dimensions")

    def __len__(self):
        return len(self.policies)

    def __getitem__(self, k):
        return self.policies[k]

    def __iter__(self):
        return iter(self.policies)

    def copy(self):
        return BasisPolicySet([p.copy() for p in self.policies])

    def to_dict(self):
        return {"policies": [p.to_dict() for p in self.policies]}

    @classmethod
    def from_dict(cls, d):
        return cls([TabularSoftmaxPolicy.from_dict(p) for p in d["policies"]])


# --- behaviour cloning -------------------------------------------------------

def visit_counts(trajectories, n_states, n_actions):
    counts = np.zeros((n_states, n_actions))
    for traj in trajectories:
        np.add.at(counts, (np.asarray(traj.states, dtype=int), np.asarray(traj.actions, dtype=int)), 1.0)
    return counts


def behavior_clone(trajectories, n_states, n_actions, smoothing=0.5):
    """Maximum-likelihood tabular policy with additive (Laplace) smoothing.

    ``pi(a|s) = (n(s,a) + smoothing) / (n(s) + smoothing * n_actions)``;
    states that were never visited get the uniform policy.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("behaviour cloning needs at least one trajectory")
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    counts = visit_counts(trajectories, n_states, n_actions)
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.full((n_states, n_actions), 1.0 / n_actions)
    seen = totals[:, 0] > 0
    probs[seen] = (counts[seen] + smoothing) / (totals[seen] + smoothing * n_actions)
    return TabularSoftmaxPolicy.from_probs(probs)


class BehaviorCloning(BaseEstimator):
    """Estimator wrapper around :func:`behavior_clone`.

    ``fit`` takes a list of trajectories (anything with ``states`` and
    ``actions``); ``predict_proba`` maps state indices to action
    distributions.
    """

    def __init__(self, n_states, n_actions, smoothing=0.5):
        self.n_states = n_states
        self.n_actions = n_actions
        self.smoothing = smoothing

    def fit(self, X, y=None):
        check_scalar(self.smoothing, "smoothing", min_val=0.0)
        self.policy_ = behavior_clone(X, self.n_states, self.n_actions, self.smoothing)
        self.counts_ = visit_counts(X, self.n_states, self.n_actions)
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError("BehaviorCloning is not fitted yet")

    def predict_proba(self, states):
        self._check_fitted()
        return self.policy_.action_probs()[np.asarray(states, dtype=int)]

    def predict(self, states):
        return self.predict_proba(states).argmax(axis=1)


def mixture_policy(basis, weights):
    """Per-state mixture ``sum_k weights[k] * mu_k(.|s)`` returned as logits."""
    policies = list(basis)
    w = check_probability_vector(weights, "weights", atol=1e-9)
    if w.size != len(policies):
        raise ValueError(f"{w.size} weights for {len(policies)} policies")
    probs = sum(wk * p.action_probs() for wk, p in zip(w, policies))
    return TabularSoftmaxPolicy(_safe_log(probs))


# --- clipped policy gradient ---------------------------------------------------

BASELINES = ("none", "mean-return")


@dataclass
class PolicyGradientConfig:
    """Hyper-parameters of the clipped-surrogate improvement step."""

    learning_rate: float = 0.5
    clip_ratio: float = 0.2
    epochs_per_episode: int = 4
    entropy_bonus: float = 0.0
    baseline: str = "mean-return"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0, 1)")
        if int(self.epochs_per_episode) < 1:
            raise ValueError("epochs_per_episode must be >= 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")

    @property
    def max_logit_step(self):
        # |d logit| <= delta per entry keeps |d log pi| <= 2 delta, so the
        # probability ratio stays inside [1 - clip, 1 + clip]
        return 0.5 * min(np.log1p(self.clip_ratio), -np.log1p(-self.clip_ratio))


def flatten_batch(episodes, baseline="mean-return", baseline_value=None):
    """Stack episodes into per-step arrays ``(states, actions, old_probs, advantages)``.

    Every step of an episode shares the episode-level advantage
    ``return - baseline``.  With ``baseline="mean-return"`` the baseline is
    ``baseline_value`` when given, else the mean return of the batch.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("empty episode batch")
    rets = np.array([ep.ret for ep in episodes], dtype=float)
    if baseline == "none":
        b = 0.0
    elif baseline_value is not None:
        b = float(baseline_value)
    else:
        b = float(rets.mean())
    states = np.concatenate([np.asarray(ep.states, dtype=int) for ep in episodes])
    actions = np.concatenate([np.asarray(ep.actions, dtype=int) for ep in episodes])
    old = np.concatenate([np.asarray(ep.probs, dtype=float) for ep in episodes])
    adv = np.concatenate([np.full(len(ep.actions), r - b) for ep, r in zip(episodes, rets)])
    return states, actions, old, adv


def _ratios(logits, states, actions, old_probs):
    logp = _log_softmax(logits[states])[np.arange(states.size), actions]
    log_ratio = logp - np.log(old_probs)
    overflow = np.abs(log_ratio) > _MAX_LOG_RATIO
    if np.any(overflow):
        warnings.warn(f"{int(overflow.sum())} probability ratios overflowed and were clamped",
                      RuntimeWarning, stacklevel=3)
        log_ratio = np.clip(log_ratio, -_MAX_LOG_RATIO, _MAX_LOG_RATIO)
    return np.exp(log_ratio)


def surrogate_objective(logits, states, actions, old_probs, advantages, clip_ratio,
                        entropy_bonus=0.0):
    """Mean clipped surrogate ``min(r A, clip(r, 1-eps, 1+eps) A)`` plus entropy bonus."""
    ratio = _ratios(logits, states, actions, old_probs)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    obj = np.minimum(ratio * advantages, clipped * advantages).mean()
    if entropy_bonus:
        p = _softmax(logits[states])
        ent = -(p * _log_softmax(logits[states])).sum(axis=1)
        obj += entropy_bonus * ent.mean()
    return float(obj)


def surrogate_gradient(logits, states, actions, old_probs, advantages, clip_ratio,
                       entropy_bonus=0.0):
    """Analytic gradient of :func:`surrogate_objective` w.r.t. ``logits``."""
    n = states.size
    ratio = _ratios(logits, states, actions, old_probs)
    p = _softmax(logits[states])
    # the unclipped branch is active unless the ratio left the trust region
    # in the direction the advantage pushes it
    active = ~(((advantages > 0) & (ratio > 1.0 + clip_ratio))
               | ((advantages < 0) & (ratio < 1.0 - clip_ratio)))
    onehot = np.zeros_like(p)
    onehot[np.arange(n), actions] = 1.0
    per_sample = (active * ratio * advantages)[:, None] * (onehot - p)
    if entropy_bonus:
        logp = _log_softmax(logits[states])
        ent = -(p * logp).sum(axis=1, keepdims=True)
        per_sample = per_sample - entropy_bonus * p * (logp + ent)
    grad = np.zeros_like(logits)
    np.add.at(grad, states, per_sample / n)
    return grad


def policy_gradient_update(policy, episodes, config, baseline_value=None):
    """Clipped-surrogate ascent on the logits; returns an updated copy.

    Runs ``config.epochs_per_episode`` full-batch gradient steps.  After each
    step the total logit change since collection time is clamped to
    ``config.max_logit_step`` per entry, so the new/old probability ratio of
    every action stays within ``[1 - clip_ratio, 1 + clip_ratio]``.
    """
    states, actions, old, adv = flatten_batch(episodes, config.baseline, baseline_value)
    theta_old = policy.logits
    theta = theta_old.copy()
    delta = config.max_logit_step
    for _ in range(int(config.epochs_per_episode)):
        g = surrogate_gradient(theta, states, actions, old, adv, config.clip_ratio,
                               config.entropy_bonus)
        theta = theta_old + np.clip(theta + config.learning_rate * g - theta_old, -delta, delta)
    return TabularSoftmaxPolicy(theta)
