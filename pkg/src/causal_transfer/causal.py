"""Observational statistics, interventional bounds and a do-value oracle.

From labelled expert data ``{(m_i, V_i)}`` we get ``P(mu_k)`` and
``E[V | mu_k]``.  Because the expert's choice of ``mu_k`` depends on the
hidden context, ``E[V | mu_k]`` is not the value of running ``mu_k``.  It
does bound it: the trajectories where the expert used ``mu_k`` contribute
their observed mean, and the counterfactual mass ``1 - P(mu_k)`` can only
contribute something inside the return support ``[v_lo, v_hi]``::

    l_k = E[V | mu_k] P(mu_k) + (1 - P(mu_k)) v_lo
    h_k = E[V | mu_k] P(mu_k) + (1 - P(mu_k)) v_hi         ("natural")

If the expert's own choice is never worse in expectation than switching to
another mode, the counterfactual mass is at most what the other modes
actually earned, which gives the tighter, arm-independent upper bound::

    h_k = sum_j E[V | mu_j] P(mu_j)                         ("expert-optimal")
"""
import csv
import warnings
from fractions import Fraction
from dataclasses import dataclass, field
from typing import List

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._rng import check_random_state
from .cluster import LabeledDataset
from .env import ConfoundedBanditEnv, policy_value, rollout

RULES = ("natural", "expert-optimal")


def _rational(a, max_denominator=10**12):
    """Nearest small-denominator fractions, elementwise (object array).

    Declared bandit quantities such as ``0.9`` or ``3.7`` are decimals; doing
    the enumeration in rationals makes ``0.5 * 0.9 * 11 + ...`` come out as
    exactly ``10`` instead of ``9.999999999999998``.
    """
    a = np.asarray(a, dtype=float)
    out = np.empty(a.shape, dtype=object)
    for idx, x in np.ndenumerate(a):
        out[idx] = Fraction(x).limit_denominator(max_denominator)
    return out


def _to_float(a):
    return np.array(a, dtype=object).astype(float)


class ZeroCountWarning(UserWarning):
    """An arm has no trajectories; its bound falls back to the full support."""


@dataclass
class ObservationalStats:
    """P(mu_k), E[V | mu_k] and counts per arm (``mean_v`` is NaN at zero count)."""

    p_mu: np.ndarray
    mean_v: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.p_mu = np.asarray(self.p_mu, dtype=float)
        self.mean_v = np.asarray(self.mean_v, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if not (self.p_mu.shape == self.mean_v.shape == self.counts.shape):
            raise ValueError("p_mu, mean_v and counts must have equal length")
        if abs(self.p_mu.sum() - 1.0) > 1e-9:
            raise ValueError("p_mu must sum to 1")
        if not np.all(np.isfinite(self.mean_v[self.p_mu > 0])):
            raise ValueError("mean_v must be finite for arms with positive mass")

    @property
    def n_arms(self):
        return self.p_mu.size

    @property
    def empty_arms(self):
        return np.flatnonzero(self.p_mu == 0)


@dataclass(frozen=True)
class ValueSupport:
    v_lo: float
    v_hi: float

    def __post_init__(self):
        if not self.v_lo <= self.v_hi:
            raise ValueError(f"v_lo={self.v_lo} exceeds v_hi={self.v_hi}")


@dataclass
class CausalBounds:
    """Per-arm interval ``[lower[k], upper[k]]`` on E[V | do(mu_k)]."""

    lower: np.ndarray
    upper: np.ndarray
    rule: str
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower and upper must be 1-d and of equal length")
        if np.any(self.lower > self.upper + 1e-12):
            raise ValueError("lower bound exceeds upper bound")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}")

    def __len__(self):
        return self.lower.size

    def contains(self, values, atol=1e-9):
        values = np.asarray(values, dtype=float)
        return (self.lower - atol <= values) & (values <= self.upper + atol)


def empirical_stats(labeled):
    """Plug-in P(mu_k) and E[V | mu_k] from a :class:`LabeledDataset`."""
    K = labeled.n_clusters
    labels, returns = labeled.labels, labeled.returns
    counts = np.bincount(labels, minlength=K).astype(float)
    sums = np.bincount(labels, weights=returns, minlength=K)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_v = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return ObservationalStats(counts / counts.sum(), mean_v, counts)


def hoeffding_radius(counts, support, delta):
    """Two-sided Hoeffding half-width for a mean of ``counts`` bounded samples."""
    width = support.v_hi - support.v_lo
    with np.errstate(divide="ignore"):
        return width * np.sqrt(np.log(2.0 / delta) / (2.0 * np.asarray(counts, dtype=float)))


def _observed_mass(stats, support, widen_delta):
    """E[V | mu_k] P(mu_k) with zero-count arms mapped to 0 (they carry no mass)."""
    mean = stats.mean_v.copy()
    lo_mean = hi_mean = mean
    if widen_delta is not None:
        r = hoeffding_radius(stats.counts, support, widen_delta)
        lo_mean = np.maximum(mean - r, support.v_lo)
        hi_mean = np.minimum(mean + r, support.v_hi)
    p = stats.p_mu
    lo = np.where(p > 0, np.nan_to_num(lo_mean) * p, 0.0)
    hi = np.where(p > 0, np.nan_to_num(hi_mean) * p, 0.0)
    return lo, hi


def _zero_count_notes(stats, support):
    notes = []
    for k in stats.empty_arms:
        msg = f"arm {k} has no trajectories; bound is the full support [{support.v_lo}, {support.v_hi}]"
        warnings.warn(msg, ZeroCountWarning, stacklevel=3)
        notes.append(msg)
    return notes


def natural_bounds(stats, support, widen_delta=None):
    """Bounds using only the return support for the counterfactual mass.

    ``widen_delta`` (optional) replaces each ``E[V | mu_k]`` with its
    Hoeffding confidence limits before plugging in.
    """
    obs_lo, obs_hi = _observed_mass(stats, support, widen_delta)
    rest = 1.0 - stats.p_mu
    lower = obs_lo + rest * support.v_lo
    upper = obs_hi + rest * support.v_hi
    return CausalBounds(lower, upper, "natural", _zero_count_notes(stats, support))


def expert_optimal_bounds(stats, support, widen_delta=None):
    """Natural lower bound with the common upper bound ``sum_j E[V|mu_j] P(mu_j)``.

    Valid only when the expert's chosen mode is, in expectation, at least as
    good as any alternative under the same circumstances (see
    :func:`check_expert_optimality`); this cannot be tested from
    observational data.
    """
    obs_lo, obs_hi = _observed_mass(stats, support, widen_delta)
    lower = obs_lo + (1.0 - stats.p_mu) * support.v_lo
    upper = np.full(stats.n_arms, obs_hi.sum())
    # an arm with no data keeps the vacuous interval
    empty = stats.p_mu == 0
    lower[empty] = support.v_lo
    upper[empty] = support.v_hi
    return CausalBounds(lower, upper, "expert-optimal", _zero_count_notes(stats, support))


def causal_bounds(stats, support, rule="expert-optimal", widen_delta=None):
    if rule == "natural":
        return natural_bounds(stats, support, widen_delta)
    if rule == "expert-optimal":
        return expert_optimal_bounds(stats, support, widen_delta)
    raise ValueError(f"unknown bound rule {rule!r}")


class CausalBoundEstimator(BaseEstimator):
    """Fit ``(labels, returns)`` and expose ``lower_``, ``upper_`` and ``stats_``.

    Parameters
    ----------
    v_lo, v_hi : float
        Support of the episode return.
    rule : {"expert-optimal", "natural"}
    n_clusters : int, optional
        Number of arms; inferred from the labels when omitted.
    widen_delta : float, optional
        Hoeffding widening level; ``None`` plugs in the sample means.
    """

    def __init__(self, v_lo, v_hi, rule="expert-optimal", n_clusters=None, widen_delta=None):
        self.v_lo = v_lo
        self.v_hi = v_hi
        self.rule = rule
        self.n_clusters = n_clusters
        self.widen_delta = widen_delta

    def fit(self, labels, returns):
        labels = np.asarray(labels)
        K = self.n_clusters if self.n_clusters is not None else int(labels.max()) + 1
        self.stats_ = empirical_stats(LabeledDataset(labels, returns, K))
        self.bounds_ = causal_bounds(self.stats_, ValueSupport(self.v_lo, self.v_hi), self.rule,
                                     self.widen_delta)
        self.lower_ = self.bounds_.lower
        self.upper_ = self.bounds_.upper
        return self

    def transform(self, values):
        """Clip candidate values into the fitted intervals."""
        if not hasattr(self, "bounds_"):
            raise NotFittedError("CausalBoundEstimator is not fitted yet")
        return np.clip(np.asarray(values, dtype=float), self.lower_, self.upper_)


# --- oracle side --------------------------------------------------------------

def exact_do_value(env, policy, context_probs=None, size_cap=10_000_000, n_episodes=10_000,
                   random_state=0, return_stderr=False):
    """E_U[value of ``policy`` under context U], i.e. E[V | do(policy)].

    Computed by exact backward induction per context when
    ``n_states * n_actions * horizon <= size_cap``; otherwise estimated from
    ``n_episodes`` Monte-Carlo rollouts.  With ``return_stderr=True`` a
    ``(value, stderr)`` pair is returned (stderr is 0 for the exact path).
    """
    probs = env.context_dist.probs if context_probs is None else np.asarray(context_probs, float)
    if env.n_states * env.n_actions * env.horizon <= size_cap:
        if isinstance(env, ConfoundedBanditEnv):
            P = policy if isinstance(policy, np.ndarray) else policy.action_probs()
            value = float(_rational(probs) @ (_rational(env.reward_table) @ _rational(P[0])))
        else:
            per_ctx = np.array([policy_value(env, policy, u) for u in range(env.n_contexts)])
            value = float(probs @ per_ctx)
        return (value, 0.0) if return_stderr else value
    rng = check_random_state(random_state)
    run_env = env if context_probs is None else env.with_context_probs(probs)
    rets = np.array([rollout(run_env, policy, rng).ret for _ in range(int(n_episodes))])
    value = float(rets.mean())
    se = float(rets.std(ddof=1) / np.sqrt(rets.size)) if rets.size > 1 else float("inf")
    return (value, se) if return_stderr else value


def context_values(env, basis, exact=False):
    """``values[u, k]``: exact value of basis policy ``k`` under context ``u``.

    With ``exact=True`` (bandits only) the entries are :class:`Fraction`.
    """
    if isinstance(env, ConfoundedBanditEnv):
        R = _rational(env.reward_table)
        vals = np.array([[R[u] @ _rational(mu.action_probs()[0]) for mu in basis]
                         for u in range(env.n_contexts)], dtype=object)
        return vals if exact else _to_float(vals)
    if exact:
        raise ValueError("rational enumeration is only available for bandit environments")
    return np.array([[policy_value(env, mu, u) for mu in basis] for u in range(env.n_contexts)])


def exact_observational_stats(env, context_to_basis, basis):
    """Population P(mu_k) and E[V | mu_k] when the expert in context ``u``
    runs basis policy ``k`` with probability ``context_to_basis[u, k]``."""
    if isinstance(env, ConfoundedBanditEnv):
        pu, w = _rational(env.context_dist.probs), _rational(context_to_basis)
        vals = context_values(env, basis, exact=True)
    else:
        pu = env.context_dist.probs
        w = np.asarray(context_to_basis, dtype=float)
        vals = context_values(env, basis)
    joint = pu[:, None] * w
    p_mu = joint.sum(axis=0)
    mass = (joint * vals).sum(axis=0)
    mean_v = np.array([m / p if p > 0 else np.nan for m, p in zip(mass, p_mu)], dtype=object)
    p_mu = _to_float(p_mu)
    return ObservationalStats(p_mu, _to_float(mean_v), p_mu.copy())


def counterfactual_values(env, basis, context_to_basis):
    """``cf[j, k] = E[V | run mu_j, expert chose mu_k]``.

    Conditioning on the expert's choice reweights the contexts by
    ``P(u | R = k) ~ P(u) P(mu_k | u)``.  Rows/columns for choices with zero
    probability are NaN.
    """
    pu = env.context_dist.probs
    w = np.asarray(context_to_basis, dtype=float)
    vals = context_values(env, basis)
    joint = pu[:, None] * w
    p_r = joint.sum(axis=0)
    K = len(basis)
    cf = np.full((K, K), np.nan)
    for k in range(K):
        if p_r[k] > 0:
            post = joint[:, k] / p_r[k]
            cf[:, k] = post @ vals
    return cf


def check_expert_optimality(env, basis, expert, atol=1e-12):
    """Does the expert's chosen mode dominate every alternative counterfactually?

    True iff ``E[V | mu_j, R=k] <= E[V | mu_k, R=k]`` for every choice ``k``
    the expert makes with positive probability and every ``j != k``.
    Needs oracle access to the environment and ``expert.context_to_basis``.
    """
    table = expert.context_to_basis if hasattr(expert, "context_to_basis") else expert
    cf = counterfactual_values(env, basis, table)
    K = cf.shape[0]
    for k in range(K):
        if np.isnan(cf[k, k]):
            continue
        for j in range(K):
            if j != k and cf[j, k] > cf[k, k] + atol:
                return False
    return True


def write_bounds_csv(path, stats, bounds_list):
    """Rows ``arm, p_hat, mean_v_hat, l, h, rule`` for each bounds object."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "p_hat", "mean_v_hat", "l", "h", "rule"])
        for b in bounds_list:
            for k in range(len(b)):
                w.writerow([k, repr(float(stats.p_mu[k])), repr(float(stats.mean_v[k])),
                            repr(float(b.lower[k])), repr(float(b.upper[k])), b.rule])


def read_bounds_csv(path, rule):
    """Load the bounds for ``rule`` from a file written by :func:`write_bounds_csv`."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["rule"] == rule]
    if not rows:
        raise ValueError(f"{path} has no rows for rule {rule!r}")
    rows.sort(key=lambda r: int(r["arm"]))
    return CausalBounds([float(r["l"]) for r in rows], [float(r["h"]) for r in rows], rule)
