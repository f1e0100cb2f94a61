"""UCB over basis policies, optionally clipped by causal upper bounds.

Each arm is a basis policy; pulling an arm runs that policy for one episode.
The causal variant first drops arms whose upper bound is below the best
lower bound, then caps every UCB index at the arm's causal upper bound.
Baselines: the same UCB without bounds, and a single behaviour-cloned policy
improved online.
"""
import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._rng import seed_from, substream
from .env import rollout
from .policy import BasisPolicySet, PolicyGradientConfig, TabularSoftmaxPolicy, \
    behavior_clone, policy_gradient_update

EXPLORATION_KINDS = ("constant", "log", "log-loglog")
UPDATE_RULES = ("per-arm-mean", "global-index")
TIE_BREAKS = ("lowest-index", "seeded-random")


@dataclass(frozen=True)
class ExplorationSchedule:
    """The exploration level ``f(i)`` in the index ``V + sqrt(2 f(i) / T)``.

    ``constant``: ``f(i) = c``; ``log``: ``log(i)``; ``log-loglog``:
    ``log(i) + 3 log(log(max(i, e)))``.
    """

    kind: str = "log-loglog"
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in EXPLORATION_KINDS:
            raise ValueError(f"exploration kind must be one of {EXPLORATION_KINDS}")
        if self.kind == "constant" and self.c < 0:
            raise ValueError("constant exploration level must be >= 0")

    def __call__(self, i):
        if self.kind == "constant":
            return float(self.c)
        if self.kind == "log":
            return math.log(i)
        return math.log(i) + 3.0 * math.log(math.log(max(i, math.e)))


@dataclass
class BanditConfig:
    horizon_episodes: int = 2000
    exploration: ExplorationSchedule = field(default_factory=ExplorationSchedule)
    update_rule: str = "per-arm-mean"
    use_causal_bounds: bool = True
    improvement: Optional[PolicyGradientConfig] = None
    tie_break: str = "lowest-index"
    # run eliminated arms in the initial round as well (literal reading of
    # "execute all basis policies once")
    init_eliminated: bool = False

    def __post_init__(self):
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
        if int(self.horizon_episodes) < 1:
            raise ValueError("horizon_episodes must be >= 1")


@dataclass
class ArmState:
    policy: TabularSoftmaxPolicy
    v_hat: float = 0.0
    pulls: int = 0
    eliminated: bool = False
    mean_return: float = 0.0


@dataclass
class RunResult:
    """Per-episode trace of one bandit run.

    ``ucb`` and ``clipped`` hold the raw and clipped indices of every arm
    (NaN during the initial round and for eliminated arms).
    """

    method: str
    arms: np.ndarray
    returns: np.ndarray
    ucb: np.ndarray
    clipped: np.ndarray
    pulls: np.ndarray
    v_hat: np.ndarray
    eliminated: np.ndarray
    n_init: int
    improved: bool
    recommended: int
    policies: List[TabularSoftmaxPolicy] = field(default_factory=list, repr=False)

    def __len__(self):
        return self.arms.size

    @property
    def n_arms(self):
        return self.ucb.shape[1]

    def arm_pulls(self, arm):
        return int(np.sum(self.arms == arm))

    def to_csv(self, path, best_do_value=None):
        """Columns ``episode, arm, return, regret, H_0.., Hclip_0..``."""
        if best_do_value is not None and not self.improved:
            regret = cumulative_regret(self, best_do_value)
        else:
            regret = np.full(len(self), np.nan)
        K = self.n_arms
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "arm", "return", "regret"]
                       + [f"H_{k}" for k in range(K)] + [f"Hclip_{k}" for k in range(K)])
            for e in range(len(self)):
                w.writerow([e, int(self.arms[e]), repr(float(self.returns[e])),
                            repr(float(regret[e]))]
                           + [repr(float(x)) for x in self.ucb[e]]
                           + [repr(float(x)) for x in self.clipped[e]])


# --- algorithm pieces ----------------------------------------------------------

def eliminate_arms(bounds):
    """Flags arms whose upper bound lies strictly below the largest lower bound."""
    upper = np.asarray(bounds.upper, dtype=float)
    lower = np.asarray(bounds.lower, dtype=float)
    out = upper < lower.max()
    assert not out.all(), "the arm with the largest lower bound can never be eliminated"
    return out


def ucb_index(v_hat, pulls, episode_i, exploration_f):
    """``v_hat + sqrt(2 f(i) / pulls)``; ``exploration_f`` is a callable or a constant."""
    f = exploration_f(episode_i) if callable(exploration_f) else float(exploration_f)
    pulls = np.asarray(pulls, dtype=float)
    if np.any(pulls < 1):
        raise ValueError("every arm needs at least one pull before its index is defined")
    return np.asarray(v_hat, dtype=float) + np.sqrt(2.0 * f / pulls)


def clip_index(h_ucb, h_causal, use_causal_bounds=True):
    if not use_causal_bounds or h_causal is None:
        return h_ucb
    return np.minimum(h_ucb, h_causal)


def select_arm(indices, eliminated=None, tie_break="lowest-index", rng=None):
    """Argmax of ``indices`` over arms that are not eliminated."""
    idx = np.asarray(indices, dtype=float).copy()
    if eliminated is not None:
        idx[np.asarray(eliminated, dtype=bool)] = -np.inf
    best = idx.max()
    if best == -np.inf:
        raise ValueError("no selectable arm")
    winners = np.flatnonzero(idx == best)
    if tie_break == "seeded-random" and winners.size > 1:
        return int(rng.choice(winners))
    return int(winners[0])


def update_value(v_hat_prev, episode_i, observed, selected, update_rule="per-arm-mean", pulls=None):
    """Value estimate after episode ``i``.

    ``global-index`` mixes in the new return with weight ``1 / (i + 1)``
    where ``i`` is the global episode counter; ``per-arm-mean`` keeps the
    arm's sample mean, with ``pulls`` the count including this episode.
    """
    if not selected:
        return v_hat_prev
    if update_rule == "global-index":
        return observed / (episode_i + 1) + episode_i / (episode_i + 1) * v_hat_prev
    if update_rule == "per-arm-mean":
        if pulls is None or pulls < 1:
            raise ValueError("per-arm-mean needs the updated pull count")
        return v_hat_prev + (observed - v_hat_prev) / pulls
    raise ValueError(f"unknown update rule {update_rule!r}")


def recommend(pulls, v_hat):
    """Most-pulled arm; ties go to the higher estimate, then the lower index."""
    pulls = np.asarray(pulls)
    cands = np.flatnonzero(pulls == pulls.max())
    vals = np.asarray(v_hat, dtype=float)[cands]
    return int(cands[np.flatnonzero(vals == vals.max())[0]])


def _improve(arm, ro, config, prev_mean):
    if config.improvement is not None:
        arm.policy = policy_gradient_update(arm.policy, [ro], config.improvement,
                                            baseline_value=prev_mean)


def _episode(env, policy, seed, e):
    rng = substream(seed, "episode", e)
    try:
        return rollout(env, policy, rng)
    except Exception as exc:
        raise RuntimeError(f"episode {e}: {exc}") from exc


def _run_ucb(env, basis, upper, eliminated, config, seed, method):
    K = len(basis)
    H = int(config.horizon_episodes)
    arms = [ArmState(p.copy(), eliminated=bool(el)) for p, el in zip(basis, eliminated)]
    init = [k for k in range(K) if config.init_eliminated or not eliminated[k]]
    if H < len(init):
        raise ValueError(f"horizon_episodes={H} is shorter than the initial round ({len(init)})")
    tie_rng = substream(seed, "ties")

    chosen = np.zeros(H, dtype=int)
    rets = np.zeros(H)
    ucb = np.full((H, K), np.nan)
    clipped = np.full((H, K), np.nan)
    active = ~np.asarray(eliminated, dtype=bool)

    for e, k in enumerate(init):
        ro = _episode(env, arms[k].policy, seed, e)
        arms[k].v_hat = arms[k].mean_return = ro.ret
        arms[k].pulls = 1
        chosen[e], rets[e] = k, ro.ret

    n_init = len(init)
    for e in range(n_init, H):
        i = e - n_init + 1
        v = np.array([a.v_hat for a in arms])
        T = np.array([max(a.pulls, 1) for a in arms])
        h = ucb_index(v, T, i, config.exploration)
        hc = clip_index(h, upper, config.use_causal_bounds)
        ucb[e, active] = h[active]
        clipped[e, active] = hc[active]
        k = select_arm(hc, ~active, config.tie_break, tie_rng)

        arm = arms[k]
        ro = _episode(env, arm.policy, seed, e)
        prev_mean = arm.mean_return
        _improve(arm, ro, config, prev_mean)
        arm.pulls += 1
        arm.mean_return += (ro.ret - arm.mean_return) / arm.pulls
        arm.v_hat = update_value(arm.v_hat, i, ro.ret, True, config.update_rule, arm.pulls)
        chosen[e], rets[e] = k, ro.ret

    pulls = np.array([a.pulls for a in arms])
    v_hat = np.array([a.v_hat for a in arms])
    return RunResult(method, chosen, rets, ucb, clipped, pulls, v_hat,
                     np.asarray(eliminated, dtype=bool), n_init, config.improvement is not None,
                     recommend(pulls, v_hat), [a.policy for a in arms])


def run_causal_ucb(env, basis, bounds, config, random_state=0):
    """Causal-bound-constrained UCB over ``basis``.

    With ``config.use_causal_bounds`` false the bounds are ignored entirely
    (no elimination, no clipping) and the run matches :func:`run_vanilla_ucb`.
    """
    basis = basis if isinstance(basis, BasisPolicySet) else BasisPolicySet(basis)
    if bounds is not None and len(bounds) != len(basis):
        raise ValueError(f"{len(bounds)} bounds for {len(basis)} arms")
    seed = seed_from(random_state)
    if config.use_causal_bounds and bounds is not None:
        eliminated = eliminate_arms(bounds)
        upper = np.asarray(bounds.upper, dtype=float)
    else:
        eliminated = np.zeros(len(basis), dtype=bool)
        upper = None
    return _run_ucb(env, basis, upper, eliminated, config, seed, "causal_ucb")


def run_vanilla_ucb(env, basis, config, random_state=0):
    basis = basis if isinstance(basis, BasisPolicySet) else BasisPolicySet(basis)
    seed = seed_from(random_state)
    return _run_ucb(env, basis, None, np.zeros(len(basis), dtype=bool), config, seed,
                    "vanilla_ucb")


def run_direct_imitation(env, dataset, config, random_state=0, smoothing=0.5):
    """Clone one policy from the whole dataset and (optionally) improve it online."""
    if len(dataset) == 0:
        raise ValueError("direct imitation needs a non-empty dataset")
    policy = behavior_clone(dataset, env.n_states, env.n_actions, smoothing)
    return run_single_policy(env, policy, config, random_state, method="direct_imitation")


def run_single_policy(env, policy, config, random_state=0, method="single_policy"):
    seed = seed_from(random_state)
    H = int(config.horizon_episodes)
    arm = ArmState(policy.copy())
    rets = np.zeros(H)
    for e in range(H):
        ro = _episode(env, arm.policy, seed, e)
        prev_mean = arm.mean_return if arm.pulls else None
        _improve(arm, ro, config, prev_mean)
        arm.pulls += 1
        arm.mean_return += (ro.ret - arm.mean_return) / arm.pulls
        arm.v_hat = arm.mean_return
        rets[e] = ro.ret
    nan = np.full((H, 1), np.nan)
    return RunResult(method, np.zeros(H, dtype=int), rets, nan, nan.copy(),
                     np.array([H]), np.array([arm.v_hat]), np.zeros(1, dtype=bool), 0,
                     config.improvement is not None, 0, [arm.policy])


def cumulative_regret(result, best_do_value):
    """``R(n) = n * best_do_value - sum_{e < n} V(e)`` for every prefix ``n``.

    Only defined when the arms were not modified during the run.
    """
    if result.improved:
        raise ValueError("regret is undefined when arm policies were improved online")
    rets = np.asarray(result.returns, dtype=float)
    if rets.size == 0:
        return np.zeros(0)
    n = np.arange(1, rets.size + 1)
    return n * float(best_do_value) - np.cumsum(rets)


# --- estimator wrappers --------------------------------------------------------

class CausalUCB(BaseEstimator):
    """Estimator-style front end of :func:`run_causal_ucb`.

    ``fit(env, basis, bounds)`` runs the bandit and stores ``result_``;
    ``best_arm_`` and ``policy_`` hold the recommendation.
    """

    def __init__(self, horizon_episodes=2000, exploration="log-loglog", exploration_c=1.0,
                 update_rule="per-arm-mean", use_causal_bounds=True, improvement=None,
                 tie_break="lowest-index", init_eliminated=False, random_state=0):
        self.horizon_episodes = horizon_episodes
        self.exploration = exploration
        self.exploration_c = exploration_c
        self.update_rule = update_rule
        self.use_causal_bounds = use_causal_bounds
        self.improvement = improvement
        self.tie_break = tie_break
        self.init_eliminated = init_eliminated
        self.random_state = random_state

    def _config(self):
        improvement = self.improvement
        if isinstance(improvement, dict):
            improvement = PolicyGradientConfig(**improvement)
        return BanditConfig(self.horizon_episodes,
                            ExplorationSchedule(self.exploration, self.exploration_c),
                            self.update_rule, self.use_causal_bounds, improvement,
                            self.tie_break, self.init_eliminated)

    def fit(self, env, basis, bounds=None):
        self.result_ = run_causal_ucb(env, basis, bounds, self._config(), self.random_state)
        self.best_arm_ = self.result_.recommended
        self.policy_ = self.result_.policies[self.best_arm_]
        return self

    def predict(self, states):
        """Greedy action of the recommended policy in each state."""
        if not hasattr(self, "policy_"):
            raise NotFittedError("CausalUCB is not fitted yet")
        return self.policy_.action_probs()[np.asarray(states, dtype=int)].argmax(axis=1)


def exploration_from(value: Union[str, dict, ExplorationSchedule, None]):
    if value is None:
        return ExplorationSchedule()
    if isinstance(value, ExplorationSchedule):
        return value
    if isinstance(value, str):
        return ExplorationSchedule(value)
    return ExplorationSchedule(**value)
