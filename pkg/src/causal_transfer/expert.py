"""Context-aware experts and the confounded dataset they produce.

The expert sees the context ``u`` and plays a (softened) optimal policy for
the layout/reward table of that context.  The learner-facing dataset keeps
states, actions and returns but drops ``u``; a separate oracle copy keeps it
for validation only.
"""
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._rng import seed_from, substream
from .env import ConfoundedBanditEnv, rollout
from .policy import TabularSoftmaxPolicy


class ConvergenceError(RuntimeError):
    """Value iteration did not converge within its iteration cap."""


def value_iteration(env, context, tol=1e-12, max_iter=10_000):
    """Optimal state values and Q-table of the context-conditioned MDP.

    Uses the stationary Bellman optimality operator; with ``gamma == 1`` this
    is a stochastic-shortest-path iteration, which converges as long as a goal
    is reachable (checked by the environment).

    Returns
    -------
    v : ndarray of shape (n_states,)
    q : ndarray of shape (n_states, n_actions)
    """
    m = env.model(context)
    cont = (~m.done).astype(float) * env.gamma
    v = np.zeros(env.n_states)
    for _ in range(max_iter):
        q = m.reward + cont * v[m.next_state]
        v_new = np.where(m.terminal, 0.0, q.max(axis=1))
        if np.max(np.abs(v_new - v)) <= tol:
            return v_new, m.reward + cont * v_new[m.next_state]
        v = v_new
    raise ConvergenceError(f"value iteration did not converge in {max_iter} iterations")


def soften(probs, softening):
    """Mix a policy with the uniform one: each step is random w.p. ``softening``."""
    n_actions = probs.shape[1]
    return (1.0 - softening) * probs + softening / n_actions


def train_expert(env, context, softening=0.0, tol=1e-12, max_iter=10_000):
    """Greedy policy w.r.t. the optimal Q-values of one context, then softened."""
    if not 0.0 <= softening < 0.5:
        raise ValueError("softening must be in [0, 0.5)")
    _, q = value_iteration(env, context, tol=tol, max_iter=max_iter)
    greedy = np.zeros_like(q)
    # ties go to the lowest action index
    greedy[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return TabularSoftmaxPolicy.from_probs(soften(greedy, softening))


@dataclass
class ExpertModel:
    """One policy per context plus the context-to-basis table P(mu_k | u).

    ``context_to_basis[u, k]`` records how often the expert's behaviour under
    context ``u`` is basis mode ``k``.  For gridworlds each context has its
    own mode (identity table); for bandits the modes are the pure actions and
    the table equals the expert's action distribution.
    """

    per_context_policies: List[TabularSoftmaxPolicy]
    context_to_basis: np.ndarray
    softening: float = 0.0

    def __post_init__(self):
        self.context_to_basis = np.asarray(self.context_to_basis, dtype=float)
        if self.context_to_basis.shape[0] != len(self.per_context_policies):
            raise ValueError("context_to_basis needs one row per context policy")
        if not np.allclose(self.context_to_basis.sum(axis=1), 1.0):
            raise ValueError("rows of context_to_basis must sum to 1")
        if not 0.0 <= self.softening < 0.5:
            raise ValueError("softening must be in [0, 0.5)")

    @property
    def n_contexts(self):
        return len(self.per_context_policies)

    @classmethod
    def train(cls, env, softening=0.0, tol=1e-12, max_iter=10_000):
        policies = [train_expert(env, u, softening, tol, max_iter) for u in range(env.n_contexts)]
        if isinstance(env, ConfoundedBanditEnv):
            table = np.array([p.action_probs()[0] for p in policies])
        else:
            table = np.eye(env.n_contexts)
        return cls(policies, table, softening)

    def policy(self, context):
        return self.per_context_policies[context]

    def basis_mixture(self, basis, context):
        """``sum_k mu_k * P(mu_k | u)`` as a probability matrix."""
        w = self.context_to_basis[context]
        return sum(wk * mu.action_probs() for wk, mu in zip(w, basis))


@dataclass
class Trajectory:
    """States and actions of one expert episode, with its return ``ret``.

    ``hidden_context`` is only populated on oracle copies.
    """

    states: np.ndarray
    actions: np.ndarray
    ret: float
    hidden_context: Optional[int] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=int)
        self.actions = np.asarray(self.actions, dtype=int)
        if self.states.shape != self.actions.shape or self.states.ndim != 1:
            raise ValueError("states and actions must be 1-d and of equal length")
        self.ret = float(self.ret)

    def __len__(self):
        return self.actions.size

    def stripped(self):
        return Trajectory(self.states, self.actions, self.ret)

    def to_record(self, traj_id):
        return {"traj_id": int(traj_id), "states": self.states.tolist(),
                "actions": self.actions.tolist(), "V": self.ret}


@dataclass
class ExpertDataset:
    """Demonstrations as the learner sees them (contexts only on oracle copies)."""

    trajectories: List[Trajectory]
    n_states: int
    n_actions: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trajectories = list(self.trajectories)
        if not self.trajectories:
            raise ValueError("dataset must contain at least one trajectory")
        for i, t in enumerate(self.trajectories):
            if len(t) and (t.states.min() < 0 or t.states.max() >= self.n_states
                           or t.actions.min() < 0 or t.actions.max() >= self.n_actions):
                raise ValueError(f"trajectory {i} indexes outside {self.n_states} states x "
                                 f"{self.n_actions} actions")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def returns(self):
        return np.array([t.ret for t in self.trajectories])

    @property
    def contexts(self):
        """Hidden contexts (oracle copies only)."""
        ctx = [t.hidden_context for t in self.trajectories]
        if any(c is None for c in ctx):
            raise ValueError("this dataset carries no contexts")
        return np.array(ctx, dtype=int)

    def stripped(self):
        return ExpertDataset([t.stripped() for t in self.trajectories], self.n_states,
                             self.n_actions, dict(self.meta))

    def subset(self, idx):
        return ExpertDataset([self.trajectories[i] for i in idx], self.n_states,
                             self.n_actions, dict(self.meta))


def generate_dataset(env, expert, n, random_state=0):
    """Roll out the expert ``n`` times with freshly sampled contexts.

    Episode ``i`` uses a generator that depends only on the seed and ``i``.

    Returns
    -------
    dataset : ExpertDataset
        Context-free copy for the learner.
    oracle : ExpertDataset
        Same trajectories with ``hidden_context`` filled in.
    """
    if int(n) < 1:
        raise ValueError("n must be >= 1")
    seed = seed_from(random_state)
    trajs = []
    for i in range(int(n)):
        rng = substream(seed, i)
        u = env.sample_context(rng)
        ro = rollout(env, expert.policy(u), rng, context=u)
        trajs.append(Trajectory(ro.states, ro.actions, ro.ret, hidden_context=u))
    oracle = ExpertDataset(trajs, env.n_states, env.n_actions)
    return oracle.stripped(), oracle


# --- serialisation -------------------------------------------------------------

def write_dataset(path, dataset):
    """One JSON record per line: ``traj_id``, ``states``, ``actions``, ``V``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, t in enumerate(dataset):
            fh.write(json.dumps(t.to_record(i)) + "\n")


def read_dataset(path, n_states, n_actions):
    trajs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                trajs.append(Trajectory(rec["states"], rec["actions"], rec["V"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return ExpertDataset(trajs, n_states, n_actions)


def write_oracle(path, oracle):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, u in enumerate(oracle.contexts):
            fh.write(json.dumps({"traj_id": i, "context": int(u)}) + "\n")


def read_oracle(path):
    with open(path, encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    recs.sort(key=lambda r: r["traj_id"])
    return np.array([r["context"] for r in recs], dtype=int)
