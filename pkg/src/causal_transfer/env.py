"""Confounded environments.

Two environment families share one interface:

* :class:`ConfoundedBanditEnv` -- a one-step problem whose reward table is
  indexed by (context, action).
* :class:`GridTrackEnv` -- an episodic gridworld with one wall layout per
  context.  The agent observes its cell and heading only; the layout it is
  driving on is the hidden context.

Environments are immutable.  Rollout state (current state, step counter) is
owned by the caller, which makes it safe to run many rollouts side by side
with independent generators.
"""
import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from ._validation import check_probability_vector

# action ids for the gridworld
STAY, FORWARD, BACK, ROTATE_CW, ROTATE_CCW = range(5)
ACTION_NAMES = ("stay", "forward", "back", "rotate_cw", "rotate_ccw")
HEADINGS = "NESW"
_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an episode that has already terminated."""


class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


@dataclass(frozen=True)
class ContextDistribution:
    """Stationary distribution P(U) over ``len(probs)`` discrete contexts."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", check_probability_vector(self.probs, "context probs"))

    @property
    def n_contexts(self):
        return self.probs.size

    def sample(self, rng):
        # inverse-CDF on a single uniform so that every episode consumes
        # exactly one draw for its context
        u = rng.random()
        k = int(np.searchsorted(np.cumsum(self.probs), u, side="right"))
        return min(k, self.n_contexts - 1)


class TabularModel(NamedTuple):
    """Context-conditioned tabular dynamics.

    ``next_state[s, a]`` and ``reward[s, a]`` describe the deterministic
    transition; ``done[s, a]`` is true when the step ends the episode
    regardless of the horizon; ``terminal[s]`` marks states that are never
    stepped from.
    """

    next_state: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    terminal: np.ndarray
    start_dist: np.ndarray


def episode_return(rewards, gamma=1.0):
    """Discounted sum ``sum_t gamma**t * rewards[t]``."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("rewards must be a non-empty 1-d sequence")
    if gamma == 1.0:
        return float(sum(rewards.tolist()))
    ret = 0.0
    for r in rewards[::-1]:
        ret = r + gamma * ret
    return float(ret)


class ContextualEnv:
    """Shared behaviour of the confounded environments."""

    context_dist: ContextDistribution
    gamma: float
    horizon: int
    n_states: int
    n_actions: int

    @property
    def n_contexts(self):
        return self.context_dist.n_contexts

    def sample_context(self, rng):
        return self.context_dist.sample(rng)

    def check_context(self, context):
        if not 0 <= int(context) < self.n_contexts:
            raise ValueError(f"context {context} out of range [0, {self.n_contexts})")
        return int(context)

    def with_context_probs(self, probs):
        """Copy of the environment with a different P(U)."""
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class ConfoundedBanditEnv(ContextualEnv):
    """One-step bandit with context-dependent rewards.

    Parameters
    ----------
    reward_table : array-like of shape (n_contexts, n_actions)
        ``reward_table[u, a]`` is the (deterministic) reward of action ``a``
        under context ``u``.
    context_probs : array-like of shape (n_contexts,)
    """

    horizon = 1
    gamma = 1.0
    n_states = 1

    def __init__(self, reward_table, context_probs):
        table = np.array(reward_table, dtype=float)
        if table.ndim != 2:
            raise ValueError("reward_table must be 2-d (contexts x actions)")
        if table.shape[1] < 1:
            raise ValueError("a bandit needs at least one action")
        if not np.all(np.isfinite(table)):
            raise ValueError("reward_table must be finite")
        self.context_dist = ContextDistribution(context_probs)
        if table.shape[0] != self.context_dist.n_contexts:
            raise ValueError(
                f"reward_table has {table.shape[0]} rows but {self.context_dist.n_contexts} contexts"
            )
        table.setflags(write=False)
        self.reward_table = table
        self.n_actions = table.shape[1]

    def __repr__(self):
        return (f"ConfoundedBanditEnv(reward_table={self.reward_table.tolist()}, "
                f"context_probs={self.context_dist.probs.tolist()})")

    @property
    def value_support(self):
        return float(self.reward_table.min()), float(self.reward_table.max())

    def reset(self, context, rng=None):
        self.check_context(context)
        return 0

    def step(self, context, state, action, t=0, rng=None):
        u = self.check_context(context)
        if t >= 1 or state != 0:
            raise EpisodeDoneError("bandit episodes last exactly one step")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range")
        return Transition(0, int(action), float(self.reward_table[u, action]), 0, True)

    def model(self, context):
        u = self.check_context(context)
        return TabularModel(
            next_state=np.zeros((1, self.n_actions), dtype=int),
            reward=self.reward_table[u][None, :].copy(),
            done=np.ones((1, self.n_actions), dtype=bool),
            terminal=np.zeros(1, dtype=bool),
            start_dist=np.ones(1),
        )

    def with_context_probs(self, probs):
        return ConfoundedBanditEnv(self.reward_table, probs)

    def to_dict(self):
        return {
            "type": "bandit",
            "reward_table": self.reward_table.tolist(),
            "context_probs": self.context_dist.probs.tolist(),
        }


def _parse_layout(rows):
    rows = [str(r) for r in rows]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("layout rows must be non-empty and of equal length")
    bad = set("".join(rows)) - set(".#GS")
    if bad:
        raise ValueError(f"unknown layout characters {sorted(bad)}")
    return np.array([list(r) for r in rows])


class GridTrackEnv(ContextualEnv):
    """Episodic gridworld whose wall layout is the hidden context.

    State index is ``(row * n_cols + col) * 4 + heading``; it carries no
    information about which layout is active.  Actions are ``stay``,
    ``forward``, ``back``, ``rotate_cw`` and ``rotate_ccw``.  A move into a
    wall (or off the grid) leaves the position unchanged and pays
    ``collision_reward``; entering a goal cell pays ``goal_reward`` and ends
    the episode; anything else pays ``step_reward``.

    Parameters
    ----------
    layouts : list of list of str
        One ASCII map per context: ``.`` free, ``#`` wall, ``G`` goal,
        ``S`` start.  All maps share dimensions and start cells.
    context_probs : array-like
    step_reward, collision_reward, goal_reward : float
    horizon : int
        Maximum number of steps per episode.
    gamma : float
        Discount in (0, 1].
    start_heading : {"N", "E", "S", "W"}
    start_probs : array-like, optional
        Distribution over the ``S`` cells in row-major order; uniform when
        omitted.
    """

    n_actions = 5

    def __init__(self, layouts, context_probs, step_reward=-0.003, collision_reward=-0.08,
                 goal_reward=1.0, horizon=100, gamma=1.0, start_heading="E", start_probs=None):
        grids = [_parse_layout(rows) for rows in layouts]
        self.context_dist = ContextDistribution(context_probs)
        if len(grids) != self.context_dist.n_contexts:
            raise ValueError(f"{len(grids)} layouts for {self.context_dist.n_contexts} contexts")
        shape = grids[0].shape
        if any(g.shape != shape for g in grids):
            raise ValueError("all layouts must have the same dimensions")
        if int(horizon) < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if start_heading not in HEADINGS:
            raise ValueError(f"start_heading must be one of {HEADINGS!r}")

        starts = [tuple(zip(*np.nonzero(g == "S"))) for g in grids]
        if not starts[0]:
            raise ValueError("layouts need at least one start cell 'S'")
        if any(s != starts[0] for s in starts):
            # differing start cells would reveal the context through s_0
            raise ValueError("start cells must coincide across layouts")
        self.start_cells = [tuple(int(v) for v in c) for c in starts[0]]
        if start_probs is None:
            start_probs = np.full(len(self.start_cells), 1.0 / len(self.start_cells))
        self.start_probs = check_probability_vector(start_probs, "start_probs")
        if self.start_probs.size != len(self.start_cells):
            raise ValueError("start_probs length must match the number of 'S' cells")

        self.layouts = [["".join(r) for r in g] for g in grids]
        self._walls = np.stack([g == "#" for g in grids])
        self._goals = np.stack([g == "G" for g in grids])
        self.n_rows, self.n_cols = shape
        self.n_states = self.n_rows * self.n_cols * 4
        self.step_reward = float(step_reward)
        self.collision_reward = float(collision_reward)
        self.goal_reward = float(goal_reward)
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        self.start_heading = start_heading
        self._check_reachable()
        self._models = [self._build_model(u) for u in range(self.n_contexts)]

    def __repr__(self):
        return (f"GridTrackEnv(shape=({self.n_rows}, {self.n_cols}), "
                f"n_contexts={self.n_contexts}, horizon={self.horizon})")

    # -- encoding ---------------------------------------------------------
    def encode(self, row, col, heading):
        return (row * self.n_cols + col) * 4 + heading

    def decode(self, state):
        cell, heading = divmod(int(state), 4)
        row, col = divmod(cell, self.n_cols)
        return row, col, heading

    # -- static checks ----------------------------------------------------
    def _check_reachable(self):
        for u in range(self.n_contexts):
            seen = set()
            frontier = [c for c, p in zip(self.start_cells, self.start_probs) if p > 0]
            seen.update(frontier)
            found = False
            while frontier:
                r, c = frontier.pop()
                if self._goals[u, r, c]:
                    found = True
                for dr, dc in _DELTAS:
                    nr, nc = r + dr, c + dc
                    if (0 <= nr < self.n_rows and 0 <= nc < self.n_cols
                            and not self._walls[u, nr, nc] and (nr, nc) not in seen):
                        seen.add((nr, nc))
                        frontier.append((nr, nc))
            if not found:
                raise ValueError(f"layout {u} has no goal reachable from the start cells")
            # every start cell with positive mass must reach a goal; the grid
            # moves are reversible so one connected component check suffices
            for cell, p in zip(self.start_cells, self.start_probs):
                if p > 0 and cell not in seen:
                    raise ValueError(f"start {cell} disconnected in layout {u}")

    @property
    def value_support(self):
        """Analytic (V_lo, V_hi) implied by the reward constants and horizon."""
        disc = sum(self.gamma ** t for t in range(self.horizon))
        per_step = (self.step_reward, self.collision_reward)
        lo = disc * min(min(per_step), 0.0) + min(self.goal_reward, 0.0)
        hi = disc * max(max(per_step), 0.0) + max(self.goal_reward, 0.0)
        return float(lo), float(hi)

    # -- dynamics ---------------------------------------------------------
    def _move(self, u, row, col, heading, action):
        """Return (row, col, heading, reward, reached_goal)."""
        if action == ROTATE_CW:
            return row, col, (heading + 1) % 4, self.step_reward, False
        if action == ROTATE_CCW:
            return row, col, (heading - 1) % 4, self.step_reward, False
        if action == STAY:
            return row, col, heading, self.step_reward, False
        dr, dc = _DELTAS[heading]
        if action == BACK:
            dr, dc = -dr, -dc
        nr, nc = row + dr, col + dc
        if not (0 <= nr < self.n_rows and 0 <= nc < self.n_cols) or self._walls[u, nr, nc]:
            return row, col, heading, self.collision_reward, False
        if self._goals[u, nr, nc]:
            return nr, nc, heading, self.goal_reward, True
        return nr, nc, heading, self.step_reward, False

    def _terminal(self, u, row, col):
        return bool(self._walls[u, row, col] or self._goals[u, row, col])

    def _build_model(self, u):
        S, A = self.n_states, self.n_actions
        nxt = np.zeros((S, A), dtype=int)
        rew = np.zeros((S, A))
        done = np.zeros((S, A), dtype=bool)
        terminal = np.zeros(S, dtype=bool)
        for s in range(S):
            row, col, heading = self.decode(s)
            if self._terminal(u, row, col):
                terminal[s] = True
                nxt[s] = s
                continue
            for a in range(A):
                r2, c2, h2, reward, goal = self._move(u, row, col, heading, a)
                nxt[s, a] = self.encode(r2, c2, h2)
                rew[s, a] = reward
                done[s, a] = goal
        start = np.zeros(S)
        h0 = HEADINGS.index(self.start_heading)
        for (r, c), p in zip(self.start_cells, self.start_probs):
            start[self.encode(r, c, h0)] += p
        for arr in (nxt, rew, done, terminal, start):
            arr.setflags(write=False)
        return TabularModel(nxt, rew, done, terminal, start)

    def model(self, context):
        return self._models[self.check_context(context)]

    def reset(self, context, rng):
        self.check_context(context)
        if len(self.start_cells) == 1:
            r, c = self.start_cells[0]
        else:
            k = int(np.searchsorted(np.cumsum(self.start_probs), rng.random(), side="right"))
            r, c = self.start_cells[min(k, len(self.start_cells) - 1)]
        return self.encode(r, c, HEADINGS.index(self.start_heading))

    def step(self, context, state, action, t=0, rng=None):
        u = self.check_context(context)
        if t >= self.horizon:
            raise EpisodeDoneError(f"episode already hit the horizon ({self.horizon})")
        row, col, heading = self.decode(state)
        if self._terminal(u, row, col):
            raise EpisodeDoneError(f"state {state} is terminal under context {u}")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range")
        r2, c2, h2, reward, goal = self._move(u, row, col, heading, int(action))
        nxt = self.encode(r2, c2, h2)
        return Transition(int(state), int(action), reward, nxt, goal or t + 1 >= self.horizon)

    def with_context_probs(self, probs):
        d = self.to_dict()
        d["context_probs"] = list(np.asarray(probs, dtype=float))
        return env_from_dict(d)

    def to_dict(self):
        return {
            "type": "gridworld",
            "layouts": [list(rows) for rows in self.layouts],
            "context_probs": self.context_dist.probs.tolist(),
            "step_reward": self.step_reward,
            "collision_reward": self.collision_reward,
            "goal_reward": self.goal_reward,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "start_heading": self.start_heading,
            "start_probs": self.start_probs.tolist(),
        }


def env_from_dict(d):
    """Build an environment from its JSON-able description."""
    d = dict(d)
    kind = d.pop("type", None)
    if kind == "bandit":
        return ConfoundedBanditEnv(d["reward_table"], d["context_probs"])
    if kind == "gridworld":
        return GridTrackEnv(**d)
    raise ValueError(f"unknown environment type {kind!r}")


def load_env(source):
    """Load an environment from a dict, a JSON path, or a preset name."""
    if isinstance(source, ContextualEnv):
        return source
    if isinstance(source, dict):
        return env_from_dict(source)
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            return env_from_dict(json.load(fh))
    if isinstance(source, str) and source in PRESET_ENVS:
        return PRESET_ENVS[source]()
    raise ValueError(f"cannot load environment from {source!r}")


# --- presets -----------------------------------------------------------------

EXAMPLE1_REWARDS = [[1.0, 3.0], [11.0, 10.0]]


def example1_env():
    """The 2-arm confounded bandit with P(U=0) = 1/2."""
    return ConfoundedBanditEnv(EXAMPLE1_REWARDS, [0.5, 0.5])


# u=0: the top corridor runs straight to the goal.
# u=1: the top corridor is blocked; the goal is only reachable via the bottom
# loop.  The bottom loop is open in both layouts.
TWO_TRACK_LAYOUTS = [
    [
        "#######",
        "#S...G#",
        "#.###.#",
        "#.....#",
        "#######",
    ],
    [
        "#######",
        "#S..#G#",
        "#.###.#",
        "#.....#",
        "#######",
    ],
]


def two_track_env(horizon=100, context_probs=(0.7, 0.3)):
    """Straight vs. curved track, P(U=0) = 0.7."""
    return GridTrackEnv(TWO_TRACK_LAYOUTS, list(context_probs), step_reward=-0.003,
                        collision_reward=-0.08, goal_reward=1.0, horizon=horizon, gamma=1.0)


PRESET_ENVS = {"example1": example1_env, "two-track": two_track_env}


# --- rollouts ----------------------------------------------------------------

@dataclass
class Rollout:
    """One episode: visited states, actions, rewards and behaviour probabilities."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    ret: float
    context: Optional[int] = None
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)


def rollout(env, policy, rng, context=None):
    """Run ``policy`` for one episode.

    The context is drawn from P(U) first (unless given) so that paired runs
    sharing a generator see the same context sequence.  ``policy`` only needs
    an ``action_probs()`` method returning the (n_states, n_actions) matrix.
    """
    if context is None:
        context = env.sample_context(rng)
    P = policy.action_probs()
    cdf = np.cumsum(P, axis=1)
    state = env.reset(context, rng)
    states, actions, rewards, probs = [], [], [], []
    t = 0
    while True:
        row = cdf[state]
        a = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
        a = min(a, env.n_actions - 1)
        tr = env.step(context, state, a, t)
        states.append(state)
        actions.append(a)
        rewards.append(tr.reward)
        probs.append(P[state, a])
        t += 1
        state = tr.next_state
        if tr.done:
            break
    rewards = np.asarray(rewards)
    return Rollout(np.asarray(states, dtype=int), np.asarray(actions, dtype=int), rewards,
                   np.asarray(probs), episode_return(rewards, env.gamma), int(context))


def policy_value(env, policy, context):
    """Exact expected return of ``policy`` under a fixed context.

    Backward induction over the horizon on the tabular model; ``policy`` is
    either a policy object with ``action_probs()`` or an (n_states,
    n_actions) probability matrix.
    """
    m = env.model(context)
    P = policy if isinstance(policy, np.ndarray) else policy.action_probs()
    cont = (~m.done).astype(float) * env.gamma
    v = np.zeros(env.n_states)
    for _ in range(env.horizon):
        q = m.reward + cont * v[m.next_state]
        v = np.where(m.terminal, 0.0, (P * q).sum(axis=1))
    return float(m.start_dist @ v)
