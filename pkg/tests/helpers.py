"""Random confounded-bandit instances shared by the property tests."""
import numpy as np

from causal_transfer.causal import (ValueSupport, check_expert_optimality, exact_do_value,
                                    exact_observational_stats, expert_optimal_bounds,
                                    natural_bounds)
from causal_transfer.env import ConfoundedBanditEnv
from causal_transfer.policy import BasisPolicySet, TabularSoftmaxPolicy


def random_confounded_bandit(rng):
    """Return ``(env, basis, context_to_basis, support)``.

    The basis is either the pure actions or random stochastic policies; the
    expert's mode choice per context is a Dirichlet draw, sometimes sharpened
    towards the context-best mode so that the optimality hypothesis holds
    in a good share of instances.
    """
    n_ctx = int(rng.integers(1, 5))
    K = int(rng.integers(1, 5))
    n_actions = K if rng.random() < 0.5 else int(rng.integers(1, 5))
    table = rng.uniform(-3.0, 3.0, size=(n_ctx, n_actions))
    env = ConfoundedBanditEnv(table, rng.dirichlet(np.ones(n_ctx)))
    if n_actions == K and rng.random() < 0.5:
        basis = BasisPolicySet([TabularSoftmaxPolicy.deterministic([a], n_actions)
                                for a in range(K)])
    else:
        basis = BasisPolicySet([TabularSoftmaxPolicy(rng.normal(scale=2.0, size=(1, n_actions)))
                                for _ in range(K)])
    w = rng.dirichlet(np.full(K, 0.5), size=n_ctx)
    if rng.random() < 0.5:
        vals = np.array([[table[u] @ mu.probs(0) for mu in basis] for u in range(n_ctx)])
        sharp = np.eye(K)[vals.argmax(axis=1)]
        mix = rng.uniform(0.5, 1.0)
        w = mix * sharp + (1 - mix) * w
    slack = rng.uniform(0.0, 1.0, size=2)
    support = ValueSupport(float(table.min() - slack[0]), float(table.max() + slack[1]))
    return env, basis, w, support


def evaluate_instance(env, basis, w, support):
    stats = exact_observational_stats(env, w, basis)
    nat = natural_bounds(stats, support)
    opt = expert_optimal_bounds(stats, support)
    do = np.array([exact_do_value(env, mu) for mu in basis])
    holds = check_expert_optimality(env, basis, w)
    return stats, nat, opt, do, holds
