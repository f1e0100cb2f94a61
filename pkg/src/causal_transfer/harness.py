"""Experiment orchestration: stages, presets, multi-trial aggregation, CSV output.

A pipeline run is split into stages that communicate only through files in
the output directory::

    gen-expert  -> dataset.jsonl  [+ dataset.oracle.jsonl]
    cluster     -> labeled.csv, basis.json
    bounds      -> bounds.csv
    run         -> runs/<method>_trial<k>.csv, curves.csv, summary.json

Each stage draws randomness from ``substream(master_seed, stage, ...)`` so
re-running one stage from its predecessor's files reproduces the pipeline's
output byte for byte.
"""
import copy
import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ._rng import seed_from, substream
from .bandit import (BanditConfig, RunResult, cumulative_regret, exploration_from,
                     run_causal_ucb, run_direct_imitation, run_vanilla_ucb)
from .causal import (ValueSupport, check_expert_optimality, empirical_stats,
                     exact_do_value, exact_observational_stats, natural_bounds,
                     expert_optimal_bounds, read_bounds_csv, write_bounds_csv)
from .cluster import (LabeledDataset, TrajectoryFeaturizer, TrajectoryKMeans, agreement, label_dataset,
                      read_labeled_csv, select_k, write_labeled_csv)
from .env import ConfoundedBanditEnv, load_env
from .expert import (ExpertModel, generate_dataset, read_dataset, read_oracle, write_dataset,
                     write_oracle)
from .policy import BasisPolicySet, PolicyGradientConfig, TabularSoftmaxPolicy, \
    behavior_clone, mixture_policy

METHODS = ("causal_ucb", "vanilla_ucb", "direct_imitation")

DATASET = "dataset.jsonl"
ORACLE = "dataset.oracle.jsonl"
LABELED = "labeled.csv"
BASIS = "basis.json"
BOUNDS = "bounds.csv"
CURVES = "curves.csv"
SUMMARY = "summary.json"


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """Everything a pipeline run needs.

    ``basis`` is ``"clusters"`` (K-means + behaviour cloning) or
    ``"actions"`` (one deterministic policy per action, bandits only).
    ``statistics`` is ``"empirical"`` (plug-in from the labelled dataset) or
    ``"population"`` (exact observational distribution from the oracle).
    """

    env: object = "two-track"
    n_trajectories: int = 300
    expert_softening: float = 0.05
    clustering: dict = field(default_factory=lambda: {
        "k": "auto", "k_max": 4, "variance_threshold": 0.9, "restarts": 10})
    basis: str = "clusters"
    bc_smoothing: float = 0.5
    statistics: str = "empirical"
    bound_rule: str = "expert-optimal"
    widen_delta: object = None
    bandit: dict = field(default_factory=dict)
    trials: int = 10
    master_seed: int = 0
    out: str = "runs"
    n_jobs: int = 1

    def __post_init__(self):
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        if self.n_jobs == 0 or self.n_jobs < -1:
            raise ValueError("n_jobs must be a positive worker count or -1 for all cores")
        if int(self.n_trajectories) < 1:
            raise ValueError("n_trajectories must be >= 1")
        if self.basis not in ("clusters", "actions"):
            raise ValueError("basis must be 'clusters' or 'actions'")
        if self.statistics not in ("empirical", "population"):
            raise ValueError("statistics must be 'empirical' or 'population'")
        if self.bound_rule not in ("natural", "expert-optimal"):
            raise ValueError("bound_rule must be 'natural' or 'expert-optimal'")
        if isinstance(self.env, str) and self.env.endswith(".json") and not os.path.exists(self.env):
            raise FileNotFoundError(f"environment file {self.env} does not exist")
        unknown = set(self.bandit) - {"horizon_episodes", "exploration", "update_rule",
                                      "tie_break", "init_eliminated", "improvement"}
        if unknown:
            raise ValueError(f"unknown bandit keys {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def to_dict(self):
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def make_env(self):
        return load_env(self.env)

    def bandit_config(self, use_causal_bounds=True):
        b = dict(self.bandit)
        imp = b.get("improvement")
        return BanditConfig(
            horizon_episodes=int(b.get("horizon_episodes", 2000)),
            exploration=exploration_from(b.get("exploration")),
            update_rule=b.get("update_rule", "per-arm-mean"),
            use_causal_bounds=use_causal_bounds,
            improvement=PolicyGradientConfig(**imp) if imp else None,
            tie_break=b.get("tie_break", "lowest-index"),
            init_eliminated=bool(b.get("init_eliminated", False)),
        )


PRESETS = {
    "example1": {
        "env": "example1",
        "n_trajectories": 1000,
        "expert_softening": 0.2,
        "basis": "actions",
        "statistics": "population",
        "bound_rule": "expert-optimal",
        "bandit": {"horizon_episodes": 2000, "improvement": None},
        "trials": 50,
        "master_seed": 0,
    },
    "two-track": {
        "env": "two-track",
        "n_trajectories": 300,
        "expert_softening": 0.05,
        "clustering": {"k": "auto", "k_max": 4, "variance_threshold": 0.9, "restarts": 10},
        "basis": "clusters",
        "bc_smoothing": 0.5,
        "statistics": "empirical",
        "bound_rule": "expert-optimal",
        "bandit": {
            "horizon_episodes": 300,
            "improvement": {"learning_rate": 0.5, "clip_ratio": 0.2, "epochs_per_episode": 4,
                            "entropy_bonus": 0.0, "baseline": "mean-return"},
        },
        "trials": 10,
        "master_seed": 0,
    },
}


def load_config(source, **overrides):
    """Config from a preset name, a JSON path or a dict; ``None`` overrides are ignored."""
    if isinstance(source, ExperimentConfig):
        d = source.to_dict()
    elif isinstance(source, dict):
        d = copy.deepcopy(source)
    elif source in PRESETS:
        d = copy.deepcopy(PRESETS[source])
    elif source is not None and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            d = json.load(fh)
        base = d.pop("preset", None)
        if base is not None:
            merged = copy.deepcopy(PRESETS[base])
            merged.update(d)
            d = merged
    else:
        raise FileNotFoundError(f"no preset or config file named {source!r}")
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    return ExperimentConfig.from_dict(d)


# --- aggregation -------------------------------------------------------------

@dataclass
class AggregateCurves:
    """Per-episode mean and unbiased std of returns across trials, per method."""

    mean: Dict[str, np.ndarray]
    std: Dict[str, np.ndarray]
    n_trials: Dict[str, int]

    @property
    def methods(self):
        return list(self.mean)

    @property
    def n_episodes(self):
        return len(next(iter(self.mean.values())))

    def final_window(self, fraction=0.25):
        n = self.n_episodes
        return slice(n - max(1, int(round(n * fraction))), n)

    def terminal_mean(self, method, fraction=0.25):
        """Mean return over the final ``fraction`` of episodes."""
        return float(self.mean[method][self.final_window(fraction)].mean())

    def terminal_std(self, method, fraction=0.25):
        """Across-trial std averaged over the final ``fraction`` of episodes."""
        return float(self.std[method][self.final_window(fraction)].mean())

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["episode"]
            for m in self.methods:
                header += [f"{m}_mean", f"{m}_std"]
            w.writerow(header)
            for e in range(self.n_episodes):
                row = [e]
                for m in self.methods:
                    row += [repr(float(self.mean[m][e])), repr(float(self.std[m][e]))]
                w.writerow(row)


def aggregate(runs: List[RunResult]):
    """Group runs by method and take pointwise mean / std (ddof=1) of returns."""
    if not runs:
        raise ValueError("nothing to aggregate")
    groups: Dict[str, List[np.ndarray]] = {}
    for r in runs:
        groups.setdefault(r.method, []).append(np.asarray(r.returns, dtype=float))
    lengths = {len(x) for g in groups.values() for x in g}
    if len(lengths) != 1:
        raise ValueError(f"runs have mismatched horizons {sorted(lengths)}")
    mean, std, n = {}, {}, {}
    for m, rets in groups.items():
        R = np.vstack(rets)
        mean[m] = R.mean(axis=0)
        std[m] = R.std(axis=0, ddof=1) if R.shape[0] > 1 else np.zeros(R.shape[1])
        n[m] = R.shape[0]
    return AggregateCurves(mean, std, n)


# --- stages --------------------------------------------------------------------

def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def _expert(cfg, env):
    return ExpertModel.train(env, softening=cfg.expert_softening)


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


@_stage("gen-expert")
def cmd_gen_expert(cfg, with_oracle=False):
    """Generate the expert dataset; returns ``(dataset, oracle, summary)``."""
    env = cfg.make_env()
    os.makedirs(cfg.out, exist_ok=True)
    expert = _expert(cfg, env)
    seed = seed_from(substream(cfg.master_seed, "expert"))
    dataset, oracle = generate_dataset(env, expert, cfg.n_trajectories, seed)
    write_dataset(os.path.join(cfg.out, DATASET), dataset)
    if with_oracle:
        write_oracle(os.path.join(cfg.out, ORACLE), oracle)
    freq = np.bincount(oracle.contexts, minlength=env.n_contexts) / len(oracle)
    summary = {"n_trajectories": len(dataset), "context_frequencies": freq.tolist()}
    return dataset, oracle, summary


def _action_labels(dataset):
    return np.array([int(t.actions[0]) for t in dataset], dtype=int)


@_stage("cluster")
def cmd_cluster(cfg, dataset=None):
    """Label trajectories and clone one basis policy per label."""
    env = cfg.make_env()
    if dataset is None:
        dataset = read_dataset(os.path.join(cfg.out, DATASET), env.n_states, env.n_actions)
    info = {}
    if cfg.basis == "actions":
        if not isinstance(env, ConfoundedBanditEnv):
            raise ValueError("basis='actions' is only defined for bandit environments")
        K = env.n_actions
        labels = _action_labels(dataset)
        basis = BasisPolicySet([TabularSoftmaxPolicy.deterministic([a], K) for a in range(K)])
    else:
        X = TrajectoryFeaturizer(env.n_states, env.n_actions).transform(dataset)
        c = cfg.clustering
        info["k_selected"] = select_k(X, c.get("k_max", 4), c.get("variance_threshold", 0.9)) \
            if len(dataset) > 1 else 1
        km = TrajectoryKMeans(n_clusters=c.get("k", "auto"), k_max=c.get("k_max", 4),
                              variance_threshold=c.get("variance_threshold", 0.9),
                              restarts=c.get("restarts", 10),
                              random_state=seed_from(substream(cfg.master_seed, "cluster")))
        km.fit(X)
        labels, K = km.labels_, km.n_clusters_
        basis = BasisPolicySet([
            behavior_clone(dataset.subset(np.flatnonzero(labels == k)), env.n_states,
                           env.n_actions, cfg.bc_smoothing)
            for k in range(K)])
    labeled = label_dataset(dataset, labels, K)
    os.makedirs(cfg.out, exist_ok=True)
    write_labeled_csv(os.path.join(cfg.out, LABELED), labeled)
    _dump_json(os.path.join(cfg.out, BASIS), basis.to_dict())
    info["n_clusters"] = K
    oracle_path = os.path.join(cfg.out, ORACLE)
    if os.path.exists(oracle_path):
        info["agreement"] = agreement(labels, read_oracle(oracle_path))
    return labeled, basis, info


def _load_basis(cfg):
    with open(os.path.join(cfg.out, BASIS), encoding="utf-8") as fh:
        return BasisPolicySet.from_dict(json.load(fh))


def _population_stats(cfg, env, basis):
    if cfg.basis != "actions":
        raise ValueError("population statistics need basis='actions'")
    return exact_observational_stats(env, _expert(cfg, env).context_to_basis, basis)


@_stage("bounds")
def cmd_bounds(cfg, labeled=None, basis=None):
    """Observational statistics and both bound rules; writes the bounds table."""
    env = cfg.make_env()
    if labeled is None:
        labeled = read_labeled_csv(os.path.join(cfg.out, LABELED))
    if basis is None:
        basis = _load_basis(cfg)
    if labeled.n_clusters < len(basis):
        # an arm nobody in the dataset followed still gets a (vacuous) bound
        labeled = LabeledDataset(labeled.labels, labeled.returns, len(basis))
    if cfg.statistics == "population":
        stats = _population_stats(cfg, env, basis)
    else:
        stats = empirical_stats(labeled)
    support = ValueSupport(*env.value_support)
    both = [natural_bounds(stats, support, cfg.widen_delta),
            expert_optimal_bounds(stats, support, cfg.widen_delta)]
    write_bounds_csv(os.path.join(cfg.out, BOUNDS), stats, both)
    chosen = both[0] if cfg.bound_rule == "natural" else both[1]
    return stats, chosen, both


def _oracle_report(env, basis, stats, bounds, expert=None, contexts=None, labels=None):
    """Oracle-side diagnostics: do-values, containment, ranking, hypothesis."""
    do = np.array([exact_do_value(env, mu) for mu in basis])
    rep = {
        "do_values": do.tolist(),
        "do_optimal_arm": int(do.argmax()),
        "empirical_best_arm": int(np.nanargmax(stats.mean_v)),
        "bounds_contain_do_values": bounds.contains(do).tolist(),
    }
    rep["ranking_contradicts"] = rep["do_optimal_arm"] != rep["empirical_best_arm"]
    if contexts is not None and labels is not None:
        K = len(basis)
        table = np.zeros((env.n_contexts, K))
        for u, m in zip(contexts, labels):
            table[u, m] += 1
        table /= np.maximum(table.sum(axis=1, keepdims=True), 1)
        rep["cluster_context_agreement"] = agreement(labels, contexts)
        rep["expert_optimality_holds"] = check_expert_optimality(env, basis, table)
    elif expert is not None:
        rep["expert_optimality_holds"] = check_expert_optimality(env, basis, expert)
    return rep


def _run_trial(env, basis, bounds, dataset, config, smoothing, seed):
    # all methods share the trial seed, so episode e sees the same context
    return [
        run_causal_ucb(env, basis, bounds, config, seed),
        run_vanilla_ucb(env, basis, config, seed),
        run_direct_imitation(env, dataset, config, seed, smoothing),
    ]


@_stage("run")
def cmd_run(cfg, basis=None, bounds=None, dataset=None, trials=None, extra_summary=None):
    """Run all three methods for every trial; write per-run CSVs, curves and summary."""
    env = cfg.make_env()
    if basis is None:
        basis = _load_basis(cfg)
    if bounds is None:
        bounds = read_bounds_csv(os.path.join(cfg.out, BOUNDS), cfg.bound_rule)
    if dataset is None:
        dataset = read_dataset(os.path.join(cfg.out, DATASET), env.n_states, env.n_actions)
    trials = int(trials or cfg.trials)
    run_dir = os.path.join(cfg.out, "runs")
    os.makedirs(run_dir, exist_ok=True)

    do = np.array([exact_do_value(env, mu) for mu in basis])
    best = float(do.max())
    with_bounds = cfg.bandit_config(True)
    runs = []
    jobs = [(env, basis, bounds, dataset, with_bounds, cfg.bc_smoothing,
             seed_from(substream(cfg.master_seed, "online", t))) for t in range(trials)]
    if cfg.n_jobs == 1 or trials == 1:
        per_trial = [_run_trial(*job) for job in jobs]
    else:
        workers = None if cfg.n_jobs == -1 else cfg.n_jobs
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(_run_trial, *zip(*jobs)))
    runs = []
    for t, trial_runs in enumerate(per_trial):
        for r in trial_runs:
            r.to_csv(os.path.join(run_dir, f"{r.method}_trial{t}.csv"), best)
        runs.extend(trial_runs)
    curves = aggregate(runs)
    curves.to_csv(os.path.join(cfg.out, CURVES))

    summary = dict(extra_summary or {})
    summary["basis_do_values"] = do.tolist()
    summary["trials"] = trials
    summary["methods"] = {}
    for m in METHODS:
        ms = [r for r in runs if r.method == m]
        entry = {"terminal_mean": curves.terminal_mean(m),
                 "terminal_std": curves.terminal_std(m),
                 "recommended": [r.recommended for r in ms]}
        if m != "direct_imitation":
            entry["mean_pulls_per_arm"] = np.mean([r.pulls for r in ms], axis=0).tolist()
            entry["mean_suboptimal_pulls"] = float(np.mean(
                [len(r) - r.arm_pulls(int(do.argmax())) for r in ms]))
        if not with_bounds.improvement:
            entry["mean_final_regret"] = float(np.mean(
                [cumulative_regret(r, best)[-1] for r in ms]))
        summary["methods"][m] = entry
    _dump_json(os.path.join(cfg.out, SUMMARY), summary)
    return runs, curves, summary


def cmd_pipeline(cfg, with_oracle=False):
    """gen-expert -> cluster -> bounds -> run, all in one process."""
    dataset, oracle, gen_summary = cmd_gen_expert(cfg, with_oracle)
    labeled, basis, cl_info = cmd_cluster(cfg, dataset)
    stats, bounds, both = cmd_bounds(cfg, labeled, basis)
    env = cfg.make_env()
    contexts = oracle.contexts
    extra = {"expert": gen_summary, "clustering": cl_info,
             "stats": {"p_hat": stats.p_mu.tolist(), "mean_v_hat": stats.mean_v.tolist()},
             "bounds": {b.rule: {"lower": b.lower.tolist(), "upper": b.upper.tolist()}
                        for b in both},
             "oracle": _oracle_report(env, basis, stats, bounds, contexts=contexts,
                                      labels=labeled.labels)}
    if cfg.statistics == "population":
        extra["oracle"]["expert_optimality_holds"] = check_expert_optimality(
            env, basis, _expert(cfg, env))
    runs, curves, summary = cmd_run(cfg, basis, bounds, dataset, extra_summary=extra)
    return {"dataset": dataset, "oracle": oracle, "labeled": labeled, "basis": basis,
            "stats": stats, "bounds": bounds, "all_bounds": both, "runs": runs,
            "curves": curves, "summary": summary}


# --- the 2-arm example ---------------------------------------------------------

def example1_report(softening=0.2):
    """Analytic quantities of the confounded 2-arm bandit, by enumeration."""
    env = load_env("example1")
    expert = ExpertModel.train(env, softening=softening)
    basis = BasisPolicySet([TabularSoftmaxPolicy.deterministic([a], 2) for a in range(2)])
    pu = env.context_dist.probs
    joint = {}
    for u in range(env.n_contexts):
        pa = expert.policy(u).action_probs()[0]
        for a in range(env.n_actions):
            r = float(env.reward_table[u, a])
            joint[(a, r)] = joint.get((a, r), 0.0) + pu[u] * pa[a]
    stats = exact_observational_stats(env, expert.context_to_basis, basis)
    support = ValueSupport(*env.value_support)
    nat = natural_bounds(stats, support)
    opt = expert_optimal_bounds(stats, support)
    do = [exact_do_value(env, mu) for mu in basis]
    di = mixture_policy(basis, stats.p_mu)
    return {
        "reward_table": env.reward_table.tolist(),
        "context_probs": pu.tolist(),
        "expert_action_probs": [expert.policy(u).action_probs()[0].tolist()
                                for u in range(env.n_contexts)],
        "joint_action_reward": sorted([[a, r, p] for (a, r), p in joint.items()]),
        "observational_means": stats.mean_v.tolist(),
        "p_mu": stats.p_mu.tolist(),
        "do_values": do,
        "direct_imitation_probs": di.action_probs()[0].tolist(),
        "direct_imitation_value": exact_do_value(env, di),
        "natural_bounds": [nat.lower.tolist(), nat.upper.tolist()],
        "expert_optimal_bounds": [opt.lower.tolist(), opt.upper.tolist()],
        "expert_optimality_holds": check_expert_optimality(env, basis, expert),
        "selection": {
            "empirical_best": int(np.argmax(stats.mean_v)),
            "do_optimal": int(np.argmax(do)),
        },
    }


def format_example1(rep):
    lines = [
        "2-arm confounded bandit, P(U=0) = %.2f" % rep["context_probs"][0],
        "",
        "reward r[u][a]:      a=0    a=1",
    ]
    for u, row in enumerate(rep["reward_table"]):
        lines.append(f"  u={u}            {row[0]:6g} {row[1]:6g}")
    lines.append("observational P(a, r):")
    for a, r, p in rep["joint_action_reward"]:
        lines.append(f"  a={a} r={r:g}: {p:.4g}")
    lines += [
        "",
        "arm  E[V|mu]  E[V|do(mu)]  natural [l, h]       expert-optimal [l, h]",
    ]
    for k in range(2):
        nl, nh = rep["natural_bounds"][0][k], rep["natural_bounds"][1][k]
        ol, oh = rep["expert_optimal_bounds"][0][k], rep["expert_optimal_bounds"][1][k]
        lines.append(f"{k:>3}  {rep['observational_means'][k]:7g}  {rep['do_values'][k]:11g}  "
                     f"[{nl:g}, {nh:g}]{'':8}[{ol:g}, {oh:g}]")
    di = rep["direct_imitation_probs"]
    lines += [
        "",
        f"direct imitation policy: pi(a=0) = {di[0]:g}, pi(a=1) = {di[1]:g} "
        f"(value {rep['direct_imitation_value']:g})",
        f"empirical-best arm: {rep['selection']['empirical_best']}   "
        f"do-optimal arm: {rep['selection']['do_optimal']}",
        f"expert-optimality hypothesis holds: {rep['expert_optimality_holds']}",
    ]
    return "\n".join(lines)


def cmd_example1(out=None):
    rep = example1_report()
    if out:
        os.makedirs(out, exist_ok=True)
        _dump_json(os.path.join(out, "example1.json"), rep)
        with open(os.path.join(out, "example1.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm", "mean_v_obs", "do_value", "l_natural", "h_natural",
                        "l_expert_optimal", "h_expert_optimal", "pi_di"])
            for k in range(2):
                w.writerow([k, repr(rep["observational_means"][k]), repr(rep["do_values"][k]),
                            repr(rep["natural_bounds"][0][k]), repr(rep["natural_bounds"][1][k]),
                            repr(rep["expert_optimal_bounds"][0][k]),
                            repr(rep["expert_optimal_bounds"][1][k]),
                            repr(rep["direct_imitation_probs"][k])])
    return rep
