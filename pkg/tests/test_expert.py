import numpy as np
import pytest

from causal_transfer.env import ConfoundedBanditEnv, policy_value
from causal_transfer.expert import (ExpertDataset, ExpertModel, Trajectory, generate_dataset,
                                    read_dataset, read_oracle, soften, train_expert,
                                    value_iteration, write_dataset, write_oracle)


def test_bandit_expert_accuracy(bandit, bandit_expert):
    assert bandit_expert.policy(0).action_probs()[0, 1] == pytest.approx(0.9, abs=1e-12)
    assert bandit_expert.policy(1).action_probs()[0, 0] == pytest.approx(0.9, abs=1e-12)
    np.testing.assert_allclose(bandit_expert.context_to_basis, [[0.1, 0.9], [0.9, 0.1]])


@pytest.mark.parametrize("u", [0, 1])
def test_unsoftened_expert_is_optimal(track, u):
    v, _ = value_iteration(track, u)
    pol = train_expert(track, u, softening=0.0)
    start = track.reset(u, np.random.default_rng(0))
    assert policy_value(track, pol, u) == pytest.approx(v[start], abs=1e-9)


def test_softened_expert_within_ten_percent(track):
    opt = policy_value(track, train_expert(track, 1, 0.0), 1)
    soft = policy_value(track, train_expert(track, 1, 0.1), 1)
    assert abs(opt - soft) <= 0.1 * abs(opt)


@pytest.mark.parametrize("softening", [-0.1, 0.5, 1.0])
def test_softening_range(bandit, softening):
    with pytest.raises(ValueError):
        train_expert(bandit, 0, softening)


def test_soften_keeps_rows_normalised():
    p = soften(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), 0.3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p.min() == pytest.approx(0.1)


def test_gridworld_mixture_identity(track, track_expert):
    np.testing.assert_array_equal(track_expert.context_to_basis, np.eye(2))


def test_track_dataset_size_and_context_share(track, track_expert):
    data, oracle = generate_dataset(track, track_expert, 300, random_state=3)
    assert len(data) == 300
    share = np.mean(oracle.contexts == 0)
    # binomial 4-sigma band around 0.7
    assert abs(share - 0.7) <= 4 * np.sqrt(0.21 / 300)


def test_stripped_copy_matches_oracle(track, track_expert):
    data, oracle = generate_dataset(track, track_expert, 20, random_state=0)
    for a, b in zip(data, oracle):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        assert a.ret == b.ret and a.hidden_context is None
    with pytest.raises(ValueError):
        data.contexts


def test_single_context_dataset():
    env = ConfoundedBanditEnv([[1.0, 2.0], [3.0, 4.0]], [0.0, 1.0])
    expert = ExpertModel.train(env)
    _, oracle = generate_dataset(env, expert, 1)
    assert oracle.contexts.tolist() == [1]


def test_zero_trajectories_rejected(bandit, bandit_expert):
    with pytest.raises(ValueError):
        generate_dataset(bandit, bandit_expert, 0)


def test_joint_action_reward_distribution(bandit, bandit_expert):
    _, oracle = generate_dataset(bandit, bandit_expert, 100_000, random_state=1)
    acts = np.array([t.actions[0] for t in oracle])
    rets = oracle.returns
    table = {(0, 1.0): 0.05, (0, 11.0): 0.45, (1, 3.0): 0.45, (1, 10.0): 0.05}
    for (a, r), p in table.items():
        assert abs(np.mean((acts == a) & (rets == r)) - p) <= 0.005


def test_dataset_roundtrip_is_byte_stable(track, track_expert, tmp_path):
    data, oracle = generate_dataset(track, track_expert, 15, random_state=9)
    write_dataset(tmp_path / "a.jsonl", data)
    back = read_dataset(tmp_path / "a.jsonl", track.n_states, track.n_actions)
    write_dataset(tmp_path / "b.jsonl", back)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert "context" not in (tmp_path / "a.jsonl").read_text()
    write_oracle(tmp_path / "o.jsonl", oracle)
    np.testing.assert_array_equal(read_oracle(tmp_path / "o.jsonl"), oracle.contexts)


def test_same_seed_same_dataset(track, track_expert):
    a, _ = generate_dataset(track, track_expert, 10, random_state=5)
    b, _ = generate_dataset(track, track_expert, 10, random_state=5)
    assert [t.ret for t in a] == [t.ret for t in b]


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0, 1], [0], 1.0)
    with pytest.raises(ValueError):
        ExpertDataset([Trajectory([5], [0], 0.0)], n_states=2, n_actions=2)
