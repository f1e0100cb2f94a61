import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causal_transfer.cluster import (LabeledDataset, TrajectoryFeaturizer, TrajectoryKMeans,
                                     _lloyd, agreement, canonicalize_labels, featurize, kmeans,
                                     label_dataset, read_labeled_csv, select_k,
                                     write_labeled_csv)
from causal_transfer.expert import Trajectory, generate_dataset


@pytest.mark.parametrize("states, actions, n_s, n_a, expected", [
    ([0], [1], 1, 2, [0, 1]),
    ([0, 0], [0, 0], 1, 2, [1, 0]),
    ([0, 1], [0, 1], 2, 2, [0.5, 0, 0, 0.5]),
])
def test_featurize(states, actions, n_s, n_a, expected):
    np.testing.assert_allclose(featurize(Trajectory(states, actions, 0.0), n_s, n_a), expected)


def test_featurize_empty():
    with pytest.raises(ValueError):
        featurize(Trajectory([], [], 0.0), 1, 2)


def two_clouds(seed, n=100, sigma=0.01):
    rng = np.random.default_rng(seed)
    a = np.array([1.0, 0.0, 0.0, 0.0]) + sigma * rng.normal(size=(n, 4))
    b = np.array([0.0, 0.0, 1.0, 0.0]) + sigma * rng.normal(size=(n, 4))
    return np.vstack([a, b])


@pytest.mark.parametrize("seed", range(5))
def test_select_k_two_clouds(seed):
    assert select_k(two_clouds(seed), k_max=4) == 2


def test_select_k_identical_and_capped():
    assert select_k(np.ones((10, 3)), 4) == 1
    assert select_k(two_clouds(0), k_max=1) == 1


def test_kmeans_two_points():
    labels, _, wcss, _ = kmeans(np.array([[0.0, 0.0], [1.0, 1.0]]), 2)
    assert labels.tolist() == [0, 1] and wcss == 0.0


def test_kmeans_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)


def test_kmeans_recovers_action_partition(bandit, bandit_expert):
    data, _ = generate_dataset(bandit, bandit_expert, 200, random_state=4)
    X = TrajectoryFeaturizer(1, 2).transform(data)
    labels, *_ = kmeans(X, 2)
    acts = np.array([t.actions[0] for t in data])
    assert agreement(labels, acts) == 1.0


def test_track_clusters_match_contexts(track, track_expert):
    data, oracle = generate_dataset(track, track_expert, 300, random_state=0)
    X = TrajectoryFeaturizer(track.n_states, track.n_actions).transform(data)
    km = TrajectoryKMeans(random_state=0).fit(X)
    assert km.n_clusters_ == 2
    assert agreement(km.labels_, oracle.contexts) >= 0.95


def test_disjoint_supports_give_exact_partition(track):
    from causal_transfer.expert import ExpertModel
    expert = ExpertModel.train(track, softening=0.0)
    data, oracle = generate_dataset(track, expert, 60, random_state=2)
    X = TrajectoryFeaturizer(track.n_states, track.n_actions).transform(data)
    labels, *_ = kmeans(X, 2)
    assert agreement(labels, oracle.contexts) == 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4))
def test_lloyd_objective_non_increasing(seed, k):
    X = np.random.default_rng(seed).normal(size=(30, 3))
    init = X[:k]
    _, _, hist = _lloyd(X, init)
    assert np.all(np.diff(hist) <= 1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_canonical_labels_stable_under_shuffle(seed):
    rng = np.random.default_rng(seed)
    X = two_clouds(seed, n=15, sigma=0.05)
    perm = rng.permutation(len(X))
    a, *_ = kmeans(X, 2, random_state=1)
    b, *_ = kmeans(X[perm], 2, random_state=1)
    # same partition, canonical names follow the first point
    assert agreement(a[perm], b) == 1.0
    assert b[0] == 0 and a[0] == 0


def test_canonicalize_labels():
    assert canonicalize_labels([2, 2, 0, 1, 0]).tolist() == [0, 0, 1, 2, 1]


def test_estimator_api():
    km = TrajectoryKMeans(n_clusters=2, restarts=3)
    assert km.get_params()["restarts"] == 3
    km.fit(two_clouds(0))
    assert set(km.predict(two_clouds(1))) == {0, 1}


class TestLabeledDataset:
    def test_pairs(self):
        lab = LabeledDataset([0, 1], [11.0, 3.0], 2)
        assert lab.pairs() == [(0, 11.0), (1, 3.0)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset([], [], 2)

    def test_length_mismatch(self, track, track_expert):
        data, _ = generate_dataset(track, track_expert, 5)
        with pytest.raises(ValueError):
            label_dataset(data, [0, 1])

    def test_full_size(self, track, track_expert):
        data, _ = generate_dataset(track, track_expert, 300)
        assert len(label_dataset(data, np.zeros(300, dtype=int))) == 300

    def test_csv_roundtrip(self, tmp_path):
        lab = LabeledDataset([0, 1, 1], [0.1, -2.5, 1e-17], 2)
        write_labeled_csv(tmp_path / "l.csv", lab)
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "traj_id,m,V"
        back = read_labeled_csv(tmp_path / "l.csv")
        np.testing.assert_array_equal(back.returns, lab.returns)
        np.testing.assert_array_equal(back.labels, lab.labels)
