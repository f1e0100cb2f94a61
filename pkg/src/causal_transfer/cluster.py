"""Trajectory featurisation, cluster-count selection and K-means.

Turns the context-free dataset into the labelled form ``{(m_i, V_i)}``:
each trajectory becomes a normalised state-action visitation histogram,
the number of clusters is read off the singular-value spectrum, and Lloyd's
algorithm assigns every trajectory to a behaviour mode.
"""
import csv
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._rng import seed_from, substream
from ._validation import check_labels


def featurize(trajectory, n_states, n_actions):
    """Normalised (state, action) visitation frequencies, flattened row-major."""
    states = np.asarray(trajectory.states, dtype=int)
    actions = np.asarray(trajectory.actions, dtype=int)
    if states.size == 0:
        raise ValueError("cannot featurize an empty trajectory")
    counts = np.bincount(states * n_actions + actions, minlength=n_states * n_actions)
    return counts / states.size


class TrajectoryFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of trajectories -> (n, n_states * n_actions)."""

    def __init__(self, n_states, n_actions):
        self.n_states = n_states
        self.n_actions = n_actions

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.array([featurize(t, self.n_states, self.n_actions) for t in X])


def explained_variance(X):
    """Fraction of the (uncentred) sum of squares carried by each component."""
    X = np.asarray(X, dtype=float)
    s = np.linalg.svd(X, compute_uv=False)
    total = float((s ** 2).sum())
    if total == 0.0:
        return np.zeros_like(s)
    return s ** 2 / total


def select_k(features, k_max, threshold=0.9):
    """Smallest number of principal components explaining ``threshold`` of the
    variance, clipped to ``[1, k_max]``.

    The decomposition is not mean-centred: visitation histograms of K
    distinct behaviour modes span K directions, whereas centring would
    remove one of them and report K - 1.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("select_k needs at least 2 feature vectors")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if np.allclose(X, X[0]):
        return 1
    ratio = explained_variance(X)
    k = int(np.searchsorted(np.cumsum(ratio), threshold - 1e-12) + 1)
    return max(1, min(k, int(k_max)))


def canonicalize_labels(labels):
    """Relabel clusters in order of first appearance (point 0 gets label 0)."""
    labels = np.asarray(labels)
    mapping = {}
    out = np.empty(labels.size, dtype=int)
    for i, lab in enumerate(labels.tolist()):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def _assign(X, centroids):
    d = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d.argmin(axis=1)
    return labels, d


def _lloyd(X, init, max_iter=200, tol=1e-9):
    """Lloyd iterations from ``init``; returns labels, centroids, wcss history."""
    centroids = init.copy()
    K = centroids.shape[0]
    labels, d = _assign(X, centroids)
    history = [float(d[np.arange(X.shape[0]), labels].sum())]
    for _ in range(max_iter):
        new = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = X[members].mean(axis=0)
        # an empty cluster takes over the point farthest from its centroid
        for k in range(K):
            if not np.any(labels == k):
                dist = d[np.arange(X.shape[0]), labels]
                far = int(dist.argmax())
                new[k] = X[far]
                labels[far] = k
                d = ((X[:, None, :] - new[None, :, :]) ** 2).sum(axis=2)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d = _assign(X, centroids)
        history.append(float(d[np.arange(X.shape[0]), labels].sum()))
        if shift < tol:
            break
    return labels, centroids, history


def kmeans(features, n_clusters, random_state=0, restarts=10, max_iter=200, tol=1e-9):
    """Best-of-``restarts`` Lloyd's algorithm with Forgy initialisation.

    Returns
    -------
    labels : ndarray of int
        Canonicalised so that the cluster holding point 0 is cluster 0.
    centroids : ndarray of shape (n_clusters, n_features)
        Reordered to match ``labels``.
    wcss : float
        Within-cluster sum of squares of the chosen restart.
    history : list of float
        WCSS after each Lloyd iteration of the chosen restart.
    """
    X = np.asarray(features, dtype=float)
    K = int(n_clusters)
    if K < 1:
        raise ValueError("n_clusters must be >= 1")
    if K > X.shape[0]:
        raise ValueError(f"n_clusters={K} exceeds the number of points ({X.shape[0]})")
    seed = seed_from(random_state)
    best = None
    for r in range(int(restarts)):
        rng = substream(seed, "kmeans", r)
        init = X[rng.choice(X.shape[0], size=K, replace=False)]
        labels, centroids, history = _lloyd(X, init, max_iter, tol)
        # strict '<' keeps the lowest restart index on ties
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centroids, history)
    labels, centroids, history = best
    canon = canonicalize_labels(labels)
    order = np.empty(K, dtype=int)
    for old, new in zip(labels, canon):
        order[new] = old
    # K-means never leaves a cluster empty, so every canonical id is present
    return canon, centroids[order], history[-1], history


class TrajectoryKMeans(ClusterMixin, BaseEstimator):
    """K-means on visitation histograms, choosing K from the spectrum when
    ``n_clusters="auto"``.

    Parameters
    ----------
    n_clusters : int or "auto"
    k_max : int
        Cap for automatic selection.
    variance_threshold : float
    restarts : int
    random_state : int
    """

    def __init__(self, n_clusters="auto", k_max=4, variance_threshold=0.9, restarts=10,
                 random_state=0):
        self.n_clusters = n_clusters
        self.k_max = k_max
        self.variance_threshold = variance_threshold
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if self.n_clusters == "auto":
            self.n_clusters_ = select_k(X, self.k_max, self.variance_threshold)
        else:
            self.n_clusters_ = int(self.n_clusters)
        self.labels_, self.cluster_centers_, self.inertia_, self.inertia_history_ = kmeans(
            X, self.n_clusters_, self.random_state, self.restarts)
        return self

    def predict(self, X):
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("TrajectoryKMeans is not fitted yet")
        labels, _ = _assign(np.asarray(X, dtype=float), self.cluster_centers_)
        return labels


@dataclass
class LabeledDataset:
    """Pairs ``(m_i, V_i)``: behaviour-mode label and return per trajectory."""

    labels: np.ndarray
    returns: np.ndarray
    n_clusters: int

    def __post_init__(self):
        self.n_clusters = int(self.n_clusters)
        self.labels = check_labels(self.labels, self.n_clusters)
        self.returns = np.asarray(self.returns, dtype=float)
        if self.labels.size == 0:
            raise ValueError("labelled dataset is empty")
        if self.labels.shape != self.returns.shape:
            raise ValueError("labels and returns must have the same length")

    def __len__(self):
        return self.labels.size

    def pairs(self):
        return list(zip(self.labels.tolist(), self.returns.tolist()))


def label_dataset(dataset, labels, n_clusters=None):
    """Attach cluster labels to the recorded returns of ``dataset``."""
    labels = np.asarray(labels)
    returns = np.array([t.ret for t in dataset], dtype=float)
    if labels.size != returns.size:
        raise ValueError(f"{labels.size} labels for {returns.size} trajectories")
    if n_clusters is None:
        n_clusters = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(labels, returns, n_clusters)


def write_labeled_csv(path, labeled):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "m", "V"])
        for i, (m, v) in enumerate(labeled.pairs()):
            w.writerow([i, m, repr(float(v))])


def read_labeled_csv(path, n_clusters=None):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["traj_id"]))
    labels = np.array([int(r["m"]) for r in rows], dtype=int)
    returns = np.array([float(r["V"]) for r in rows])
    if n_clusters is None:
        n_clusters = int(labels.max()) + 1
    return LabeledDataset(labels, returns, n_clusters)


def agreement(labels, contexts):
    """Best-permutation agreement between cluster labels and true contexts."""
    labels = np.asarray(labels)
    contexts = np.asarray(contexts)
    ids = np.unique(labels)
    ctx = np.unique(contexts)
    best = 0.0
    for perm in permutations(ctx, min(len(ids), len(ctx))):
        mapping = dict(zip(ids, perm))
        hit = np.mean([mapping.get(lab, -1) == c for lab, c in zip(labels, contexts)])
        best = max(best, float(hit))
    return best
