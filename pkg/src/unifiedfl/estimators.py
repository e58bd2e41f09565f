"""scikit-learn compatible wrappers around the graph network and clustering code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .clustering import cut_by_silhouette, cut_tree, pairwise_distances, silhouette, ward_agglomerate
from .data import kmeans
from .engine import AdamW, ClientState, SGD, _forward, _prepare_input, local_epoch, predict
from .model_graph import build_model_graph
from .roster import get_architecture
from .theta import init_theta, modulate

__all__ = ["GraphNetClassifier", "WardSilhouetteClustering", "KMeansClustering"]


class GraphNetClassifier(ClassifierMixin, BaseEstimator):
    """A roster backbone trained as a single model-graph client.

    Parameters
    ----------
    architecture : str
        Roster name such as ``"MLP_b"`` or ``"CNN_a"``.
    input_shape : tuple, optional
        Per-sample shape the flat rows of ``X`` are reshaped to; needed for
        convolutional backbones.
    epochs, lr, batch_size : training settings (AdamW with default betas).
    train_base : bool
        Train the base weights as well as the shared vector.
    """

    def __init__(self, architecture="MLP_a", input_shape=None, epochs=20, lr=1e-3, batch_size=32,
                 weight_decay=1e-2, optimizer="adamw", train_base=True, G_e=4, G_v=4, random_state=0):
        self.architecture = architecture
        self.input_shape = input_shape
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.train_base = train_base
        self.G_e = G_e
        self.G_v = G_v
        self.random_state = random_state

    def _shape(self, X):
        shape = tuple(self.input_shape) if self.input_shape is not None else (X.shape[1],)
        if int(np.prod(shape)) != X.shape[1]:
            raise ValueError(f"input_shape {shape} does not match {X.shape[1]} features")
        return shape

    def _make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr)
        return AdamW(lr=self.lr, weight_decay=self.weight_decay)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        shape = self._shape(X)
        spec = get_architecture(self.architecture, shape, max(len(self.classes_), 2))
        graph_seed, shuffle_seed = np.random.SeedSequence(self.random_state).generate_state(2)
        client = ClientState(
            client_id=0,
            graph=build_model_graph(spec, int(graph_seed), self.G_e, self.G_v),
            features=X.reshape((-1,) + shape),
            labels=y_idx,
            theta=init_theta(self.G_e, self.G_v),
            theta_optimizer=self._make_optimizer(),
            base_optimizer=self._make_optimizer() if self.train_base else None,
            rng=np.random.default_rng(int(shuffle_seed)),
            batch_size=self.batch_size,
            architecture=spec.name,
        )
        for _ in range(self.epochs):
            local_epoch(client, client.theta)
        self.graph_ = client.graph
        self.theta_ = client.theta
        self.loss_curve_ = list(client.losses)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        x = _prepare_input(self.graph_, X.reshape((-1,) + self._shape(X)))
        logits, _ = _forward(self.graph_, modulate(self.graph_, self.theta_), x)
        logits = logits[:, : len(self.classes_)]
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        idx = predict(self.graph_, self.theta_, X.reshape((-1,) + self._shape(X)))
        return self.classes_[np.minimum(idx, len(self.classes_) - 1)]


class WardSilhouetteClustering(ClusterMixin, BaseEstimator):
    """Ward agglomeration cut at the best-silhouette level (or at ``n_clusters``)."""

    def __init__(self, n_clusters=None, K_max=6):
        self.n_clusters = n_clusters
        self.K_max = K_max

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        D = pairwise_distances(list(X))
        self.tree_ = ward_agglomerate(D)
        if self.n_clusters is None:
            part = cut_by_silhouette(self.tree_, D, self.K_max)
            self.labels_ = np.asarray(part.assignment)
            self.silhouette_ = part.silhouette
        else:
            self.labels_ = cut_tree(self.tree_, self.n_clusters)
            k = self.labels_.max() + 1
            self.silhouette_ = silhouette(D, self.labels_) if 2 <= k <= len(X) - 1 else float("nan")
        self.n_clusters_ = int(self.labels_.max()) + 1
        return self


class KMeansClustering(ClusterMixin, BaseEstimator):
    """k-means++ seeded Lloyd iterations."""

    def __init__(self, n_clusters=2, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        res = kmeans(X, self.n_clusters, self.max_iter, self.random_state)
        self.labels_ = res.assignments
        self.cluster_centers_ = res.centers
        self.inertia_ = res.sse
        self.n_iter_ = res.iterations
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        d = ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)
