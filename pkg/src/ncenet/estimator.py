"""scikit-learn style wrapper: ``fit`` is the base session, ``partial_fit`` one incremental session."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bckd import BckdConfig
from .evaluation import KmeansConfig, hungarian_acc, kmeans_cluster
from .model import ModelConfig, forward, snapshot_teacher
from .ncrl import NcrlConfig
from .objectives import BaseLossConfig, BlendConfig
from .training import TrainConfig, fit_base, fit_incremental


class NCENet(TransformerMixin, ClusterMixin, BaseEstimator):
    """Continual category discovery on precomputed embeddings.

    ``fit(X, y)`` trains on a labelled base session (``y == -1`` marks
    unlabelled rows). Each ``partial_fit(X)`` is one unlabelled incremental
    session distilled from a frozen copy of the current model; labels are not
    accepted there. ``predict`` clusters with k-means, by default into every
    class seen so far (base classes plus ``n_novel`` per incremental call).
    """

    def __init__(
        self,
        encoder_dims=(32, 32),
        head_hidden_dim=64,
        head_output_dim=128,
        trainable_scope="all",
        base_epochs=30,
        base_lr=0.2,
        base_batch_size=128,
        incremental_epochs=30,
        incremental_lr=0.1,
        incremental_batch_size=32,
        augment_sigma=0.3,
        beta=0.35,
        tau_r=0.1,
        lambda_b=0.1,
        k=5,
        tau=0.07,
        tau_k=0.04,
        kmeans_restarts=10,
        random_state=0,
    ):
        self.encoder_dims = encoder_dims
        self.head_hidden_dim = head_hidden_dim
        self.head_output_dim = head_output_dim
        self.trainable_scope = trainable_scope
        self.base_epochs = base_epochs
        self.base_lr = base_lr
        self.base_batch_size = base_batch_size
        self.incremental_epochs = incremental_epochs
        self.incremental_lr = incremental_lr
        self.incremental_batch_size = incremental_batch_size
        self.augment_sigma = augment_sigma
        self.beta = beta
        self.tau_r = tau_r
        self.lambda_b = lambda_b
        self.k = k
        self.tau = tau
        self.tau_k = tau_k
        self.kmeans_restarts = kmeans_restarts
        self.random_state = random_state

    def _train_config(self, epochs, lr, batch_size, seed):
        return TrainConfig(
            batch_size=batch_size,
            epochs=epochs,
            lr_init=lr,
            augment_sigma=self.augment_sigma,
            seed=seed,
            base_loss=BaseLossConfig(tau_r=self.tau_r, beta=self.beta),
            blend=BlendConfig(lambda_b=self.lambda_b),
            ncrl=NcrlConfig(k=self.k, tau=self.tau),
            bckd=BckdConfig(tau_k=self.tau_k),
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        dims = tuple(int(d) for d in self.encoder_dims)
        self.model_config_ = ModelConfig(
            input_dim=X.shape[1],
            encoder_dims=dims,
            feature_dim=dims[-1],
            head_hidden_dim=self.head_hidden_dim,
            head_output_dim=self.head_output_dim,
            trainable_scope=self.trainable_scope,
            seed=self.random_state,
        )
        cfg = self._train_config(self.base_epochs, self.base_lr, self.base_batch_size, self.random_state)
        result = fit_base(X, y, self.model_config_, cfg)
        self.state_ = result.state
        self.classes_ = np.unique(y[y >= 0])
        self.n_clusters_ = len(self.classes_)
        self.n_sessions_ = 1
        self.loss_trace_ = [result.trace]
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y=None, n_novel=0):
        """One incremental session. ``y`` must be None: the session is unlabelled."""
        check_is_fitted(self, "state_")
        if y is not None:
            raise ValueError("incremental sessions are unlabelled; pass y=None")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        cfg = self._train_config(
            self.incremental_epochs, self.incremental_lr, self.incremental_batch_size, self.random_state
        )
        teacher = snapshot_teacher(self.state_, self.n_sessions_ - 1)
        result = fit_incremental(X, self.n_sessions_, self.state_, teacher, cfg)
        self.state_ = result.state
        self.n_clusters_ += int(n_novel)
        self.n_sessions_ += 1
        self.loss_trace_.append(result.trace)
        return self

    def transform(self, X):
        """Encoder features (the representation that gets clustered)."""
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.state_, X, "features_only")[0]

    def predict(self, X, n_clusters=None):
        feats = self.transform(X)
        K = self.n_clusters_ if n_clusters is None else int(n_clusters)
        return kmeans_cluster(feats, KmeansConfig(K=K, restarts=self.kmeans_restarts, seed=self.random_state)).labels

    def fit_predict(self, X, y=None, **kwargs):
        if y is None:
            raise ValueError("fit needs base-session labels (-1 for unlabelled rows)")
        return self.fit(X, y).predict(X)

    def score(self, X, y):
        """Hungarian-matched clustering accuracy."""
        return hungarian_acc(np.asarray(y), self.predict(X))[0]
