"""scikit-learn estimator over the compressed ViT forward pass."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numeric as nm
from .compress import CompressionSchedule
from .engine import (
    PRESETS,
    ModelConfig,
    ModelWeights,
    forward_tokens,
    model_forward,
    patch_embed,
)
from .exceptions import ConfigError
from .fileio import read_weights


def _resolve_config(model):
    if isinstance(model, ModelConfig):
        return model
    if isinstance(model, str):
        try:
            return PRESETS[model]
        except KeyError:
            raise ConfigError(f"unknown preset {model!r}") from None
    if isinstance(model, dict):
        return ModelConfig(**model)
    raise ConfigError(f"cannot build a ModelConfig from {type(model).__name__}")


class PPTClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """ViT classifier with adaptive token pruning and pooling.

    Nothing is learned: ``fit`` only validates the parameters and loads (or
    synthesizes) the weights. Inputs are already-normalized images of shape
    (n_samples, H, W, C).

    Parameters
    ----------
    model : str, dict or ModelConfig, default="deit-s"
        Preset name, ModelConfig fields, or a config instance.
    stages : sequence of (layer, r), default=((4, 50), (7, 50), (10, 50))
        Compression stages, 1-based layer index and tokens removed.
    tau : float, default=7e-5
        Score-variance threshold; a stage prunes when the variance exceeds it.
    mode : str, default="adaptive"
        One of adaptive, prune_only, pool_only, rule_based, random, inverted.
    weights : None, str or ModelWeights, default=None
        None draws synthetic weights from ``seed``; a string is a weight-file
        path.
    seed : int, default=0
        Seed for synthetic weights.

    The remaining parameters map one-to-one onto CompressionSchedule fields.
    """

    def __init__(
        self,
        model="deit-s",
        stages=((4, 50), (7, 50), (10, 50)),
        tau=7e-5,
        mode="adaptive",
        metric="score_variance",
        tau_sim=0.5,
        scoring="attention_times_vnorm",
        pooling="bsm",
        merge_reduction="size_weighted",
        budget="exact",
        random_seed=0,
        weights=None,
        seed=0,
        observe=False,
    ):
        self.model = model
        self.stages = stages
        self.tau = tau
        self.mode = mode
        self.metric = metric
        self.tau_sim = tau_sim
        self.scoring = scoring
        self.pooling = pooling
        self.merge_reduction = merge_reduction
        self.budget = budget
        self.random_seed = random_seed
        self.weights = weights
        self.seed = seed
        self.observe = observe

    def fit(self, X=None, y=None):
        self.config_ = _resolve_config(self.model)
        self.schedule_ = CompressionSchedule(
            stages=tuple(self.stages),
            tau=self.tau,
            mode=self.mode,
            metric=self.metric,
            tau_sim=self.tau_sim,
            scoring=self.scoring,
            pooling=self.pooling,
            merge_reduction=self.merge_reduction,
            budget=self.budget,
            random_seed=self.random_seed,
        )
        self.schedule_.validate(self.config_)
        if self.weights is None:
            self.weights_ = ModelWeights.synthetic(self.config_, self.seed)
        elif isinstance(self.weights, ModelWeights):
            self.weights_ = self.weights
        else:
            self.weights_ = read_weights(self.weights, self.config_)
        self.classes_ = np.arange(self.config_.num_classes)
        if X is not None:
            self._validate_images(X)
        return self

    def _validate_images(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_features=1)
        c = self.config_
        expected = (c.image_size, c.image_size, c.channels)
        if X.ndim != 4 or X.shape[1:] != expected:
            raise ValueError(f"expected images of shape (n, *{expected}), got {X.shape}")
        return X

    def trace(self, X):
        """Per-image TraceReports."""
        check_is_fitted(self, "weights_")
        X = self._validate_images(X)
        return [
            model_forward(img, self.weights_, self.config_, self.schedule_, self.observe)[1]
            for img in X
        ]

    def decision_function(self, X):
        return np.stack([t.logits for t in self.trace(X)])

    def predict_proba(self, X):
        return nm.row_softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        """Final-norm CLS features, shape (n_samples, dim)."""
        check_is_fitted(self, "weights_")
        X = self._validate_images(X)
        feats = []
        for img in X:
            batch = patch_embed(img, self.weights_, self.config_)
            feats.append(forward_tokens(batch, self.weights_, self.config_, self.schedule_)[1])
        return np.stack(feats)
