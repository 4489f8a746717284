"""scikit-learn compatible wrapper around the CBAM classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import InvalidConfig, InvalidLabel
from .model import BackboneConfig, ConvBlock, build_model, default_freeze
from .training import TrainConfig, fit, restore

DEFAULT_BLOCKS = ((8, 3, 1, "max2"), (16, 3, 1, "max2"))


class CBAMClassifier(ClassifierMixin, BaseEstimator):
    """Binary image classifier: small CNN backbone, CBAM, dense head.

    Parameters
    ----------
    blocks : sequence of (out_channels, kernel_size, stride, pool)
        Backbone conv blocks; ``pool`` is ``"max2"`` or ``"none"``.
    reduction_ratio : int
        Channel-attention bottleneck factor; must divide the last block's channels.
    freeze : {"default", "none", "all"}
        ``"default"`` freezes every backbone block except the last two.
    learning_rate, batch_size, epochs, beta1, beta2, epsilon :
        Adam and loop settings.
    threshold : float
        Probability at or above which ``predict`` returns class 1.
    random_state : int
        Seeds initialisation and per-epoch shuffling.

    Input ``X`` has shape ``(n_samples, 3, H, W)`` with values in [0, 1];
    ``y`` holds 0 (Others) or 1 (Monkeypox).
    """

    def __init__(self, blocks=DEFAULT_BLOCKS, reduction_ratio=8, freeze="default", learning_rate=0.001,
                 batch_size=32, epochs=30, beta1=0.9, beta2=0.999, epsilon=1e-8, threshold=0.5,
                 random_state=0):
        self.blocks = blocks
        self.reduction_ratio = reduction_ratio
        self.freeze = freeze
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.threshold = threshold
        self.random_state = random_state

    def _validate_X(self, X, reset=False):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != 3:
            raise InvalidConfig(f"X must have shape (n_samples, 3, H, W), got {X.shape}")
        if not reset and X.shape[1:] != self.model_.config.input_shape:
            raise InvalidConfig(f"X images are {X.shape[1:]}, model was fitted on {self.model_.config.input_shape}")
        return X

    def _validate_y(self, y):
        y = np.asarray(y, dtype=np.float64)
        if not np.isin(y, (0.0, 1.0)).all():
            raise InvalidLabel("labels must be 0 or 1")
        return y

    def fit(self, X, y, eval_set=None):
        """Train on ``(X, y)`` and keep the weights with the lowest monitoring loss.

        ``eval_set=(X_val, y_val)`` is the checkpoint-monitoring set; without
        it the training data is monitored.
        """
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._validate_X(X, reset=True)
        y = self._validate_y(y)
        if eval_set is None:
            Xv, yv = X, y
        else:
            Xv = self._validate_X(eval_set[0], reset=True)
            yv = self._validate_y(eval_set[1])
        cfg = BackboneConfig(tuple(ConvBlock(*b) for b in self.blocks), X.shape[1:])
        if self.freeze == "default":
            frozen = default_freeze(cfg)
        elif self.freeze == "none":
            frozen = ()
        elif self.freeze == "all":
            frozen = None
        else:
            raise InvalidConfig(f"freeze must be 'default', 'none' or 'all', got {self.freeze!r}")
        model = build_model(cfg, self.reduction_ratio, seed=self.random_state,
                            freeze=() if frozen is None else frozen)
        if frozen is None:
            model.freeze_all()
        train_cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.beta1, self.beta2,
                                self.epsilon, self.random_state)
        self.history_, self.checkpoint_ = fit(model, (X, y), (Xv, yv), train_cfg)
        self.model_ = restore(model, self.checkpoint_)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_X(X)
        p = self.model_.predict_proba(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.three_d_array = True
        return tags
