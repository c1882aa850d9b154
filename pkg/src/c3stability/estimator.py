"""scikit-learn compatible wrapper around the convolutional stability regressor."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .core import CHANNEL_ORDER
from .validation import check_frames, check_targets


class StabilityRegressor(RegressorMixin, BaseEstimator):
    """Predict the normalised stability score from (n, 8, 200) IMU + velocity frames.

    Parameters
    ----------
    epochs, batch_size, learning_rate, beta1, beta2, epsilon
        Adam minibatch recipe; defaults are 100 epochs, batch 32, lr 1e-4.
    dropout : float
        Dropout probability before the first dense layer.
    init_seed, shuffle_seed, dropout_seed : int
        Seeds for weight init, epoch shuffling and dropout masks.
    standardize : bool
        Scale each channel by its training mean and standard deviation.
    channels : sequence of int or None
        Rows of the frame to use; ``(0, 1, 2, 3, 4, 5)`` drops the velocity rows.
    validation_fraction : float
        Share of the training data held out for the loss curve when ``fit`` is
        not given an explicit validation set.
    """

    def __init__(self, epochs=100, batch_size=32, learning_rate=1e-4, beta1=0.9,
                 beta2=0.999, epsilon=1e-8, dropout=0.5, init_seed=0, shuffle_seed=0,
                 dropout_seed=0, standardize=True, channels=None, validation_fraction=0.15):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.dropout = dropout
        self.init_seed = init_seed
        self.shuffle_seed = shuffle_seed
        self.dropout_seed = dropout_seed
        self.standardize = standardize
        self.channels = channels
        self.validation_fraction = validation_fraction

    def _train_config(self) -> M.TrainConfig:
        return M.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, beta1=self.beta1,
                             beta2=self.beta2, epsilon=self.epsilon,
                             shuffle_seed=self.shuffle_seed, init_seed=self.init_seed,
                             dropout_seed=self.dropout_seed)

    def fit(self, X, y, X_val=None, y_val=None, progress=None):
        X = check_frames(X)
        y = check_targets(y, X)
        if X_val is None:
            X, X_val, y, y_val = train_test_split(
                X, y, test_size=self.validation_fraction, random_state=self.shuffle_seed)
        else:
            X_val = check_frames(X_val)
            y_val = check_targets(y_val, X_val)
        n_in = X.shape[1] if self.channels is None else len(self.channels)
        arch = M.default_architecture(n_in, self.dropout)
        self.checkpoint_ = M.train(X, y, X_val, y_val, arch, self._train_config(),
                                   standardize=self.standardize, channels=self.channels,
                                   progress=progress)
        self.history_ = self.checkpoint_.curve
        self.n_channels_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_frames(X, self.n_channels_in_)
        return M.predict(self.checkpoint_, X)

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return M.save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, ckpt: M.ModelCheckpoint) -> "StabilityRegressor":
        cfg = ckpt.train_config
        dropout = next((l["p"] for l in ckpt.arch.layers if l["type"] == "dropout"), 0.0)
        est = cls(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                  beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon, dropout=dropout,
                  init_seed=cfg.init_seed, shuffle_seed=cfg.shuffle_seed,
                  dropout_seed=cfg.dropout_seed, standardize=ckpt.input_mean is not None,
                  channels=ckpt.channels)
        est.checkpoint_ = ckpt
        est.history_ = ckpt.curve
        # a channel subset indexes into full 8-row frames
        est.n_channels_in_ = (ckpt.arch.input_channels if ckpt.channels is None
                              else len(CHANNEL_ORDER))
        return est

    @classmethod
    def load(cls, path) -> "StabilityRegressor":
        return cls.from_checkpoint(M.load_checkpoint(path))
