"""scikit-learn style wrapper around the continuous U-Net."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_masks
from .data import SegSample
from .metrics import binarize, dice
from .unet import TrainConfig, UNetConfig, build, train


class ContinuousUNetSegmenter(BaseEstimator):
    """Binary segmenter; ``fit(X, y)`` takes images ``[N,C,H,W]`` and masks ``[N,1,H,W]``.

    Hyperparameters mirror :class:`UNetConfig` and :class:`TrainConfig`.
    After fitting, ``net_`` holds the trained network and ``log_`` the
    per-epoch history.
    """

    def __init__(self, block_kind="DB", solver="rk4", steps_per_block=1, filters=(3, 6, 12, 24),
                 activation="softplus", epochs=30, lr=1e-3, lr_decay=0.999, batch_size=16,
                 val_fraction=0.2, threads=None, random_state=0):
        self.block_kind = block_kind
        self.solver = solver
        self.steps_per_block = steps_per_block
        self.filters = filters
        self.activation = activation
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.threads = threads
        self.random_state = random_state

    def _configs(self, in_channels: int) -> tuple[UNetConfig, TrainConfig]:
        model = UNetConfig(levels=len(self.filters), filters=tuple(self.filters), block_kind=self.block_kind,
                           solver=self.solver, steps_per_block=self.steps_per_block,
                           in_channels=in_channels, activation=self.activation)
        seed = int(self.random_state or 0)
        return model, TrainConfig(lr=self.lr, lr_decay=self.lr_decay, epochs=self.epochs,
                                  batch_size=self.batch_size, seed=seed, val_fraction=self.val_fraction,
                                  threads=self.threads)

    def fit(self, X, y):
        X = check_images(X, multiple=2 ** len(self.filters))
        y = check_masks(y, X)
        model, tcfg = self._configs(X.shape[1])
        self.net_ = build(model, tcfg.seed)
        samples = [SegSample(a, b) for a, b in zip(X, y)]
        self.log_ = train(self.net_, samples, tcfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, self.n_features_in_, 2 ** self.net_.config.levels)
        return self.net_.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X)).astype(np.float64)

    def score(self, X, y) -> float:
        """Mean Dice over the samples."""
        pred = self.predict(X)
        y = check_masks(y, pred)
        return float(np.mean([dice(p, t) for p, t in zip(pred, y)]))
