"""Scikit-learn style front end for the ECG-to-RR regressor.

``RespRateRegressor`` wraps the convolutional model and its training
protocol behind fit/predict/get_params so it composes with pipelines,
cross-validation and cloning.  Inputs are raw-mV 60 s segments at 120 Hz
(7200 samples); z-normalization happens internally on consumption.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .curation import znormalize_batch
from .nn import (
    ModelSpec,
    SPEC_PRESETS,
    TrainConfig,
    predict as nn_predict,
    train_model,
)
from .validation import check_paired, check_segments


class RespRateRegressor(BaseEstimator, RegressorMixin):
    """Predict minute-average respiratory rate (bpm) from one ECG lead.

    Parameters mirror the training protocol defaults: five epochs, batch
    size 128, learning rate 1e-3 cut tenfold per epoch, weight decay 5e-5.
    ``spec`` picks the architecture ('desk', 'paper', 'tiny' or a ModelSpec).
    ``restore_best`` reloads the best tune-set epoch after training when
    tune data was supplied.
    """

    def __init__(
        self,
        spec: str | ModelSpec = "desk",
        epochs: int = 5,
        batch_size: int = 128,
        lr: float = 1e-3,
        weight_decay: float = 5e-5,
        seed: int = 0,
        dtype: str = "float32",
        restore_best: bool = True,
        segment_len: int = 7200,
    ):
        self.spec = spec
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.dtype = dtype
        self.restore_best = restore_best
        self.segment_len = segment_len

    def _resolve_spec(self) -> ModelSpec:
        if isinstance(self.spec, ModelSpec):
            return self.spec
        try:
            return SPEC_PRESETS[self.spec]()
        except KeyError:
            raise ValueError(
                f"unknown spec {self.spec!r}; use one of {sorted(SPEC_PRESETS)} or a ModelSpec"
            ) from None

    def fit(self, X, y, X_tune=None, y_tune=None, verbose: bool = False):
        """Train on (n, 7200) segments or (n, leads, 7200) lead stacks."""
        X, y = check_paired(X, y, self.segment_len)
        if X_tune is not None:
            X_tune, y_tune = check_paired(X_tune, y_tune, self.segment_len)
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
            dtype=self.dtype,
        )
        result = train_model(
            X, y, self._resolve_spec(), config, X_tune=X_tune, y_tune=y_tune, verbose=verbose
        )
        if self.restore_best and X_tune is not None:
            result.restore_best()
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X.shape[-1]
        return self

    def predict(self, X) -> np.ndarray:
        """Eval-mode predictions; multi-lead stacks use the first lead."""
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the regressor before predicting")
        X = check_segments(X, self.segment_len)
        segs = X[:, 0] if X.ndim == 3 else X
        return nn_predict(self.model_, znormalize_batch(segs), self.batch_size)
