"""Regression models mapping IMU feature rows to COP coordinates."""

from __future__ import annotations

import numpy as np

from ..core import DimensionMismatch
from .config import TrainConfig
from .linear import (
    LinearCopRegressor,
    fit_linear_exact,
    fit_linear_gd,
    predict_linear,
)
from .lstm import (
    LstmCopRegressor,
    LstmParams,
    fit_lstm,
    init_lstm_params,
    lstm_forward,
    lstm_gradient,
    lstm_loss,
    window_indices,
)
from .store import load_model, save_model

__all__ = [
    "TrainConfig",
    "LinearCopRegressor",
    "LstmCopRegressor",
    "LstmParams",
    "fit_linear_exact",
    "fit_linear_gd",
    "predict_linear",
    "fit_lstm",
    "init_lstm_params",
    "lstm_forward",
    "lstm_gradient",
    "lstm_loss",
    "window_indices",
    "fine_tune",
    "save_model",
    "load_model",
]


def fine_tune(model, X, y, runs: np.ndarray | None = None, anchor: float = 1.0):
    """Adapt a fitted model to calibration data; returns a new model.

    Linear models get a refit anchored to their current weights; the LSTM
    continues optimization from its current parameters.
    """
    if isinstance(model, LinearCopRegressor):
        return model.fine_tune(X, y, anchor=anchor)
    if isinstance(model, LstmCopRegressor):
        return model.fine_tune(X, y, runs=runs)
    raise DimensionMismatch(f"cannot fine-tune model of type {type(model).__name__}")
