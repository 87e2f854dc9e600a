"""Multivariate linear COP regression: exact normal-equations solver and an
independent full-batch gradient-descent twin used to cross-validate it."""

from __future__ import annotations

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..core import DimensionMismatch, Diverged, SingularSystem
from .config import TrainConfig


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


def fit_linear_exact(
    x: np.ndarray, y: np.ndarray, ridge: float = 1e-8
) -> tuple[np.ndarray, np.ndarray]:
    """Minimize ||X w + b - Y||^2 + ridge ||w||^2 (bias unpenalized).

    Returns (weights (D, 2), bias (2,)). The tiny default ridge only guards
    conditioning; it leaves well-posed solutions unchanged to ~1e-12.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) == 0:
        raise DimensionMismatch(f"X has {len(x)} rows, Y has {len(y)}")
    z = _with_bias(x)
    gram = z.T @ z
    d = x.shape[1]
    gram[np.arange(d), np.arange(d)] += ridge
    rhs = z.T @ y
    try:
        w = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise SingularSystem("normal equations produced non-finite weights")
    return w[:-1], w[-1]


def fit_linear_gd(
    x: np.ndarray, y: np.ndarray, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent on the same MSE objective.

    Kept deliberately independent of the exact solver so the two can check
    each other. Returns (weights, bias, per-epoch MSE curve).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) == 0:
        raise DimensionMismatch(f"X has {len(x)} rows, Y has {len(y)}")
    n, d = x.shape
    w = np.zeros((d, y.shape[1]))
    b = y.mean(axis=0)

    def mse() -> float:
        r = x @ w + b - y
        return float(np.mean(r * r))

    curve = [mse()]
    initial = max(curve[0], 1e-30)
    best = curve[0]
    wait = 0
    for _ in range(cfg.max_epochs):
        r = x @ w + b - y
        gw = 2.0 * (x.T @ r) / n
        gb = 2.0 * r.mean(axis=0)
        w -= cfg.learning_rate * gw
        b -= cfg.learning_rate * gb
        loss = mse()
        curve.append(loss)
        if not np.isfinite(loss) or loss > 1e3 * initial:
            raise Diverged(
                f"gradient descent diverged: MSE {loss:.3g} vs initial {initial:.3g}"
            )
        if loss < best - cfg.min_delta:
            best = loss
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return w, b, curve


def predict_linear(weights: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionMismatch(
            f"input has {x.shape[1] if x.ndim == 2 else '?'} features, "
            f"model expects {weights.shape[0]}"
        )
    return x @ weights + bias


class LinearCopRegressor(BaseEstimator, RegressorMixin):
    """Linear map from (optionally lagged) IMU channels to COP coordinates.

    ``solver="exact"`` solves the ridge-stabilized normal equations;
    ``solver="gd"`` runs the full-batch gradient-descent twin with the given
    optimizer settings.
    """

    def __init__(
        self,
        ridge: float = 1e-8,
        solver: str = "exact",
        learning_rate: float = 0.1,
        max_epochs: int = 20000,
        patience: int = 50,
        min_delta: float = 1e-14,
    ):
        self.ridge = ridge
        self.solver = solver
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
        )

    def fit(self, X, y, **fit_params):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=True)
        if self.solver == "exact":
            self.coef_, self.intercept_ = fit_linear_exact(X, y, self.ridge)
            self.loss_curve_ = []
        elif self.solver == "gd":
            self.coef_, self.intercept_, self.loss_curve_ = fit_linear_gd(
                X, y, self._train_config()
            )
        else:
            raise DimensionMismatch(f"unknown solver {self.solver!r}")
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return predict_linear(self.coef_, self.intercept_, X)

    def fine_tune(self, X, y, anchor: float = 1.0) -> "LinearCopRegressor":
        """Refit on calibration data, anchored to the current weights.

        Minimizes ||X w + b - Y||^2 + anchor ||(w, b) - (w0, b0)||^2 and
        returns a new fitted estimator; the original is left untouched.
        """
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=True)
        if len(X) == 0:
            raise DimensionMismatch("calibration data is empty")
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"calibration has {X.shape[1]} features, model expects {self.n_features_in_}"
            )
        z = _with_bias(X)
        prior = np.vstack([self.coef_, self.intercept_])
        gram = z.T @ z + anchor * np.eye(z.shape[1])
        try:
            w = scipy.linalg.solve(gram, z.T @ y + anchor * prior, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(f"anchored refit is singular: {exc}") from exc
        tuned = LinearCopRegressor(**self.get_params())
        tuned.coef_ = w[:-1]
        tuned.intercept_ = w[-1]
        tuned.loss_curve_ = []
        tuned.n_features_in_ = self.n_features_in_
        return tuned
