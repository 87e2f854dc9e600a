"""Single-hidden-layer LSTM regressor, implemented from scratch in numpy.

The network is applied statelessly to short windows of consecutive samples
(zero initial state, prediction read out at the final step), trained with
mini-batch Adam on the mean squared error. Gradients come from exact
backpropagation through time and are verified against finite differences in
the test suite. Everything runs in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..core import DimensionMismatch, Diverged, SeriesTooShort
from .config import TrainConfig

# gate block order within the stacked weight rows
_GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    """Stacked gate parameters; rows are blocks (i, f, g, o) of size units."""

    W: np.ndarray  # (4U, D) input weights
    R: np.ndarray  # (4U, U) recurrent weights
    b: np.ndarray  # (4U,)  gate biases
    w_out: np.ndarray  # (2, U) readout
    b_out: np.ndarray  # (2,)

    @property
    def units(self) -> int:
        return self.R.shape[1]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "R": self.R, "b": self.b, "w_out": self.w_out, "b_out": self.b_out}

    def copy(self) -> "LstmParams":
        return LstmParams(**{k: v.copy() for k, v in self.arrays().items()})


def init_lstm_params(n_features: int, units: int, rng: np.random.Generator) -> LstmParams:
    """Seeded uniform(-1/sqrt(U), 1/sqrt(U)) weights, +1 forget-gate bias."""
    scale = 1.0 / np.sqrt(units)
    w = rng.uniform(-scale, scale, size=(4 * units, n_features))
    r = rng.uniform(-scale, scale, size=(4 * units, units))
    b = np.zeros(4 * units)
    b[units : 2 * units] = 1.0  # keep the memory path open early in training
    w_out = rng.uniform(-scale, scale, size=(2, units))
    b_out = np.zeros(2)
    return LstmParams(w, r, b, w_out, b_out)


def lstm_forward(
    windows: np.ndarray, params: LstmParams, return_cache: bool = False
):
    """Run the cell recursion over (B, T, D) windows from zero initial state.

    Returns the (B, 2) readout of the final hidden state and, when
    requested, the per-step activations needed for backpropagation.
    """
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3 or windows.shape[2] != params.n_features:
        raise DimensionMismatch(
            f"windows shape {windows.shape} incompatible with "
            f"{params.n_features} input features"
        )
    bsz, steps, _ = windows.shape
    u = params.units
    h = np.zeros((bsz, u))
    c = np.zeros((bsz, u))
    # all input projections in one GEMM
    xw = windows.reshape(bsz * steps, -1) @ params.W.T
    xw = xw.reshape(bsz, steps, 4 * u)
    cache = [] if return_cache else None
    for t in range(steps):
        z = xw[:, t] + h @ params.R.T + params.b
        gi = sigmoid(z[:, :u])
        gf = sigmoid(z[:, u : 2 * u])
        gg = np.tanh(z[:, 2 * u : 3 * u])
        go = sigmoid(z[:, 3 * u :])
        c_prev = c
        h_prev = h
        c = gf * c_prev + gi * gg
        tc = np.tanh(c)
        h = go * tc
        if return_cache:
            cache.append((gi, gf, gg, go, c_prev, tc, h_prev))
    out = h @ params.w_out.T + params.b_out
    if return_cache:
        return out, (cache, h)
    return out


def lstm_loss(windows: np.ndarray, targets: np.ndarray, params: LstmParams) -> float:
    resid = lstm_forward(windows, params) - targets
    return float(np.mean(resid * resid))


def lstm_gradient(
    windows: np.ndarray, targets: np.ndarray, params: LstmParams
) -> tuple[dict[str, np.ndarray], float]:
    """Exact MSE gradients over a batch via backpropagation through time.

    The loss is the mean of squared residuals over batch and both outputs;
    returns ({"W", "R", "b", "w_out", "b_out"}, loss).
    """
    windows = np.asarray(windows, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(windows) != len(targets):
        raise DimensionMismatch(f"{len(windows)} windows vs {len(targets)} targets")
    out, (cache, h_last) = lstm_forward(windows, params, return_cache=True)
    bsz, steps, _ = windows.shape
    u = params.units
    resid = out - targets
    loss = float(np.mean(resid * resid))
    dout = 2.0 * resid / resid.size

    grads = {
        "w_out": dout.T @ h_last,
        "b_out": dout.sum(axis=0),
    }
    dh = dout @ params.w_out
    dc = np.zeros((bsz, u))
    dz_steps = np.empty((steps, bsz, 4 * u))
    h_prev_steps = np.empty((steps, bsz, u))
    for t in range(steps - 1, -1, -1):
        gi, gf, gg, go, c_prev, tc, h_prev = cache[t]
        do = dh * tc
        dc = dc + dh * go * (1.0 - tc * tc)
        di = dc * gg
        dg = dc * gi
        df = dc * c_prev
        dz = np.empty((bsz, 4 * u))
        dz[:, :u] = di * gi * (1.0 - gi)
        dz[:, u : 2 * u] = df * gf * (1.0 - gf)
        dz[:, 2 * u : 3 * u] = dg * (1.0 - gg * gg)
        dz[:, 3 * u :] = do * go * (1.0 - go)
        dz_steps[t] = dz
        h_prev_steps[t] = h_prev
        dh = dz @ params.R
        dc = dc * gf

    flat_dz = dz_steps.reshape(steps * bsz, 4 * u)
    grads["W"] = flat_dz.T @ np.swapaxes(windows, 0, 1).reshape(steps * bsz, -1)
    grads["R"] = flat_dz.T @ h_prev_steps.reshape(steps * bsz, u)
    grads["b"] = flat_dz.sum(axis=0)
    return grads, loss


@dataclass
class _AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def _adam_update(
    params: LstmParams, grads: dict[str, np.ndarray], state: _AdamState, cfg: TrainConfig
) -> None:
    state.step += 1
    arrays = params.arrays()
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    for name, g in grads.items():
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        arrays[name] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)


def window_indices(n_rows: int, window: int, runs: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Full-length training windows that stay inside one contiguous run.

    Returns (indices (n_win, window), target_rows (n_win,)) where row k's
    window covers rows k-window+1 .. k.
    """
    if runs is None:
        runs = np.zeros(n_rows, dtype=int)
    runs = np.asarray(runs)
    targets = []
    for run in np.unique(runs):
        rows = np.nonzero(runs == run)[0]
        if len(rows) >= window:
            targets.append(rows[window - 1 :])
    if not targets:
        return np.zeros((0, window), dtype=np.intp), np.zeros(0, dtype=np.intp)
    target_rows = np.concatenate(targets)
    offsets = np.arange(window) - (window - 1)
    return target_rows[:, None] + offsets[None, :], target_rows


def fit_lstm(
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    window: int = 10,
    units: int = 100,
    runs: np.ndarray | None = None,
    params0: LstmParams | None = None,
    target_center: np.ndarray | None = None,
    target_scale: float | None = None,
) -> tuple[LstmParams, list[float], np.ndarray, float]:
    """Mini-batch Adam training loop over per-sample features.

    Windowing happens here: each target row k trains on the ``window``
    consecutive rows ending at k, never crossing run boundaries. Targets are
    internally shifted/scaled to zero mean and unit overall spread (folded
    back out at prediction time), which keeps the readout well-conditioned
    under the fixed 0.001 learning rate. Stops on the train-MSE plateau rule.

    Returns (params, per-epoch loss curve, target_center, target_scale).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    idx, target_rows = window_indices(len(x), window, runs)
    if len(idx) == 0:
        raise SeriesTooShort(
            f"no run has the {window} consecutive samples needed for one window"
        )
    if target_center is None:
        target_center = y[target_rows].mean(axis=0)
    if target_scale is None:
        spread = float(np.sqrt(np.mean(np.var(y[target_rows], axis=0))))
        target_scale = spread if spread > 1e-12 else 1.0
    yn = (y - target_center) / target_scale

    rng = np.random.default_rng(cfg.seed)
    params = params0.copy() if params0 is not None else init_lstm_params(x.shape[1], units, rng)
    state = _AdamState(
        m={k: np.zeros_like(v) for k, v in params.arrays().items()},
        v={k: np.zeros_like(v) for k, v in params.arrays().items()},
    )

    n_win = len(idx)
    eval_chunk = 8192

    def full_loss() -> float:
        total = 0.0
        for lo in range(0, n_win, eval_chunk):
            sel = idx[lo : lo + eval_chunk]
            resid = lstm_forward(x[sel], params) - yn[target_rows[lo : lo + eval_chunk]]
            total += float(np.sum(resid * resid))
        return total / (n_win * 2)

    curve: list[float] = []
    best = np.inf
    wait = 0
    for _ in range(cfg.max_epochs):
        perm = rng.permutation(n_win)
        for lo in range(0, n_win, cfg.batch_size):
            batch = perm[lo : lo + cfg.batch_size]
            grads, loss = lstm_gradient(x[idx[batch]], yn[target_rows[batch]], params)
            if not np.isfinite(loss):
                raise Diverged("training loss became non-finite")
            _adam_update(params, grads, state, cfg)
        epoch_loss = full_loss()
        if not np.isfinite(epoch_loss):
            raise Diverged("training loss became non-finite")
        curve.append(epoch_loss)
        if epoch_loss < best - cfg.min_delta:
            best = epoch_loss
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return params, curve, target_center, target_scale


class LstmCopRegressor(BaseEstimator, RegressorMixin):
    """Windowed LSTM map from per-sample IMU channels to COP coordinates.

    ``fit`` expects lag-free (history 0) feature rows; the estimator forms
    its own ``window``-sample context internally. Pass ``runs`` (an integer
    run id per row, such as ``FeatureMatrix.run_id``) so windows never span
    gaps between contiguous segments.
    """

    def __init__(
        self,
        units: int = 100,
        window: int = 10,
        learning_rate: float = 0.001,
        batch_size: int = 128,
        max_epochs: int = 200,
        patience: int = 10,
        min_delta: float = 1e-6,
        seed: int = 0,
    ):
        self.units = units
        self.window = window
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            seed=self.seed,
        )

    def fit(self, X, y, runs: np.ndarray | None = None):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=True)
        self.params_, self.loss_curve_, self.target_center_, self.target_scale_ = fit_lstm(
            X, y, self._train_config(), window=self.window, units=self.units, runs=runs
        )
        self.n_features_in_ = X.shape[1]
        return self

    def fine_tune(self, X, y, runs: np.ndarray | None = None) -> "LstmCopRegressor":
        """Continue optimization from the current parameters on new data.

        Uses the same stopping rule and the model's existing target scaling;
        returns a new fitted estimator.
        """
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"calibration has {X.shape[1]} features, model expects {self.n_features_in_}"
            )
        tuned = LstmCopRegressor(**self.get_params())
        tuned.params_, tuned.loss_curve_, tuned.target_center_, tuned.target_scale_ = fit_lstm(
            X,
            y,
            self._train_config(),
            window=self.window,
            units=self.units,
            runs=runs,
            params0=self.params_,
            target_center=self.target_center_,
            target_scale=self.target_scale_,
        )
        tuned.n_features_in_ = self.n_features_in_
        return tuned

    def predict(self, X, runs: np.ndarray | None = None):
        """Predict every row; rows early in a run use a truncated window."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"input has {X.shape[1]} features, model expects {self.n_features_in_}"
            )
        n = len(X)
        if runs is None:
            runs = np.zeros(n, dtype=int)
        runs = np.asarray(runs)
        # position of each row within its run
        pos = np.empty(n, dtype=np.intp)
        for run in np.unique(runs):
            rows = np.nonzero(runs == run)[0]
            pos[rows] = np.arange(len(rows))
        length = np.minimum(pos + 1, self.window)
        out = np.empty((n, 2))
        for ln in np.unique(length):
            rows = np.nonzero(length == ln)[0]
            offsets = np.arange(ln) - (ln - 1)
            windows = X[rows[:, None] + offsets[None, :]]
            out[rows] = lstm_forward(windows, self.params_)
        return out * self.target_scale_ + self.target_center_
