"""Trajectory forecasting and coverage-aware workload prediction.

Pipeline: slide 12-sample windows over traces, train a two-layer LSTM stack
(LSTM -> dropout -> LSTM -> dense -> ReLU) on min-max normalized positions,
then map predicted positions to RSU regions and turn counts into workloads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from premig.numerics import (
    ContractViolation,
    DenseLayerParams,
    LstmCellParams,
    OptimizerState,
    Tensor,
    dense_forward,
    init_dense,
    init_lstm,
    lstm_cell,
    optimizer_step,
    zero_dense,
    zero_lstm,
)
from premig.numerics.checkpoint import assign, flatten, load_params, save_params
from premig.world import ConfigurationError, MobilityTrace, RsuSpec

log = logging.getLogger(__name__)

HOLDOUT = 0.2


@dataclass
class TrajWindow:
    history: np.ndarray  # (hist, 2), normalized
    target: np.ndarray  # (2,), normalized


@dataclass
class WindowSet:
    X: np.ndarray  # (N, hist, 2)
    Y: np.ndarray  # (N, 2)
    lo: np.ndarray
    hi: np.ndarray
    is_test: np.ndarray  # (N,) bool, last 20% of each trace
    skipped: int = 0

    def __len__(self):
        return len(self.X)

    def windows(self) -> list[TrajWindow]:
        return [TrajWindow(x, y) for x, y in zip(self.X, self.Y)]

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[~self.is_test], self.Y[~self.is_test]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.is_test], self.Y[self.is_test]

    def normalize(self, xy):
        return normalize(xy, self.lo, self.hi)

    def denormalize(self, u):
        return denormalize(u, self.lo, self.hi)


def normalize(xy, lo, hi):
    span = np.where(hi > lo, hi - lo, 1.0)
    return (np.asarray(xy, dtype=float) - lo) / span


def denormalize(u, lo, hi):
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.asarray(u, dtype=float) * span + lo


def window_dataset(traces: list[MobilityTrace], hist: int = 12, horizon: int = 1,
                   bounds=None) -> WindowSet:
    """All maximal sliding windows, min-max normalized.

    ``bounds`` = (xmin, ymin, xmax, ymax) fixes the normalization; otherwise it
    is fitted to the traces. Too-short traces are skipped and counted.
    """
    need = hist + horizon
    usable = [tr for tr in traces if len(tr) >= need]
    skipped = len(traces) - len(usable)
    if skipped:
        log.warning("%d trace(s) shorter than %d samples skipped", skipped, need)
    if bounds is not None:
        lo, hi = np.array(bounds[:2], float), np.array(bounds[2:], float)
    elif usable:
        allxy = np.concatenate([tr.xy for tr in usable])
        lo, hi = allxy.min(0), allxy.max(0)
    else:
        lo, hi = np.zeros(2), np.ones(2)
    xs, ys, test = [], [], []
    for tr in usable:
        u = normalize(tr.xy, lo, hi)
        n = len(tr) - need + 1
        idx = np.arange(n)[:, None] + np.arange(hist)[None, :]
        xs.append(u[idx])
        ys.append(u[np.arange(n) + need - 1])
        n_test = int(round(HOLDOUT * n))
        test.append(np.arange(n) >= n - n_test)
    if not xs:
        return WindowSet(np.zeros((0, hist, 2)), np.zeros((0, 2)), lo, hi, np.zeros(0, bool), skipped)
    return WindowSet(np.concatenate(xs), np.concatenate(ys), lo, hi, np.concatenate(test), skipped)


# -- model ---------------------------------------------------------------------

@dataclass
class ForecastModel:
    lstm1: LstmCellParams
    lstm2: LstmCellParams
    dense: DenseLayerParams
    dropout_rate: float = 0.05
    lo: np.ndarray = field(default_factory=lambda: np.zeros(2))
    hi: np.ndarray = field(default_factory=lambda: np.ones(2))

    @property
    def hidden(self) -> int:
        return self.lstm1.hidden

    def tensors(self) -> dict:
        return flatten("", {"lstm1": self.lstm1, "lstm2": self.lstm2, "dense": self.dense})

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())


def init_forecaster(seed: int, hidden: int = 256, dropout: float = 0.05) -> ForecastModel:
    rng = np.random.default_rng(seed)
    dense = init_dense(rng, hidden, 2)
    # start the ReLU output mid-range so no unit is dead at step 0
    dense.bias.data[:] = 0.5
    return ForecastModel(init_lstm(rng, 2, hidden), init_lstm(rng, hidden, hidden), dense, dropout)


def zero_forecaster(hidden: int = 8) -> ForecastModel:
    return ForecastModel(zero_lstm(2, hidden), zero_lstm(hidden, hidden), zero_dense(hidden, 2))


def forward(model: ForecastModel, X, rng: np.random.Generator | None = None) -> Tensor:
    """Differentiable pass over a batch ``X`` (B, hist, 2). Dropout iff ``rng`` given."""
    X = np.asarray(X, dtype=float)
    B, T, _ = X.shape
    H = model.hidden
    h1 = C1 = h2 = C2 = Tensor(np.zeros((B, H)))
    keep = 1.0 - model.dropout_rate
    for t in range(T):
        h1, C1 = lstm_cell(model.lstm1, X[:, t, :], h1, C1)
        inp = h1
        if rng is not None and model.dropout_rate > 0:
            inp = h1 * (rng.random((B, H)) < keep) / keep
        h2, C2 = lstm_cell(model.lstm2, inp, h2, C2)
    return dense_forward(model.dense, h2).relu()


def _np_cell(p: LstmCellParams, x, h, C):
    hx = np.concatenate([h, x], axis=-1)
    f = expit(hx @ p.W_f.data.T + p.b_f.data)
    i = expit(hx @ p.W_i.data.T + p.b_i.data)
    c = np.tanh(hx @ p.W_C.data.T + p.b_C.data)
    o = expit(hx @ p.W_o.data.T + p.b_o.data)
    C = f * C + i * c
    return o * np.tanh(C), C


def predict_batch(model: ForecastModel, X) -> np.ndarray:
    """Deterministic (dropout off) normalized predictions for ``X`` (B, hist, 2)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[-1] != 2:
        raise ContractViolation(f"expected windows of shape (B, hist, 2), got {X.shape}")
    B, T, _ = X.shape
    H = model.hidden
    h1 = C1 = h2 = C2 = np.zeros((B, H))
    for t in range(T):
        h1, C1 = _np_cell(model.lstm1, X[:, t, :], h1, C1)
        h2, C2 = _np_cell(model.lstm2, h1, h2, C2)
    return np.maximum(h2 @ model.dense.weights.data.T + model.dense.bias.data, 0.0)


def predict(model: ForecastModel, window, hist: int | None = None) -> np.ndarray:
    """Single normalized window (hist, 2) -> normalized position (2,)."""
    w = np.asarray(window, dtype=float)
    if w.ndim != 2 or w.shape[1] != 2 or (hist is not None and len(w) != hist):
        raise ContractViolation(f"window must be ({hist or 'hist'}, 2), got {w.shape}")
    return predict_batch(model, w[None])[0]


def predict_positions(model: ForecastModel, history_xy) -> np.ndarray:
    """Map-coordinate histories (B, hist, 2) -> map-coordinate predictions (B, 2)."""
    u = normalize(history_xy, model.lo, model.hi)
    return denormalize(predict_batch(model, u), model.lo, model.hi)


def full_mse(model: ForecastModel, X, Y) -> float:
    return float(np.mean((predict_batch(model, X) - Y) ** 2)) if len(X) else float("nan")


def train_forecaster(data: WindowSet, epochs: int = 500, batch: int = 40, seed: int = 0,
                     hidden: int = 256, dropout: float = 0.05, step_size: float = 1e-3,
                     model: ForecastModel | None = None) -> tuple[ForecastModel, list[float]]:
    """Minibatch MSE training on the non-held-out windows.

    Returns the model and the full-training-set MSE (dropout off) after each epoch.
    """
    X, Y = data.train
    if len(X) == 0:
        raise ConfigurationError("no training windows")
    rng = np.random.default_rng(seed)
    if model is None:
        model = init_forecaster(int(rng.integers(2**31)), hidden, dropout)
    model.lo, model.hi = np.array(data.lo, float), np.array(data.hi, float)
    params = model.parameters()
    opt = OptimizerState.for_params(params, step_size=step_size)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch):
            idx = order[s:s + batch]
            pred = forward(model, X[idx], rng)
            loss = ((pred - Y[idx]) ** 2).mean()
            for p in params:
                p.zero_grad()
            loss.backward()
            optimizer_step(opt, params)
        curve.append(full_mse(model, X, Y))
    return model, curve


def save_forecaster(path, model: ForecastModel, meta: dict | None = None) -> None:
    m = dict(meta or {})
    m.update(kind="forecaster", hidden=model.hidden, dropout=model.dropout_rate,
             lo=model.lo.tolist(), hi=model.hi.tolist())
    save_params(path, {k: v for k, v in model.tensors().items()}, m)


def load_forecaster(path) -> ForecastModel:
    arrays, meta = load_params(path)
    model = zero_forecaster(int(meta["hidden"]))
    model.dropout_rate = float(meta["dropout"])
    model.lo, model.hi = np.array(meta["lo"]), np.array(meta["hi"])
    assign(model.tensors(), arrays)
    return model


# -- evaluation ----------------------------------------------------------------

def eval_metrics(preds, targets) -> dict:
    """MSE, MAE, r2 and MedAE over flattened coordinate errors.

    r2 is ``None`` when the targets have zero variance.
    """
    p = np.asarray(preds, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if p.shape != y.shape or len(y) < 2:
        raise ContractViolation("preds and targets need equal length >= 2")
    err = p - y
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return {
        "mse": float(np.mean(err ** 2)),
        "mae": float(np.mean(np.abs(err))),
        "r2": 1.0 - float(np.sum(err ** 2)) / ss_tot if ss_tot > 0 else None,
        "medae": float(np.median(np.abs(err))),
    }


# -- coverage-aware workload ---------------------------------------------------

def region_assign(xy, rsus: list[RsuSpec]) -> np.ndarray:
    """Index (into ``rsus`` sorted by id) of the nearest covering RSU, -1 if none."""
    rs = sorted(rsus, key=lambda r: r.id)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        return np.zeros(0, dtype=int)
    centers = np.array([[r.position.x, r.position.y] for r in rs])
    radii = np.array([r.coverage_radius for r in rs])
    d = np.hypot(*(xy[:, None, :] - centers[None, :, :]).transpose(2, 0, 1))
    inside = d <= radii[None, :]
    d = np.where(inside, d, np.inf)
    k = np.argmin(d, axis=1)  # first minimum = smallest id on ties
    return np.where(inside.any(axis=1), k, -1)


def region_count(xy, rsus: list[RsuSpec]) -> dict[int, int]:
    """Per-RSU count of positions inside its disk, overlaps going to the nearest."""
    rs = sorted(rsus, key=lambda r: r.id)
    k = region_assign(xy, rs)
    counts = np.bincount(k[k >= 0], minlength=len(rs))
    return {r.id: int(c) for r, c in zip(rs, counts)}


def predict_workload(prior: float, zeta: float, z: int, cap: float) -> float:
    if zeta < 0:
        raise ContractViolation("zeta must be >= 0")
    return max(0.0, min(prior + zeta * z, cap))
