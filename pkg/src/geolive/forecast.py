"""Per-region instance-count forecasting and proactive reservation.

Optimal hourly instance counts become a supervised problem through a
sliding window: the last ``window`` counts predict the count ``horizon``
slots later. Three forecasters share one fit/predict contract and are
ranked by held-out R^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import ValidationError

DEFAULT_WINDOW = 24


class SeriesTooShort(ValueError):
    pass


class DegenerateActuals(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


class DivergenceError(FloatingPointError):
    pass


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class InstanceSeries:
    region: int
    counts: tuple
    start: int = 0

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValidationError("instance counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return len(self.counts)


@dataclass(frozen=True)
class SupervisedWindowSet:
    window: int
    inputs: np.ndarray
    targets: np.ndarray
    horizon: int = 1

    def __len__(self):
        return len(self.targets)

    def split(self, train_fraction: float) -> tuple["SupervisedWindowSet", "SupervisedWindowSet"]:
        """Chronological split; no shuffling."""
        cut = int(round(len(self) * train_fraction))
        cut = min(max(cut, 1), len(self) - 1) if len(self) > 1 else len(self)
        return (SupervisedWindowSet(self.window, self.inputs[:cut], self.targets[:cut], self.horizon),
                SupervisedWindowSet(self.window, self.inputs[cut:], self.targets[cut:], self.horizon))


def build_windows(series, window: int = DEFAULT_WINDOW, horizon: int = 1) -> SupervisedWindowSet:
    """Rows of ``window`` consecutive counts paired with the count ``horizon`` slots after the last."""
    counts = np.asarray(series.counts if isinstance(series, InstanceSeries) else series, dtype=float)
    if window < 1 or horizon < 1:
        raise ValueError("window and horizon must be positive")
    rows = len(counts) - window - horizon + 1
    if rows < 1:
        raise SeriesTooShort(f"series of length {len(counts)} too short for window {window}")
    idx = np.arange(rows)[:, None] + np.arange(window)[None, :]
    return SupervisedWindowSet(window, counts[idx], counts[window + horizon - 1:].copy(), horizon)


def r_squared(actual, predicted) -> float:
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape or a.ndim != 1:
        raise ValueError("actual and predicted must be 1-D sequences of equal length")
    if len(a) < 2:
        raise ValueError("need at least two observations")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateActuals("actual values have zero variance")
    return 1.0 - float(np.sum((a - p) ** 2)) / ss_tot


def mae(actual, predicted) -> float:
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape or a.ndim != 1:
        raise ValueError("actual and predicted must be 1-D sequences of equal length")
    if len(a) == 0:
        raise ValueError("mae of an empty sequence")
    return float(np.mean(np.abs(a - p)))


class Forecaster:
    """Fit on a :class:`SupervisedWindowSet`, then predict one value per window."""

    name = "forecaster"

    def fit(self, train: SupervisedWindowSet) -> "Forecaster":
        raise NotImplementedError

    def predict(self, window) -> float:
        return float(self.predict_many(np.asarray(window, dtype=float)[None, :])[0])

    def predict_many(self, inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"<{self.name}>"


class SeasonalNaive(Forecaster):
    def __init__(self, period: int = 24):
        if period < 1:
            raise ValueError("period must be positive")
        self.period = period
        self.name = f"seasonal_naive({period})"

    def fit(self, train):
        if self.period > train.window:
            raise ValueError(f"period {self.period} exceeds window {train.window}")
        self.window = train.window
        return self

    def predict_many(self, inputs):
        return np.asarray(inputs, dtype=float)[:, inputs.shape[1] - self.period]


class RidgeAR(Forecaster):
    """Linear autoregression with an unpenalized intercept, solved in closed form."""

    def __init__(self, lam: float = 0.1):
        if lam < 0:
            raise ValueError("regularization must be non-negative")
        self.lam = lam
        self.name = f"ridge_ar({lam:g})"

    def fit(self, train):
        X, y = train.inputs, train.targets
        x_mean, y_mean = X.mean(axis=0), y.mean()
        Xc = X - x_mean
        gram = Xc.T @ Xc + self.lam * np.eye(X.shape[1])
        if self.lam == 0 and np.linalg.cond(gram) > 1e12:
            raise SingularSystemError("normal equations are singular at lambda=0; raise lambda")
        self.coef = np.linalg.solve(gram, Xc.T @ (y - y_mean))
        self.intercept = float(y_mean - x_mean @ self.coef)
        return self

    def predict_many(self, inputs):
        return np.asarray(inputs, dtype=float) @ self.coef + self.intercept


class MLPForecaster(Forecaster):
    """One hidden ReLU layer trained on squared loss with minibatch Adagrad."""

    def __init__(self, hidden: int = 100, seed: int = 0, epochs: int = 300, batch_size: int = 32,
                 learning_rate: float = 0.05):
        self.hidden, self.seed, self.epochs = hidden, seed, epochs
        self.batch_size, self.learning_rate = batch_size, learning_rate
        self.name = f"mlp({hidden})"

    @staticmethod
    def init_params(n_in: int, hidden: int, rng: np.random.Generator) -> dict:
        return {
            "W1": rng.normal(0.0, math.sqrt(2.0 / n_in), size=(hidden, n_in)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, math.sqrt(1.0 / hidden), size=hidden),
            "b2": np.zeros(1),
        }

    @staticmethod
    def forward(params, X):
        z = X @ params["W1"].T + params["b1"]
        h = np.maximum(z, 0.0)
        return h @ params["w2"] + params["b2"][0], (z, h)

    @classmethod
    def loss_and_grad(cls, params, X, y):
        """Half mean squared error and its exact gradient."""
        out, (z, h) = cls.forward(params, X)
        err = out - y
        loss = 0.5 * float(np.mean(err ** 2))
        g_out = err / len(y)
        g_h = np.outer(g_out, params["w2"]) * (z > 0)
        return loss, {
            "W1": g_h.T @ X,
            "b1": g_h.sum(axis=0),
            "w2": h.T @ g_out,
            "b2": np.array([g_out.sum()]),
        }

    def fit(self, train):
        X, y = train.inputs, train.targets
        if len(y) < 1:
            raise ValueError("no training rows")
        self.loc = float(y.mean())
        self.scale = float(y.std()) or 1.0
        Xs, ys = (X - self.loc) / self.scale, (y - self.loc) / self.scale
        rng = np.random.default_rng(self.seed)
        params = self.init_params(X.shape[1], self.hidden, rng)
        accum = {k: np.full_like(v, 1e-8) for k, v in params.items()}
        for epoch in range(self.epochs):
            order = rng.permutation(len(ys))
            for start in range(0, len(ys), self.batch_size):
                batch = order[start:start + self.batch_size]
                loss, grads = self.loss_and_grad(params, Xs[batch], ys[batch])
                if not math.isfinite(loss):
                    raise DivergenceError(f"{self.name}: loss became {loss} at epoch {epoch}")
                for k, g in grads.items():
                    accum[k] += g * g
                    params[k] -= self.learning_rate * g / np.sqrt(accum[k])
        self.params = params
        return self

    def predict_many(self, inputs):
        Xs = (np.asarray(inputs, dtype=float) - self.loc) / self.scale
        out, _ = self.forward(self.params, Xs)
        return out * self.scale + self.loc


class PerfectForecaster(Forecaster):
    """Replays known future values; used to isolate allocation quality from forecast error."""

    name = "perfect"

    def __init__(self, truth: Mapping[tuple, float]):
        self.truth = {tuple(float(v) for v in k): v for k, v in truth.items()}

    def fit(self, train):
        return self

    def predict_many(self, inputs):
        return np.array([self.truth[tuple(float(v) for v in row)] for row in np.asarray(inputs, dtype=float)])


def fit_seasonal_naive(period: int = 24) -> SeasonalNaive:
    return SeasonalNaive(period)


def fit_ridge_ar(lam: float = 0.1) -> RidgeAR:
    return RidgeAR(lam)


def fit_mlp(hidden: int = 100, seed: int = 0, **kwargs) -> MLPForecaster:
    return MLPForecaster(hidden, seed, **kwargs)


def default_candidates(seed: int = 0, period: int = 24) -> list:
    """The fixed hyperparameter grid: seasonal naive, ridge lambdas, MLP widths."""
    return ([SeasonalNaive(period)]
            + [RidgeAR(lam) for lam in (0.01, 0.1, 1.0)]
            + [MLPForecaster(h, seed) for h in (32, 100)])


@dataclass(frozen=True)
class ModelScore:
    model: str
    r2: float
    mae: float
    error: str = ""


def select_model(candidates: Sequence[Forecaster], train: SupervisedWindowSet,
                 test: SupervisedWindowSet) -> tuple[Forecaster, list[ModelScore]]:
    """Fit every candidate and keep the best test R^2 (first wins ties).

    Failed fits are skipped. When the test targets are constant R^2 is
    undefined and the lowest MAE decides instead.
    """
    if not candidates:
        raise ValueError("no candidate forecasters")
    scores, fitted = [], []
    degenerate = len(test) < 2 or float(np.ptp(test.targets)) == 0.0
    for cand in candidates:
        try:
            cand.fit(train)
            pred = cand.predict_many(test.inputs)
            if not np.all(np.isfinite(pred)):
                raise DivergenceError("non-finite predictions")
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            scores.append(ModelScore(cand.name, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
            continue
        r2 = math.nan if degenerate else r_squared(test.targets, pred)
        scores.append(ModelScore(cand.name, r2, mae(test.targets, pred)))
        fitted.append((cand, scores[-1]))
    if not fitted:
        raise RuntimeError("every candidate forecaster failed: "
                           + "; ".join(f"{s.model}: {s.error}" for s in scores))
    if degenerate:
        best = min(fitted, key=lambda cs: cs[1].mae)
    else:
        best = fitted[0]
        for cand, score in fitted[1:]:
            if score.r2 > best[1].r2:
                best = (cand, score)
    return best[0], scores


def reserve_from_prediction(prediction: float) -> int:
    # Round up (under-provisioning is the costlier error); the small offset
    # keeps float noise like 3.0000000001 from reserving an extra instance.
    return max(0, math.ceil(prediction - 1e-9))


def reservation_pipeline(history: Mapping[int, Sequence[int]], forecasters: Mapping[int, Forecaster],
                         window: int = DEFAULT_WINDOW) -> dict:
    """Reserved instances per region from the last ``window`` optimal counts."""
    out = {}
    for region in sorted(history):
        counts = history[region]
        if len(counts) < window:
            raise InsufficientHistory(f"region {region}: {len(counts)} slots of history, need {window}")
        recent = np.asarray(counts[len(counts) - window:], dtype=float)
        out[region] = reserve_from_prediction(forecasters[region].predict(recent))
    return out


def diurnal_series(hours: int, base: float = 50.0, amplitude: float = 0.6, noise: float = 0.1,
                   seed: int = 0) -> np.ndarray:
    """Non-negative integer counts following a 24-hour cycle with multiplicative noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(hours)
    shape = 1.0 + amplitude * np.sin(2 * np.pi * (t % 24) / 24.0 - np.pi / 2)
    values = base * shape * (1.0 + noise * rng.standard_normal(hours))
    return np.maximum(np.rint(values), 0).astype(int)


def write_instance_series(series: Mapping[int, InstanceSeries], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "region", "count"])
        length = max((len(s) for s in series.values()), default=0)
        start = min((s.start for s in series.values()), default=0)
        for k in range(length):
            for r in sorted(series):
                w.writerow([start + k, r, series[r].counts[k]])


def read_instance_series(path) -> dict:
    rows: dict[int, dict[int, int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        count_col = "count" if "count" in (reader.fieldnames or ()) else "instance_count"
        for row in reader:
            rows.setdefault(int(row["region"]), {})[int(row["slot"])] = int(row[count_col])
    out = {}
    for r, by_slot in rows.items():
        slots = sorted(by_slot)
        if slots != list(range(slots[0], slots[0] + len(slots))):
            raise ValidationError(f"region {r}: series has gaps")
        out[r] = InstanceSeries(r, tuple(by_slot[s] for s in slots), start=slots[0])
    return dict(sorted(out.items()))


def write_reservations(plan: Mapping[int, Sequence[int]], path) -> None:
    """``plan`` maps slot -> per-region reserved counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "region", "reserved"])
        for slot in sorted(plan):
            for r, c in enumerate(plan[slot]):
                w.writerow([slot, r, c])


def read_reservations(path) -> dict:
    out: dict[int, dict[int, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["slot"]), {})[int(row["region"])] = int(row["reserved"])
    return {s: tuple(v[r] for r in sorted(v)) for s, v in sorted(out.items())}


def write_scores(scores: Mapping[int, Sequence[ModelScore]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "model", "r2", "mae"])
        for r in sorted(scores):
            for s in scores[r]:
                w.writerow([r, s.model, repr(s.r2), repr(s.mae)])
