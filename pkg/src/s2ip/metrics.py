"""Forecast accuracy metrics.

MSE/MAE for the long-horizon protocol; SMAPE/MAPE/MASE plus the OWA
composite (against a seasonally adjusted naive reference) for the
short-horizon protocol. Conventions for the degenerate cases: SMAPE terms
with a zero denominator contribute 0, and MASE is reported as absent when
the in-sample seasonal-naive error vanishes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SEASONALITY_TEST_FACTOR = 0.9  # multiplies 1.645 / sqrt(n)


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    mse: float
    mae: float
    horizon: int
    seasonality: int = 1
    smape: float | None = None
    mape: float | None = None
    mase: float | None = None
    owa: float | None = None
    n_windows: int = 0

    def as_row(self) -> dict:
        return {
            "mse": self.mse, "mae": self.mae,
            "smape": self.smape, "mape": self.mape,
            "mase": self.mase, "owa": self.owa,
            "horizon": self.horizon, "seasonality": self.seasonality,
            "n_windows": self.n_windows,
        }


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or y.size < 1:
        raise MetricError(f"need equal-length 1-D vectors, got {y.shape} "
                          f"and {yhat.shape}")
    return y, yhat


def mse_mae(y, yhat) -> tuple[float, float]:
    """Mean squared / absolute error over the horizon."""
    y, yhat = _pair(y, yhat)
    diff = y - yhat
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def smape(y, yhat) -> float:
    """200/H * sum |y - yhat| / (|y| + |yhat|), zero-denominator terms
    contributing 0."""
    y, yhat = _pair(y, yhat)
    denom = np.abs(y) + np.abs(yhat)
    terms = np.where(denom == 0.0, 0.0, np.abs(y - yhat) / np.where(denom == 0, 1, denom))
    return float(200.0 * terms.mean())


def mape(y, yhat) -> float:
    """100/H * sum |y - yhat| / |y|, zero-denominator terms contributing 0."""
    y, yhat = _pair(y, yhat)
    denom = np.abs(y)
    terms = np.where(denom == 0.0, 0.0, np.abs(y - yhat) / np.where(denom == 0, 1, denom))
    return float(100.0 * terms.mean())


def mase(y, yhat, insample, seasonality: int) -> float | None:
    """Mean absolute error scaled by the in-sample seasonal-naive error.

    The denominator is mean |x_t - x_{t-s}| over the history, which stays
    defined for any horizon; a constant history makes the metric undefined
    (returned as None).
    """
    y, yhat = _pair(y, yhat)
    insample = np.asarray(insample, dtype=np.float64)
    s = int(seasonality)
    if s < 1:
        raise MetricError("seasonality must be >= 1")
    if insample.size <= s:
        raise MetricError(f"in-sample history of length {insample.size} is too "
                          f"short for seasonality {s}")
    denom = float(np.mean(np.abs(insample[s:] - insample[:-s])))
    if denom == 0.0:
        return None
    return float(np.mean(np.abs(y - yhat)) / denom)


def _autocorrelation(x: np.ndarray, lag: int) -> float:
    d = x - x.mean()
    denom = float(np.sum(d * d))
    if denom == 0.0:
        return 0.0
    return float(np.sum(d[lag:] * d[:-lag]) / denom)


def seasonality_test(insample: np.ndarray, s: int,
                     factor: float = SEASONALITY_TEST_FACTOR) -> bool:
    """Is the lag-s autocorrelation above factor * 1.645 / sqrt(n)?"""
    n = insample.size
    if s < 2 or n <= s:
        return False
    threshold = factor * 1.645 / np.sqrt(n)
    return _autocorrelation(insample, s) > threshold


def _seasonal_indices(insample: np.ndarray, s: int) -> np.ndarray | None:
    """Multiplicative seasonal indices (mean 1) from centered-MA detrending;
    None when the data cannot support them."""
    n = insample.size
    if n < 2 * s or np.any(insample <= 0.0):
        return None
    if s % 2 == 0:
        # 2xMA for even periods
        first = np.convolve(insample, np.full(s, 1.0 / s), mode="valid")
        cma = np.convolve(first, np.full(2, 0.5), mode="valid")
        offset = s // 2
    else:
        cma = np.convolve(insample, np.full(s, 1.0 / s), mode="valid")
        offset = s // 2
    if np.any(cma <= 0.0):
        return None
    ratios = insample[offset:offset + cma.size] / cma
    phases = (np.arange(cma.size) + offset) % s
    indices = np.empty(s)
    for p in range(s):
        mask = phases == p
        if not mask.any():
            return None
        indices[p] = ratios[mask].mean()
    indices /= indices.mean()
    return indices


def naive2_forecast(insample, s: int, horizon: int) -> np.ndarray:
    """Seasonally adjusted last-value forecast.

    When the seasonality test passes (and multiplicative adjustment is
    well-defined), the series is deseasonalized by classical multiplicative
    indices, the last deseasonalized level is repeated, and the indices are
    reapplied; otherwise the last raw value is repeated.
    """
    insample = np.asarray(insample, dtype=np.float64)
    if insample.size < max(s, 1):
        raise MetricError("in-sample history shorter than the seasonality")
    if horizon == 0:
        return np.empty(0)
    if s >= 2 and seasonality_test(insample, s):
        indices = _seasonal_indices(insample, s)
        if indices is not None:
            n = insample.size
            deseasonalized = insample / indices[np.arange(n) % s]
            level = deseasonalized[-1]
            future_phases = (n + np.arange(horizon)) % s
            return level * indices[future_phases]
    return np.full(horizon, insample[-1])


def owa(model_smape: float, model_mase: float,
        naive_smape: float, naive_mase: float) -> float | None:
    """Half the sum of the SMAPE and MASE ratios against the naive
    reference; absent when a reference value is zero."""
    if naive_smape <= 0.0 or naive_mase <= 0.0:
        return None
    return float(0.5 * (model_smape / naive_smape + model_mase / naive_mase))


def evaluate_forecasts(pairs, mode: str = "long", seasonality: int = 1,
                       insamples=None) -> MetricReport:
    """Aggregate metrics over (target, forecast) pairs.

    In short mode each window also needs its in-sample history (for MASE and
    the naive reference); per-window metrics are averaged and OWA is formed
    from the aggregate ratios.
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricError("no forecasts to evaluate")
    if mode not in ("long", "short"):
        raise MetricError(f"unknown metrics mode {mode!r}")
    horizon = len(pairs[0][0])
    mses, maes = [], []
    for y, yhat in pairs:
        m, a = mse_mae(y, yhat)
        mses.append(m)
        maes.append(a)
    report = MetricReport(mse=float(np.mean(mses)), mae=float(np.mean(maes)),
                          horizon=horizon, seasonality=seasonality,
                          n_windows=len(pairs))
    if mode == "long":
        return report

    if insamples is None or len(insamples) != len(pairs):
        raise MetricError("short mode needs one in-sample history per window")
    smapes, mapes, mases = [], [], []
    ref_smapes, ref_mases = [], []
    for (y, yhat), hist in zip(pairs, insamples):
        smapes.append(smape(y, yhat))
        mapes.append(mape(y, yhat))
        ref = naive2_forecast(hist, seasonality, len(y))
        ref_smapes.append(smape(y, ref))
        m = mase(y, yhat, hist, seasonality)
        ref_m = mase(y, ref, hist, seasonality)
        if m is not None:
            mases.append(m)
        if ref_m is not None:
            ref_mases.append(ref_m)
    report.smape = float(np.mean(smapes))
    report.mape = float(np.mean(mapes))
    report.mase = float(np.mean(mases)) if mases else None
    if report.mase is not None and ref_mases:
        report.owa = owa(report.smape, report.mase,
                         float(np.mean(ref_smapes)), float(np.mean(ref_mases)))
    return report


def evaluate_model(model, test_windows, mode: str = "long",
                   seasonality: int = 1, dump_path=None) -> MetricReport:
    """Forecast every test window and aggregate the metric suite; optionally
    dump per-window rows as CSV."""
    if not test_windows:
        raise MetricError("test set is empty")
    pairs, insamples, rows = [], [], []
    for i, (channel, x, y) in enumerate(test_windows):
        result = model.forward_forecast(x, channel)
        pairs.append((y, result.forecast))
        insamples.append(x)
        m, a = mse_mae(y, result.forecast)
        row = {"window_id": i, "channel": channel, "mse": m, "mae": a}
        if mode == "short":
            row["smape"] = smape(y, result.forecast)
            mase_val = mase(y, result.forecast, x, seasonality)
            row["mase"] = "" if mase_val is None else mase_val
        rows.append(row)
    if dump_path is not None:
        fields = list(rows[0].keys())
        with open(dump_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    return evaluate_forecasts(pairs, mode=mode, seasonality=seasonality,
                              insamples=insamples if mode == "short" else None)
