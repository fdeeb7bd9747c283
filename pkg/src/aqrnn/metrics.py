"""Probabilistic forecast metrics, computed over positive-target steps only."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .quantiles import test_grid


class MetricError(ValueError):
    pass


def pinball(y, y_hat, q):
    d = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return np.where(d >= 0, d * q, d * (q - 1.0))


@dataclass
class EvalInput:
    """Actuals ``y`` of shape (N,), quantile forecasts of shape (N, Q)."""

    y: np.ndarray
    forecasts: np.ndarray
    quantiles: np.ndarray
    mask: np.ndarray | None = None
    series: np.ndarray | None = None
    q_lo: float = 0.05
    q_hi: float = 0.95

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.forecasts = np.asarray(self.forecasts, dtype=float)
        self.quantiles = np.asarray(self.quantiles, dtype=float)
        if self.forecasts.shape != (self.y.size, self.quantiles.size):
            raise MetricError(f"forecasts of shape {self.forecasts.shape}, expected {(self.y.size, self.quantiles.size)}")
        if self.mask is None:
            self.mask = self.y > 0
        self.mask = np.asarray(self.mask, dtype=bool)

    def column(self, q: float) -> np.ndarray:
        hit = np.flatnonzero(np.isclose(self.quantiles, q, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise MetricError(f"no forecast for quantile {q}")
        return self.forecasts[:, hit[0]]

    def masked(self):
        if not self.mask.any():
            raise MetricError("no positive-target observations to evaluate")
        return self.y[self.mask], self.forecasts[self.mask]


def crps(data: EvalInput) -> float:
    """Twice the grid-averaged mean pinball loss."""
    y, f = data.masked()
    per_q = pinball(y[:, None], f, data.quantiles[None, :]).mean(axis=0)
    return float(2.0 * per_q.sum() / data.quantiles.size)


def crps_per_observation(data: EvalInput) -> np.ndarray:
    """Per-observation CRPS on the masked rows (used as the DM loss series)."""
    y, f = data.masked()
    return 2.0 * pinball(y[:, None], f, data.quantiles[None, :]).mean(axis=1)


def rf(data: EvalInput) -> np.ndarray:
    """Share of observations at or below each quantile forecast."""
    y, f = data.masked()
    return (y[:, None] <= f).mean(axis=0)


def rfe(data: EvalInput) -> np.ndarray:
    return data.quantiles - rf(data)


def marfe(data: EvalInput) -> float:
    return float(np.mean(np.abs(rfe(data))))


def _bounds(data: EvalInput):
    lo, hi = data.column(data.q_lo)[data.mask], data.column(data.q_hi)[data.mask]
    crossed = lo > hi
    return np.minimum(lo, hi), np.maximum(lo, hi), int(crossed.sum())


def winkler(y, lo, hi, alpha: float) -> np.ndarray:
    """Interval width plus ``2/alpha`` times the distance outside the interval."""
    y, lo, hi = (np.asarray(a, dtype=float) for a in (y, lo, hi))
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    width = hi - lo
    return width + (2.0 / alpha) * (np.maximum(lo - y, 0.0) + np.maximum(y - hi, 0.0))


def winkler_alpha(q_lo: float, q_hi: float, literal: bool = False) -> float:
    """Nominal miss rate of the interval; ``literal`` uses ``q_hi - q_lo`` instead."""
    return q_hi - q_lo if literal else q_lo + (1.0 - q_hi)


def mws(data: EvalInput, alpha: float | None = None) -> float:
    if not data.mask.any():
        raise MetricError("no positive-target observations to evaluate")
    alpha = winkler_alpha(data.q_lo, data.q_hi) if alpha is None else alpha
    lo, hi, _ = _bounds(data)
    return float(winkler(data.y[data.mask], lo, hi, alpha).mean())


def mae_q(data: EvalInput) -> float:
    if not data.mask.any():
        raise MetricError("no positive-target observations to evaluate")
    return float(np.abs(data.y[data.mask] - data.column(0.5)[data.mask]).mean())


def mse_q(data: EvalInput) -> float:
    if not data.mask.any():
        raise MetricError("no positive-target observations to evaluate")
    return float(((data.y[data.mask] - data.column(0.5)[data.mask]) ** 2).mean())


def coverage(data: EvalInput) -> tuple[float, float, float]:
    """Percent of observations below, inside (closed) and above the interval."""
    if not data.mask.any():
        raise MetricError("no positive-target observations to evaluate")
    y = data.y[data.mask]
    lo, hi, _ = _bounds(data)
    below = float(np.mean(y < lo) * 100)
    above = float(np.mean(y > hi) * 100)
    return below, 100.0 - below - above, above


def diebold_mariano(loss_a, loss_b, lag: int = 47) -> tuple[float, float]:
    """DM statistic on ``loss_a - loss_b`` with a Bartlett-kernel long-run
    variance and the Harvey-Leybourne-Newbold small-sample scaling for a
    horizon of ``lag + 1`` steps.  The p-value is the Student-t (n - 1) CDF at
    the statistic: small values mean A has significantly lower loss.

    With fewer than ``2 * lag`` pairs the plain variance is used, unscaled.
    """
    d = np.asarray(loss_a, dtype=float) - np.asarray(loss_b, dtype=float)
    n = d.size
    if n < 2:
        raise MetricError("Diebold-Mariano needs at least two paired losses")
    mean = d.mean()
    e = d - mean
    var = float(e @ e) / n
    scale = 1.0
    if n < 2 * lag:
        warnings.warn(f"only {n} paired losses for HAC lag {lag}; using the plain variance", stacklevel=2)
    else:
        for k in range(1, lag + 1):
            var += 2.0 * (1.0 - k / (lag + 1)) * float(e[k:] @ e[:-k]) / n
        h = lag + 1
        scale = math.sqrt((n + 1 - 2 * h + h * (h - 1) / n) / n)
    if var <= 0 or not math.isfinite(var):
        if mean == 0:
            return 0.0, 0.5
        stat = math.copysign(math.inf, mean)
        return stat, float(student_t.cdf(stat, n - 1))
    stat = float(scale * mean / math.sqrt(var / n))
    return stat, float(student_t.cdf(stat, n - 1))


def evaluate(data: EvalInput, region_ids=None, winkler_literal: bool = False) -> dict:
    """Full report; key names are stable for JSON output."""
    alpha = winkler_alpha(data.q_lo, data.q_hi, winkler_literal)
    below, within, above = coverage(data)
    report = {
        "crps": crps(data),
        "marfe": marfe(data),
        "mws": mws(data, alpha),
        "mae_q": mae_q(data),
        "mse_q": mse_q(data),
        "rfe_by_q": {f"{q:g}": float(v) for q, v in zip(data.quantiles, rfe(data))},
        "coverage": {"below": below, "within": within, "above": above},
        "interval_crossings": _bounds(data)[2],
        "winkler_alpha": alpha,
        "n_obs": int(data.mask.sum()),
    }
    if data.series is not None:
        per = {}
        for s in np.unique(data.series):
            rows = data.series == s
            sub = EvalInput(data.y[rows], data.forecasts[rows], data.quantiles, data.mask[rows],
                            None, data.q_lo, data.q_hi)
            if not sub.mask.any():
                continue
            name = str(region_ids[s]) if region_ids is not None else str(s)
            per[name] = {"crps": crps(sub), "marfe": marfe(sub), "mws": mws(sub, alpha),
                         "mae_q": mae_q(sub), "mse_q": mse_q(sub)}
        report["per_series"] = per
    return report


def default_quantiles() -> np.ndarray:
    return test_grid()
