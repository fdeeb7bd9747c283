"""Seasonal empirical-quantile reference forecaster.

For each hour of the day, the forecast quantile is the empirical quantile of
that hour's values over the trailing window of days before the origin.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

DEFAULT_WINDOW = 56


class SeasonalQuantileTable:
    """Sorted per-hour buckets of the ``window`` days before ``origin``.

    ``days`` is a (D, 24) array for one series; ``origin`` is the index of the
    first forecast day.
    """

    def __init__(self, days: np.ndarray, origin: int, window: int = DEFAULT_WINDOW):
        days = np.asarray(days, dtype=float)
        if origin < window:
            raise DataError(f"baseline needs {window} days of history before day {origin}, got {origin}")
        if origin > days.shape[0]:
            raise DataError(f"origin day {origin} is past the end of the series ({days.shape[0]} days)")
        self.window = window
        self.buckets = np.sort(days[origin - window:origin], axis=0)  # (W, 24)

    def quantiles(self, qs) -> np.ndarray:
        """Forecast of shape (Q, 24), one row per level."""
        qs = np.atleast_1d(np.asarray(qs, dtype=float))
        return np.quantile(self.buckets, qs, axis=0, method="linear")


def baseline_forecast(days: np.ndarray, origin: int, qs, horizon: int = 48,
                      window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Forecast of shape (Q, horizon) for one series; steps cycle through hours."""
    table = SeasonalQuantileTable(days, origin, window).quantiles(qs)
    hours = np.arange(horizon) % table.shape[1]
    return table[:, hours]


def baseline_panel(days: np.ndarray, origins, qs, horizon_days: int = 2,
                   window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Forecasts for every series and origin, shaped like the model output
    (S, n_origins, Q, horizon_days * 24)."""
    days = np.asarray(days, dtype=float)
    res = days.shape[-1]
    return np.stack([
        np.stack([baseline_forecast(series, f, qs, horizon_days * res, window) for f in origins])
        for series in days
    ])
