"""Hourly capacity-factor panels: loading, splitting, windowing and a
synthetic generator for desk-scale experiments."""

from __future__ import annotations

import datetime as dt
import logging
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

HOURS = 24
# standard deviations of the shared daily, regional daily and hourly log-cloud terms
SYNTH_CLOUD_SIGMA = (0.45, 0.2, 0.08)
# day-to-day AR(1) coefficients of the shared and regional log-cloud terms
SYNTH_PERSISTENCE = (0.75, 0.5)


@dataclass
class Panel:
    """``L`` aligned hourly series starting at midnight and covering whole days."""

    region_ids: list[str]
    start: np.datetime64  # first hour, UTC
    values: np.ndarray  # (L, n_hours)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.region_ids):
            raise DataError(f"values of shape {self.values.shape} do not match {len(self.region_ids)} regions")
        if self.values.shape[1] % HOURS:
            raise DataError(f"panel covers {self.values.shape[1]} hours, not a whole number of days")
        self.start = np.datetime64(self.start, "h")
        if (self.start - self.start.astype("datetime64[D]")).astype(int) != 0:
            raise DataError(f"panel must start at 00:00, starts at {self.start}")

    @property
    def n_series(self) -> int:
        return len(self.region_ids)

    @property
    def n_days(self) -> int:
        return self.values.shape[1] // HOURS

    @property
    def days(self) -> np.ndarray:
        """``(L, n_days, 24)`` view of the values."""
        return self.values.reshape(self.n_series, self.n_days, HOURS)

    @property
    def dates(self) -> np.ndarray:
        return self.start.astype("datetime64[D]") + np.arange(self.n_days)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + np.arange(self.values.shape[1])

    def day_index(self, date) -> int:
        """Index of ``date`` (may fall outside the panel) relative to the first day."""
        ts = pd.Timestamp(date)
        if ts.tzinfo is not None:
            ts = ts.tz_convert("UTC").tz_localize(None)
        d = np.datetime64(ts, "D")
        return int((d - self.start.astype("datetime64[D]")).astype(int))

    def series_index(self, region_id: str) -> int:
        try:
            return self.region_ids.index(region_id)
        except ValueError:
            raise DataError(f"unknown region {region_id!r}") from None


# --------------------------------------------------------------------------
# CSV


def load_panel(path) -> Panel:
    """Read a ``time,region_id,value`` CSV into a dense, validated panel."""
    try:
        df = pd.read_csv(path, dtype={"region_id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read panel {path}: {exc}") from exc
    if list(df.columns) != ["time", "region_id", "value"]:
        raise DataError(f"expected header time,region_id,value, got {','.join(map(str, df.columns))}")
    try:
        times = pd.to_datetime(df["time"], utc=True, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"cannot parse timestamps: {exc}") from exc
    values = pd.to_numeric(df["value"], errors="coerce")
    bad = values.isna() | (values < 0) | (values > 1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"row {row + 2}: value {df['value'].iloc[row]!r} outside [0, 1]")
    if (times.dt.minute != 0).any() or (times.dt.second != 0).any():
        row = int(np.flatnonzero(((times.dt.minute != 0) | (times.dt.second != 0)).to_numpy())[0])
        raise DataError(f"row {row + 2}: timestamp {df['time'].iloc[row]} is not on the hour")
    hours = times.dt.tz_localize(None).to_numpy().astype("datetime64[h]")
    dup = pd.Series(list(zip(hours, df["region_id"]))).duplicated()
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataError(f"row {row + 2}: duplicate (time, region) {df['time'].iloc[row]}, {df['region_id'].iloc[row]}")

    regions = list(dict.fromkeys(df["region_id"]))
    t0, t1 = hours.min(), hours.max()
    n = int((t1 - t0).astype(int)) + 1
    grid = np.full((len(regions), n), np.nan)
    rix = pd.Index(regions).get_indexer(df["region_id"])
    grid[rix, (hours - t0).astype(int)] = values.to_numpy()
    missing = np.argwhere(np.isnan(grid))
    if missing.size:
        listing = ", ".join(f"{regions[r]}@{t0 + np.timedelta64(int(t), 'h')}" for r, t in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise DataError(f"gaps in panel: {listing}{more}")
    return Panel(regions, t0, grid)


def write_panel(panel: Panel, path) -> None:
    """Write in the ``time,region_id,value`` format, time-major, atomically."""
    stamps = np.datetime_as_string(panel.timestamps, unit="s")
    L, n = panel.values.shape
    df = pd.DataFrame({
        "time": np.repeat(np.char.add(stamps, "Z"), L),
        "region_id": np.tile(np.asarray(panel.region_ids, dtype=object), n),
        "value": panel.values.T.reshape(-1),
    })
    atomic_write_text(path, df.to_csv(index=False, float_format="%.6f", lineterminator="\n"))


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# segmentation


@dataclass
class Segment:
    z_x: np.ndarray
    z_y: np.ndarray
    mean: float
    origin: np.datetime64  # last day of the input window
    series: int


def segment(panel: Panel, series: int, j: int, m: int = 4, h: int = 2) -> Segment:
    """Input days ``j .. j+m-1`` and target days ``j+m .. j+m+h-1`` (0-based)."""
    if j < 0 or j + m + h > panel.n_days:
        raise IndexError(f"segment at day {j} with m={m}, h={h} exceeds {panel.n_days} days")
    days = panel.days[series]
    z_x = days[j:j + m].reshape(-1)
    z_y = days[j + m:j + m + h].reshape(-1)
    return Segment(z_x, z_y, float(z_x.mean()), panel.dates[j + m - 1], series)


def normalize(seg: Segment):
    """``(x, y, mean)`` scaled by the input-window mean, or ``None`` for a dark window."""
    if seg.mean <= 0:
        return None
    return seg.z_x / seg.mean, seg.z_y / seg.mean, seg.mean


def denormalize(y_norm, mean):
    return np.asarray(y_norm) * mean


def positive_mask(actuals) -> np.ndarray:
    return np.asarray(actuals) > 0


class Windows:
    """Normalized windows for every target day of a panel, precomputed.

    For target day ``f`` the inputs are days ``f-m .. f-1`` and the targets
    days ``f .. f+h-1``; both are divided by the input mean.
    """

    def __init__(self, panel: Panel, m: int, h: int):
        self.panel = panel
        self.m, self.h = m, h
        days = panel.days
        n = panel.n_days
        means = np.full((panel.n_series, n + 1), np.nan)
        if n >= m:
            windows = np.lib.stride_tricks.sliding_window_view(panel.values, m * HOURS, axis=1)[:, ::HOURS]
            means[:, m:] = windows.mean(axis=-1)
        self.means = means  # indexed by target day, NaN where undefined
        self.days = days

    def first_day(self) -> int:
        return self.m

    def inputs(self, f: int, series=None):
        """``(x, mean)`` with x of shape ``(S, m, 24)``; dark windows give x = 0."""
        sl = slice(None) if series is None else series
        if f < self.m or f > self.panel.n_days:
            raise IndexError(f"no input window for target day {f}")
        raw = self.days[sl, f - self.m:f]
        mean = self.means[sl, f]
        safe = np.where(mean > 0, mean, 1.0)
        x = np.where(mean[:, None, None] > 0, raw / safe[:, None, None], 0.0)
        return x, mean

    def targets(self, f: int, series=None):
        """Normalized targets ``(S, h*24)``; rows with a dark input window are 0."""
        sl = slice(None) if series is None else series
        if f + self.h > self.panel.n_days:
            raise IndexError(f"no target window for target day {f}")
        raw = self.raw_targets(f, series)
        mean = self.means[sl, f]
        safe = np.where(mean > 0, mean, 1.0)
        return np.where(mean[:, None] > 0, raw / safe[:, None], 0.0)

    def raw_targets(self, f: int, series=None) -> np.ndarray:
        sl = slice(None) if series is None else series
        block = self.days[sl, f:f + self.h]
        return block.reshape(block.shape[0], -1)


# --------------------------------------------------------------------------
# chronological split


@dataclass(frozen=True)
class Split:
    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def target_days(self, name: str, m: int, h: int) -> np.ndarray:
        """Target days whose whole horizon lies in range ``name`` and that have m days of history."""
        lo, hi = getattr(self, name)
        lo = max(lo, m)
        return np.arange(lo, max(lo, hi - h + 1))


def chrono_split(panel: Panel, train_end, valid_end, test_end=None) -> Split:
    """Day ranges ``[0, train_end)``, ``[train_end, valid_end)``, ``[valid_end, test_end)``."""
    a = panel.day_index(train_end)
    b = panel.day_index(valid_end)
    c = panel.n_days if test_end is None else panel.day_index(test_end)
    if not 0 < a <= b <= c:
        raise ConfigError(f"split boundaries {train_end}, {valid_end}, {test_end} are not ordered inside the panel")
    if c > panel.n_days:
        raise ConfigError(f"test end {test_end} lies beyond the panel end {panel.dates[-1]}")
    if a == b:
        log.warning("validation range is empty (valid_end == train_end)")
    return Split((0, a), (a, b), (b, c))


# --------------------------------------------------------------------------
# synthetic panel


def synth_panel(n_regions: int, years: int, seed: int, start: str = "2001-01-01") -> Panel:
    """Desk-scale stand-in for a regional PV capacity-factor panel.

    value = clip(S(hour) * A(day of year) * C(region, time), 0, 1) with a
    half-sine daylight profile (06-18), a summer-peaking annual amplitude and a
    lognormal cloud factor.  The log cloud factor mixes a persistent daily
    process shared by all regions (seen with a lag of 0 or 1 day depending on
    the region, so neighbours carry information about tomorrow), a persistent
    regional process and hourly noise.
    """
    if n_regions < 1 or years < 1:
        raise ConfigError("synth_panel needs at least one region and one year")
    rng = np.random.default_rng(seed)
    t0 = dt.date.fromisoformat(start)
    t1 = dt.date(t0.year + years, t0.month, t0.day)
    n_days = (t1 - t0).days
    dates = np.datetime64(t0) + np.arange(n_days)
    doy = (dates - dates.astype("datetime64[Y]")).astype(int) + 1

    hour = np.arange(HOURS)
    daylight = np.maximum(0.0, np.sin(np.pi * (hour - 6) / 12.0))
    daylight[(hour <= 6) | (hour >= 18)] = 0.0
    amplitude = 0.35 + 0.3 * np.sin(2 * np.pi * (doy - 81) / 365.25)

    s_shared, s_regional, s_hourly = SYNTH_CLOUD_SIGMA
    phi_shared, phi_regional = SYNTH_PERSISTENCE
    shared = _ar1(rng, n_days + 1, phi=phi_shared, sigma=s_shared)
    lags = np.arange(n_regions) % 2
    regional = np.stack([_ar1(rng, n_days, phi=phi_regional, sigma=s_regional) for _ in range(n_regions)])
    log_cloud = np.stack([shared[1 - lag:n_days + 1 - lag] for lag in lags]) + regional
    hourly = s_hourly * rng.standard_normal((n_regions, n_days, HOURS))
    var = s_shared ** 2 + s_regional ** 2 + s_hourly ** 2
    cloud = np.exp(log_cloud[:, :, None] + hourly - var / 2)

    values = np.clip(daylight[None, None, :] * amplitude[None, :, None] * cloud, 0.0, 1.0)
    values = np.round(values, 6)
    ids = [f"R{r:02d}" for r in range(n_regions)]
    return Panel(ids, np.datetime64(t0, "h"), values.reshape(n_regions, -1))


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    """Stationary Gaussian AR(1) with marginal standard deviation ``sigma``."""
    out = np.empty(n)
    out[0] = sigma * rng.standard_normal()
    innov = sigma * np.sqrt(1 - phi ** 2) * rng.standard_normal(n)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + innov[t]
    return out
