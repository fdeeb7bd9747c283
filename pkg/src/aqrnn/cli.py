"""Command-line entry points: synth, train, forecast, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import metrics
from .baseline import DEFAULT_WINDOW, baseline_panel
from .config import RunConfig, desk_config, load_run_config
from .dataset import Panel, Windows, atomic_write_text, chrono_split, load_panel, synth_panel, write_panel
from .errors import AQRNNError, ConfigError, DataError
from .network import ensemble_predict, load_model, save_model
from .quantiles import test_grid
from .training import LOG_FIELDS, fit

log = logging.getLogger("aqrnn")

FORECAST_COLUMNS = ["region_id", "origin", "step", "quantile", "value"]


# --------------------------------------------------------------------------
# workflows (importable, used by the commands below)


def member_seeds(config: RunConfig) -> list[int]:
    return [config.seed + 1000 * i for i in range(config.ensemble_size)]


def _fit_member(args):
    panel, config, seed, log_path = args
    lines = ["\t".join(LOG_FIELDS)]
    model, _ = fit_from_config(panel, config, seed, lines.append)
    atomic_write_text(log_path, "\n".join(lines) + "\n")
    return model


def fit_from_config(panel: Panel, config: RunConfig, seed: int, log_fn=None):
    s = config.split
    split = chrono_split(panel, s.train_end, s.valid_end, s.test_end)
    return fit(panel, split, config, seed=seed, log_fn=log_fn)


def worker_count(jobs: int) -> int:
    cap = os.environ.get("AQ_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"AQ_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(jobs, limit))


def train_ensemble(panel: Panel, config: RunConfig, out_dir) -> dict:
    """Train every member, write ``member_<i>.aqm`` files and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = member_seeds(config)
    jobs = [(panel, config, seed, out / f"member_{i}.log") for i, seed in enumerate(seeds)]
    workers = worker_count(len(jobs))
    if workers == 1:
        models = [_fit_member(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(_fit_member, jobs))
    files = []
    for i, model in enumerate(models):
        name = f"member_{i}.aqm"
        save_model(model, out / name)
        files.append(name)
    # validation is scored with the stored (32-bit) weights, as a later forecast would see them
    stored = [load_model(out / f) for f in files]
    manifest = {
        "config_digest": config.digest(),
        "config": config.model_dump(mode="json", exclude={"data", "output_dir"}),
        "seeds": seeds,
        "toggles": config.network.toggles,
        "members": files,
        "region_ids": list(panel.region_ids),
        "validation_crps": validation_crps(stored, panel, config),
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def validation_crps(models, panel: Panel, config: RunConfig) -> float | None:
    s = config.split
    split = chrono_split(panel, s.train_end, s.valid_end, s.test_end)
    net = config.network
    windows = Windows(panel, net.input_days, net.horizon_days)
    days = split.target_days("valid", net.input_days, net.horizon_days)
    if days.size == 0:
        return None
    qs = test_grid()
    pred = ensemble_predict(models, windows, days, qs)
    actual = np.stack([windows.raw_targets(int(d)) for d in days], axis=1)
    data = metrics.EvalInput(actual.reshape(-1), pred.transpose(0, 1, 3, 2).reshape(-1, qs.size), qs)
    if not data.mask.any():
        return None
    return metrics.crps(data)


def load_ensemble(model_dir):
    """Members listed in the manifest (or every ``member_*.aqm`` file)."""
    folder = Path(model_dir)
    manifest_path = folder / "manifest.json"
    if manifest_path.exists():
        names = json.loads(manifest_path.read_text())["members"]
    else:
        names = sorted(p.name for p in folder.glob("member_*.aqm"))
    if not names:
        raise DataError(f"no model files in {folder}")
    return [load_model(folder / n) for n in names]


def parse_quantiles(text: str) -> np.ndarray:
    if text.strip() == "grid":
        return test_grid()
    out = []
    for part in text.split(","):
        try:
            q = float(part)
        except ValueError:
            raise ConfigError(f"quantile {part!r} is not a number") from None
        if not 0.0 < q < 1.0:
            raise ConfigError(f"quantile {part.strip()} outside (0, 1)")
        out.append(q)
    if not out:
        raise ConfigError("no quantile levels given")
    return np.asarray(sorted(set(out)))


def _origin_label(panel: Panel, day: int) -> str:
    return str(panel.dates[0] + np.timedelta64(day, "D")) + "T00:00:00Z"


def origin_days(panel: Panel, origin: str, until: str | None, m: int) -> np.ndarray:
    first = panel.day_index(origin)
    if pd.Timestamp(origin).hour or pd.Timestamp(origin).minute:
        raise ConfigError(f"origin {origin} must be at 00:00")
    last = first if until is None else panel.day_index(until) - 1
    if first < m:
        raise DataError(f"origin {origin} leaves fewer than {m} days of history")
    if last > panel.n_days:
        raise DataError(f"origin range ends after the day following the panel end ({panel.dates[-1]})")
    if last < first:
        raise ConfigError(f"empty origin range {origin} .. {until}")
    return np.arange(first, last + 1)


def forecast_frame(models, panel: Panel, days, quantiles, sort_levels: bool = False) -> pd.DataFrame:
    """Ensemble-median forecasts as a sorted long table."""
    ids = models[0].region_ids
    if list(ids) != list(panel.region_ids):
        raise DataError(f"panel regions {panel.region_ids} do not match the model's {ids}")
    net = models[0].config
    windows = Windows(panel, net.input_days, net.horizon_days)
    pred = ensemble_predict(models, windows, days, quantiles, sort_levels=sort_levels)
    return _long_frame(pred, panel, days, quantiles)


def _long_frame(pred: np.ndarray, panel: Panel, days, quantiles) -> pd.DataFrame:
    S, D, Q, H = pred.shape
    idx = np.indices((S, D, Q, H)).reshape(4, -1)
    frame = pd.DataFrame({
        "region_id": np.asarray(panel.region_ids, dtype=object)[idx[0]],
        "origin": np.asarray([_origin_label(panel, int(d)) for d in days], dtype=object)[idx[1]],
        "step": idx[3] + 1,
        "quantile": np.asarray(quantiles)[idx[2]],
        "value": pred.reshape(-1),
    })
    return frame.sort_values(["region_id", "origin", "step", "quantile"], kind="stable").reset_index(drop=True)


def write_forecasts(frame: pd.DataFrame, path) -> None:
    text = frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")
    atomic_write_text(path, text)


def read_forecasts(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"region_id": str, "origin": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read forecasts {path}: {exc}") from exc
    if list(frame.columns) != FORECAST_COLUMNS:
        raise DataError(f"expected columns {','.join(FORECAST_COLUMNS)}, got {','.join(frame.columns)}")
    return frame


def forecast_cube(frame: pd.DataFrame, panel: Panel):
    """Arrange a long table as ``(S, D, Q, H)``; every cell must be present."""
    regions = sorted(frame["region_id"].unique())
    origins = sorted(frame["origin"].unique())
    qs = np.sort(frame["quantile"].unique())
    H = int(frame["step"].max())
    for r in regions:
        panel.series_index(r)
    cube = np.full((len(regions), len(origins), qs.size, H), np.nan)
    ri = pd.Index(regions).get_indexer(frame["region_id"])
    oi = pd.Index(origins).get_indexer(frame["origin"])
    qi = np.searchsorted(qs, frame["quantile"].to_numpy())
    cube[ri, oi, qi, frame["step"].to_numpy() - 1] = frame["value"].to_numpy()
    gaps = np.argwhere(np.isnan(cube))
    if gaps.size:
        listing = "; ".join(f"{regions[a]} {origins[b]} q={qs[c]:g} step {d + 1}" for a, b, c, d in gaps[:10])
        more = f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ""
        raise DataError(f"forecasts missing {len(gaps)} cells: {listing}{more}")
    days = np.array([panel.day_index(o) for o in origins])
    series = np.array([panel.series_index(r) for r in regions])
    return cube, series, days, qs


def actuals_for(panel: Panel, series, days, horizon: int) -> np.ndarray:
    h_days = -(-horizon // 24)
    if days.min() < 0 or days.max() + h_days > panel.n_days:
        raise DataError("actuals do not cover every forecast target")
    blocks = [panel.days[series, d:d + h_days].reshape(series.size, -1)[:, :horizon] for d in days]
    return np.stack(blocks, axis=1)  # (S, D, H)


def _eval_input(cube, actual, qs, series) -> metrics.EvalInput:
    S, D, Q, H = cube.shape
    rows_series = np.repeat(series, D * H)
    return metrics.EvalInput(actual.reshape(-1), cube.transpose(0, 1, 3, 2).reshape(-1, Q), qs,
                             series=rows_series)


def evaluate_frame(frame: pd.DataFrame, panel: Panel, with_baseline: bool = False,
                   winkler_literal: bool = False, window: int = DEFAULT_WINDOW) -> dict:
    cube, series, days, qs = forecast_cube(frame, panel)
    actual = actuals_for(panel, series, days, cube.shape[-1])
    data = _eval_input(cube, actual, qs, series)
    report = metrics.evaluate(data, panel.region_ids, winkler_literal)
    report["quantiles"] = [float(q) for q in qs]
    report["dm_matrix"] = {}
    if with_baseline:
        base = baseline_panel(panel.days[series], days, qs, horizon_days=-(-cube.shape[-1] // 24),
                              window=window)[..., : cube.shape[-1]]
        base_data = _eval_input(base, actual, qs, series)
        report["baseline"] = metrics.evaluate(base_data, panel.region_ids, winkler_literal)
        losses = {"model": metrics.crps_per_observation(data),
                  "baseline": metrics.crps_per_observation(base_data)}
        dm = {}
        for a in losses:
            dm[a] = {}
            for b in losses:
                if a != b:
                    stat, p = metrics.diebold_mariano(losses[a], losses[b])
                    dm[a][b] = {"statistic": stat, "p_value": p}
        report["dm_matrix"] = dm
    return report


# --------------------------------------------------------------------------
# commands


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def cmd_synth(args) -> None:
    panel = synth_panel(args.regions, args.years, args.seed, args.start)
    write_panel(panel, args.out)
    log.info("wrote %d regions x %d days to %s", panel.n_series, panel.n_days, args.out)


def _run_config(args) -> RunConfig:
    if args.config is None:
        return desk_config() if args.preset == "desk" else RunConfig()
    return load_run_config(args.config)


def cmd_train(args) -> None:
    config = _run_config(args)
    panel = load_panel(args.data)
    manifest = train_ensemble(panel, config, args.out)
    log.info("trained %d member(s); validation CRPS %s", len(manifest["members"]), manifest["validation_crps"])


def cmd_forecast(args) -> None:
    quantiles = parse_quantiles(args.quantiles)
    models = load_ensemble(args.model)
    panel = load_panel(args.data)
    days = origin_days(panel, args.origin, args.until, models[0].config.input_days)
    write_forecasts(forecast_frame(models, panel, days, quantiles, args.sort_quantiles), args.out)


def cmd_evaluate(args) -> None:
    frame = read_forecasts(args.forecasts)
    panel = load_panel(args.actuals)
    report = evaluate_frame(frame, panel, args.baseline, args.winkler_literal)
    atomic_write_text(args.report, json.dumps(report, indent=2, sort_keys=True) + "\n")
    summary = {k: report[k] for k in ("crps", "marfe", "mws")}
    log.info("%s", summary)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqrnn", description="Any-quantile PV forecasting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic PV panel")
    p.add_argument("--regions", type=positive_int, required=True)
    p.add_argument("--years", type=positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", default="2001-01-01")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an ensemble")
    p.add_argument("--config", help="JSON run configuration (defaults to full-scale settings)")
    p.add_argument("--preset", choices=["full", "desk"], default="full",
                   help="settings to use when --config is not given")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="forecast arbitrary quantile levels")
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--data", required=True)
    p.add_argument("--origin", required=True, help="first target day, e.g. 2004-01-01T00:00:00Z")
    p.add_argument("--until", help="forecast every daily origin up to this date (exclusive)")
    p.add_argument("--quantiles", default="grid", help="comma-separated levels or 'grid'")
    p.add_argument("--sort-quantiles", action="store_true",
                   help="rearrange each step's values to be non-decreasing in the level")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score forecasts against actuals")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--actuals", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--baseline", action="store_true", help="also score the seasonal baseline and run DM tests")
    p.add_argument("--winkler-literal", action="store_true", help="use alpha = q_hi - q_lo in the Winkler score")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except AQRNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
