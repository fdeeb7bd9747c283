"""Dual-track dilated RNN: a context track over all series and a primary
track of per-subrange teams that emits quantile forecasts and confidences.

All team members of all subranges and all patch streams are evaluated in one
pass: primary parameters carry leading ``(members, streams)`` dimensions, the
context track uses a single member.  Each ``(member, stream)`` slice is an
independent cell, so the layout changes nothing numerically.
"""

from __future__ import annotations

import datetime as dt
import json
import struct
import warnings
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import CellParams, CellState, cell_forward, init_state, init_weight
from .config import NetworkConfig
from .errors import DataError, DimensionError, FormatError, NumericalError
from .quantiles import SubrangeSpec, weight_matrix

MAGIC = b"AQRN"
FORMAT_VERSION = 1
WEEKS = 52


def patchify(x, m: int, u: int = 24) -> np.ndarray:
    """Split a window of ``m*u`` values into ``m`` daily patches."""
    x = np.asarray(x)
    if x.shape[-1] != m * u:
        raise DimensionError(f"patchify: window of length {x.shape[-1]}, expected {m}*{u}")
    return x.reshape(x.shape[:-1] + (m, u))


def week_index(date) -> int:
    """ISO week number, with week 53 folded into week 52."""
    if isinstance(date, np.datetime64):
        date = date.astype("datetime64[D]").item()
    return min(date.isocalendar()[1], WEEKS)


def week_onehot(date) -> np.ndarray:
    v = np.zeros(WEEKS)
    v[week_index(date) - 1] = 1.0
    return v


def week_embedding(date, weights: Tensor | np.ndarray) -> Tensor:
    """``onehot(week) @ weights`` with ``weights`` of shape ``(52, size)``."""
    return ad.matmul(week_onehot(date)[None, :], weights)


class QuantileModel:
    """Parameters of the context track, adapters and the primary teams."""

    def __init__(self, config: NetworkConfig, n_series: int, seed: int = 0,
                 region_ids: list[str] | None = None):
        self.config = config
        self.n_series = n_series
        self.region_ids = list(region_ids) if region_ids is not None else [str(i) for i in range(n_series)]
        c = config
        self.spec = SubrangeSpec(c.knots, c.half_overlap)
        self.top_k, self.team_size = c.members
        self.n_teams = self.spec.n
        self.n_members = self.n_teams * self.team_size
        self.streams = 1 if c.no_patches else c.input_days + 1
        self.stream_in = (c.input_days + 1) * c.resolution if c.no_patches else c.resolution
        self.horizon = c.horizon_days * c.resolution
        self.dilations = c.layer_dilations

        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(rng)
        primary_base = 2 + c.embedded_context_len + c.date_embedding_size
        context_base = 1 + c.date_embedding_size
        self.pad_primary = self._pad_index(rng, primary_base)
        self.pad_context = self._pad_index(rng, context_base)

    # ------------------------------------------------------------------
    # construction

    def _pad_index(self, rng, base: int) -> np.ndarray:
        u = self.config.resolution
        if base > u:
            raise DimensionError(f"auxiliary inputs need {base} slots but a patch holds {u}")
        return np.concatenate([np.arange(base), rng.integers(0, base, size=u - base)])

    def _uniform(self, rng, fan_in, shape):
        lim = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)

    def _init_track(self, rng, prefix: str, lead: int, extra_in: int, head_in_extra: int, head_out: int):
        c = self.config
        H, u, P, cv = c.patch_hidden, c.resolution, self.streams, c.patch_context
        width = 3 * (H + u) + H
        din = self.stream_in
        for li in range(len(self.dilations)):
            n_in = din + cv + extra_in
            self.params[f"{prefix}{li}.ctx_W"] = self._uniform(rng, P * din, (lead, P * din, P * cv))
            self.params[f"{prefix}{li}.ctx_b"] = self._uniform(rng, P * din, (lead, 1, P * cv))
            self.params[f"{prefix}{li}.weight"] = Tensor(init_weight(rng, n_in, H, width, (lead, P)),
                                                         requires_grad=True)
            self.params[f"{prefix}{li}.b"] = self._uniform(rng, n_in, (lead, P, 1, width))
            din = u
        fan = P * u + head_in_extra
        self.params[f"{prefix}head_W"] = self._uniform(rng, fan, (lead, fan, head_out))
        self.params[f"{prefix}head_b"] = self._uniform(rng, fan, (lead, 1, head_out))

    def _init_params(self, rng):
        c = self.config
        L, lc, E = self.n_series, c.series_context_len, c.embedded_context_len
        self.params["date_W"] = self._uniform(rng, 1, (WEEKS, c.date_embedding_size))
        if not c.no_context:
            self._init_track(rng, "ctx.", 1, 0, 0, lc)
            self.params["adapt.global_W"] = self._uniform(rng, L * lc, (L * lc, E))
            self.params["adapt.global_b"] = self._uniform(rng, L * lc, (1, E))
            s_in = E if c.sequential_adapters else L * lc
            self.params["adapt.series_W"] = self._uniform(rng, s_in, (L, s_in, E))
            self.params["adapt.series_b"] = self._uniform(rng, s_in, (L, E))
        self._init_track(rng, "pri.", self.n_members, 1, 1, self.horizon + 1)

    # ------------------------------------------------------------------
    # helpers

    def cell_params(self, prefix: str, layer: int) -> CellParams:
        p = self.params
        key = f"{prefix}{layer}."
        return CellParams(p[key + "weight"], p[key + "b"], self.config.patch_hidden, self.config.resolution)

    def per_series_params(self) -> list[str]:
        return [k for k in self.params if k.startswith("adapt.series_")]

    def new_states(self, prefix: str, lead: int, rows: int) -> list[CellState]:
        c = self.config
        return [init_state(d, c.patch_hidden, c.resolution, (lead, self.streams, rows)) for d in self.dilations]

    # ------------------------------------------------------------------
    # forward pieces

    def _track_step(self, prefix: str, X: Tensor, states, qcol=None, qhead=None) -> Tensor:
        """One recurrent step of a track.  ``X`` is ``(lead, streams, rows, d)``."""
        p = self.params
        for li in range(len(self.dilations)):
            G, P, B, din = X.shape
            flat = ad.reshape(ad.transpose(X, (0, 2, 1, 3)), (G, B, P * din))
            v = flat @ p[f"{prefix}{li}.ctx_W"] + p[f"{prefix}{li}.ctx_b"]
            v = ad.transpose(ad.reshape(v, (G, B, P, -1)), (0, 2, 1, 3))
            parts = [X, v] if qcol is None else [X, v, qcol]
            X, _, _ = cell_forward(ad.concat(parts, axis=-1), states[li], self.cell_params(prefix, li),
                                   name=f"{prefix}layer{li}")
        G, P, B, u = X.shape
        flat = ad.reshape(ad.transpose(X, (0, 2, 1, 3)), (G, B, P * u))
        if qhead is not None:
            flat = ad.concat([flat, qhead], axis=-1)
        return flat @ p[f"{prefix}head_W"] + p[f"{prefix}head_b"]

    def _stream_inputs(self, aux: Tensor, patches: np.ndarray) -> Tensor:
        """Stack the auxiliary patch ``(G, B, u)`` with daily patches ``(m, B, u)``."""
        G, B, u = aux.shape
        m = patches.shape[0]
        if self.config.no_patches:
            wide = np.broadcast_to(patches.transpose(1, 0, 2).reshape(1, B, m * u), (G, B, m * u))
            return ad.reshape(ad.concat([aux, wide], axis=-1), (G, 1, B, (m + 1) * u))
        return ad.concat([ad.reshape(aux, (G, 1, B, u)), np.broadcast_to(patches, (G, m, B, u))], axis=1)

    def date_vector(self, date) -> Tensor:
        return week_embedding(date, self.params["date_W"])

    def context_step(self, x: np.ndarray, mean: np.ndarray, date_vec: Tensor, states) -> Tensor:
        """Run the context track on all series; returns the flat ``(1, L*len)`` context."""
        L = x.shape[0]
        if L != self.n_series:
            raise DataError(f"context step needs all {self.n_series} series, got {L}")
        de = date_vec.shape[-1]
        base = ad.concat([mean.reshape(1, L, 1), ad.broadcast_to(ad.reshape(date_vec, (1, 1, de)), (1, L, de))], axis=-1)
        aux = ad.take(base, self.pad_context, axis=-1)
        X = self._stream_inputs(aux, x.transpose(1, 0, 2))
        out = self._track_step("ctx.", X, states)
        return ad.reshape(out, (1, -1))

    def adapt_context(self, flat: Tensor, series_ids) -> Tensor:
        """Series-specific context ``(rows, E)`` from the flat context vector."""
        c = self.config
        p = self.params
        ids = np.asarray(series_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_series):
            raise KeyError(f"series id out of range 0..{self.n_series - 1}")
        width = flat.shape[-1]
        if width != p["adapt.global_W"].shape[0]:
            raise DimensionError(f"flat context of length {width}, expected {p['adapt.global_W'].shape[0]}")
        glob = flat @ p["adapt.global_W"] + p["adapt.global_b"]
        E = c.embedded_context_len
        rows = ids.size

        def per_series(inp):
            W = ad.take(p["adapt.series_W"], ids, axis=0)
            b = ad.take(p["adapt.series_b"], ids, axis=0)
            z = ad.reshape(inp, (1, 1, inp.shape[-1])) @ W
            return ad.reshape(z, (rows, E)) + b

        if c.sequential_adapters:
            return per_series(glob)
        terms = []
        if not c.no_global_adapter:
            terms.append(ad.broadcast_to(glob, (rows, E)))
        if not c.no_per_series_adapter:
            terms.append(per_series(flat))
        if not terms:
            return Tensor(np.zeros((rows, E)))
        return terms[0] if len(terms) == 1 else terms[0] + terms[1]

    def primary_step(self, x: np.ndarray, mean: np.ndarray, q: np.ndarray, context: Tensor | None,
                     date_vec: Tensor, states):
        """One step of the primary teams.

        ``x`` is ``(rows, m, u)``, ``mean`` ``(rows,)``, ``q`` ``(n_teams, rows)``.
        Returns ``(forecast, confidence)`` of shapes ``(G, rows, h*u)`` and
        ``(G, rows)`` where ``G = n_teams * team_size``.
        """
        c = self.config
        B = x.shape[0]
        G = self.n_members
        qg = np.repeat(np.asarray(q, dtype=float).reshape(self.n_teams, B), self.team_size, axis=0)
        E, de = c.embedded_context_len, date_vec.shape[-1]
        ctx = context if context is not None else Tensor(np.zeros((B, E)))
        base = ad.concat([
            qg[:, :, None],
            ad.broadcast_to(ad.reshape(ctx, (1, B, E)), (G, B, E)),
            np.broadcast_to(mean.reshape(1, B, 1), (G, B, 1)),
            ad.broadcast_to(ad.reshape(date_vec, (1, 1, de)), (G, B, de)),
        ], axis=-1)
        aux = ad.take(base, self.pad_primary, axis=-1)
        X = self._stream_inputs(aux, x.transpose(1, 0, 2))
        qcol = np.broadcast_to(qg[:, None, :, None], (G, self.streams, B, 1))
        out = self._track_step("pri.", X, states, qcol=qcol, qhead=qg[:, :, None])
        if not np.all(np.isfinite(out.data)):
            raise NumericalError("non-finite primary output")
        forecast = ad.leaky_relu(out[..., : self.horizon], c.leaky_slope)
        confidence = ad.softplus(out[..., self.horizon])
        return forecast, confidence

    # ------------------------------------------------------------------
    # serialization

    def header(self) -> dict:
        return {
            "network": self.config.model_dump(mode="json"),
            "n_series": self.n_series,
            "region_ids": self.region_ids,
            "pad_primary": self.pad_primary.tolist(),
            "pad_context": self.pad_context.tolist(),
        }


class Rollout:
    """Recurrent state of both tracks for a fixed set of primary rows."""

    def __init__(self, model: QuantileModel, series_ids):
        self.model = model
        self.series_ids = np.asarray(series_ids, dtype=np.intp)
        rows = self.series_ids.size
        self.ctx_states = None if model.config.no_context else model.new_states("ctx.", 1, model.n_series)
        self.pri_states = model.new_states("pri.", model.n_members, rows)

    def step(self, windows, day: int, q: np.ndarray):
        """Advance one day; ``day`` is the first target day of the step."""
        model = self.model
        date_vec = model.date_vector(windows.panel.dates[day - 1])
        context = None
        if self.ctx_states is not None:
            x_all, mean_all = windows.inputs(day)
            flat = model.context_step(x_all, np.nan_to_num(mean_all), date_vec, self.ctx_states)
            context = model.adapt_context(flat, self.series_ids)
        x, mean = windows.inputs(day, self.series_ids)
        forecast, conf = model.primary_step(x, mean, q, context, date_vec, self.pri_states)
        return forecast, conf, mean


def team_aggregate(forecast: np.ndarray, conf: np.ndarray, n_teams: int, top_k: int) -> np.ndarray:
    """Median of the ``top_k`` most confident members of each team.

    ``forecast`` is ``(G, rows, H)`` and ``conf`` ``(G, rows)`` with members
    grouped by team; returns ``(n_teams, rows, H)``.
    """
    G, B, H = forecast.shape
    M = G // n_teams
    f = forecast.reshape(n_teams, M, B, H)
    p = conf.reshape(n_teams, M, B)
    order = np.argsort(-p, axis=1, kind="stable")[:, :top_k]
    top = np.take_along_axis(f, order[..., None], axis=1)
    return np.median(top, axis=1)


def predict(model: QuantileModel, windows, days, quantiles, series=None, chunk: int = 20,
            warmup: int | None = None, sort_levels: bool = False) -> np.ndarray:
    """Denormalized, non-negative forecasts ``(series, days, quantiles, h*u)``.

    Forecasts for consecutive target days come from rollouts that start fresh
    ``warmup`` days before each chunk of ``chunk`` days, matching the rollout
    lengths seen in training.  ``sort_levels`` rearranges each step's values so
    they are non-decreasing in the quantile level.
    """
    quantiles = np.asarray(quantiles, dtype=float)
    if np.any((quantiles <= 0) | (quantiles >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")
    series = np.arange(model.n_series) if series is None else np.asarray(series, dtype=np.intp)
    days = np.asarray(days, dtype=int)
    warmup = max(model.dilations) if warmup is None else warmup
    S, Q = series.size, quantiles.size
    rows_series = np.repeat(series, Q)
    rows_q = np.tile(quantiles, S)
    q_in = np.broadcast_to(rows_q, (model.n_teams, rows_q.size))
    weights = weight_matrix(rows_q, model.spec)  # (rows, n_teams)
    out = np.zeros((S, days.size, Q, model.horizon))
    wanted = {int(d): i for i, d in enumerate(days)}
    todo = sorted(wanted)
    while todo:
        start = todo[0]
        end = start + chunk
        first = max(start - warmup, windows.m)
        rollout = Rollout(model, rows_series)
        for day in range(first, min(end, todo[-1] + 1)):
            forecast, conf, mean = rollout.step(windows, day, q_in)
            if day not in wanted:
                continue
            team = team_aggregate(forecast.data, conf.data, model.n_teams, model.top_k)
            blended = np.einsum("rt,trh->rh", weights, team)
            mean = np.where(np.isnan(mean) | (mean <= 0), 0.0, mean)
            value = np.maximum(blended * mean[:, None], 0.0)
            out[:, wanted[day]] = value.reshape(S, Q, -1)
        todo = [d for d in todo if d >= end]
    return sort_over_levels(out, quantiles) if sort_levels else out


def sort_over_levels(pred: np.ndarray, quantiles) -> np.ndarray:
    """Rearrange axis 2 of ``pred`` so values increase with the quantile level."""
    order = np.argsort(quantiles, kind="stable")
    out = pred.copy()
    out[:, :, order] = np.sort(pred[:, :, order], axis=2)
    return out


def ensemble_predict(models, windows, days, quantiles, series=None, sort_levels: bool = False,
                     **kw) -> np.ndarray:
    """Per-coordinate median across independently trained models."""
    preds = [predict(m, windows, days, quantiles, series, **kw) for m in models]
    out = preds[0] if len(preds) == 1 else np.median(np.stack(preds), axis=0)
    return sort_over_levels(out, quantiles) if sort_levels else out


# ----------------------------------------------------------------------
# model files


def save_model(model: QuantileModel, path) -> None:
    header = json.dumps(model.header(), sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"model file truncated at byte {len(self.blob)} (needed {self.pos + n})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path, expected: NetworkConfig | None = None) -> QuantileModel:
    """Read a model file.  If ``expected`` disagrees with the stored network
    settings, the stored ones are used and a warning is issued."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    config = NetworkConfig.model_validate(header["network"])
    if expected is not None and expected != config:
        diff = sorted(k for k, v in expected.model_dump().items() if header["network"].get(k) != v)
        warnings.warn(f"model file settings override requested ones for: {', '.join(diff)}", stacklevel=2)
    model = QuantileModel(config, header["n_series"], seed=0, region_ids=header["region_ids"])
    model.pad_primary = np.asarray(header["pad_primary"], dtype=np.intp)
    model.pad_context = np.asarray(header["pad_context"], dtype=np.intp)
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape))
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise FormatError(f"{path}: unexpected tensor {name} {tuple(shape)}")
        model.params[name].data = data.astype(np.float64)
        seen.add(name)
    if seen != set(model.params):
        raise FormatError(f"{path}: missing tensors {sorted(set(model.params) - seen)}")
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return model


def round_to_float32(model: QuantileModel) -> None:
    for t in model.params.values():
        t.data = t.data.astype(np.float32).astype(np.float64)


def origin_date(windows, day: int) -> dt.date:
    """Calendar date of the first target day."""
    return windows.panel.dates[day].astype("datetime64[D]").item()
