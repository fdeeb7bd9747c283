"""Team training: pinball loss, confidence ranking, restricted backward
pass through the selected members, loss-balance controllers and the epoch
loop with batch-size and learning-rate schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step, backward
from .config import RunConfig, TrainConfig
from .dataset import Panel, Split, Windows, chrono_split
from .errors import ConfigError, NumericalError
from .network import QuantileModel, Rollout
from .quantiles import sample_train_quantile

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses and ranking


def pinball(y, y_hat, q):
    """Quantile loss ``(y - y_hat) q`` if ``y >= y_hat`` else ``(y - y_hat)(q - 1)``."""
    d = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return np.where(d >= 0, d * q, d * (q - 1.0))


def pinball_tensor(y: np.ndarray, y_hat: ad.Tensor, q: np.ndarray) -> ad.Tensor:
    """Mean pinball loss over the last axis, differentiable in ``y_hat``."""
    d = ad.sub(y, y_hat)
    per = ad.add(ad.hadamard(q[..., None], d), ad.relu(ad.scale(d, -1.0)))
    return ad.mean(per, axis=-1)


@dataclass
class RankTable:
    """Confidence rank (1 = most confident) and accuracy rank (1 = lowest loss)."""

    rank_p: np.ndarray
    rank_L: np.ndarray

    @property
    def classification(self) -> np.ndarray:
        """+1 overconfident, -1 underconfident, 0 matched."""
        return np.sign(self.rank_L - self.rank_p).astype(int)


def _ranks(order: np.ndarray, axis: int) -> np.ndarray:
    ranks = np.empty_like(order)
    idx = np.arange(1, order.shape[axis] + 1)
    shape = [1] * order.ndim
    shape[axis] = -1
    np.put_along_axis(ranks, order, np.broadcast_to(idx.reshape(shape), order.shape), axis=axis)
    return ranks


def rank_members(confidences, losses, axis: int = 0) -> RankTable:
    """Rank team members along ``axis``; ties go to the lower member index."""
    p = np.asarray(confidences, dtype=float)
    L = np.asarray(losses, dtype=float)
    rank_p = _ranks(np.argsort(-p, axis=axis, kind="stable"), axis)
    rank_L = _ranks(np.argsort(L, axis=axis, kind="stable"), axis)
    return RankTable(rank_p, rank_L)


def member_loss(pin, p, classification, gamma1: float, gamma2: float):
    """Pinball plus the confidence term for the member's rank classification."""
    cls = np.asarray(classification)
    coef = np.where(cls > 0, gamma1, np.where(cls < 0, -gamma1 * gamma2, 0.0))
    return pin + coef * p


def select_members(confidences, losses, k: int, rng: np.random.Generator | None = None,
                   crit_prob: float = 1.0, training: bool = True) -> np.ndarray:
    """Indices of the ``k`` members picked for aggregation / backpropagation.

    In training the criterion is confidence with probability ``crit_prob`` and
    accuracy otherwise; outside training it is always confidence.
    """
    by_conf = True
    if training and crit_prob < 1.0:
        if rng is None:
            raise ValueError("a generator is needed to draw the selection criterion")
        by_conf = rng.random() < crit_prob
    return _top_k(np.asarray(confidences), np.asarray(losses), k, by_conf, axis=0)


def _top_k(conf, losses, k, by_conf, axis):
    key = -conf if by_conf else losses
    return np.take(np.argsort(key, axis=axis, kind="stable"), np.arange(k), axis=axis)


def selection_mask(conf, losses, k, by_conf, axis) -> np.ndarray:
    chosen = _top_k(conf, losses, k, by_conf, axis)
    mask = np.zeros(conf.shape, dtype=bool)
    np.put_along_axis(mask, chosen, True, axis=axis)
    return mask


# --------------------------------------------------------------------------
# controllers


@dataclass
class ControllerState:
    gamma1: float = 0.0
    gamma2: float = 1.0
    pinball_sum: float = 0.0
    pinball_count: int = 0
    over_conf_sum: float = 0.0
    over_count: int = 0
    batches: int = 0

    @property
    def mean_pinball(self) -> float:
        return self.pinball_sum / self.pinball_count if self.pinball_count else 0.0

    @property
    def mean_over_conf(self) -> float:
        return self.over_conf_sum / self.over_count if self.over_count else 0.0

    def reset_window(self) -> None:
        self.pinball_sum = self.over_conf_sum = 0.0
        self.pinball_count = self.over_count = 0


def update_gamma1(state: ControllerState, ratio: float) -> float:
    """``mean pinball / (ratio * mean overconfident confidence)``; unchanged when
    the window saw no overconfident case."""
    p_over = state.mean_over_conf
    if state.over_count == 0 or p_over <= 0:
        return state.gamma1
    return state.mean_pinball / (ratio * p_over)


def update_gamma2(state: ControllerState, c: float = 0.01, rule: str = "literal", ratio: float = 5.0) -> float:
    """``gamma2 + sign(mean pinball) * c``, or with ``rule="ratio"`` the sign of
    the deviation of the accuracy/confidence loss ratio from its target."""
    lq = state.mean_pinball
    if rule == "literal":
        return state.gamma2 + np.sign(lq) * c
    conf_loss = state.gamma1 * state.mean_over_conf
    if conf_loss <= 0:
        return state.gamma2
    return state.gamma2 + np.sign(lq / conf_loss - ratio) * c


def close_window(state: ControllerState, cfg: TrainConfig) -> None:
    g1 = update_gamma1(state, cfg.losses_ratio)
    state.gamma1 = g1
    state.gamma2 = float(update_gamma2(state, cfg.controller_c, cfg.gamma2_rule, cfg.losses_ratio))
    state.reset_window()


# --------------------------------------------------------------------------
# schedules


def _piecewise(schedule: dict[int, float], epoch: int):
    keys = [k for k in sorted(schedule) if k <= epoch]
    return schedule[keys[-1]] if keys else None


def batch_sizes(cfg: TrainConfig) -> list[int]:
    return [int(_piecewise(cfg.batch_schedule, e)) for e in range(cfg.epochs)]


def learning_rates(cfg: TrainConfig) -> list[float]:
    out = []
    for e in range(cfg.epochs):
        div = _piecewise(cfg.lr_divisors, e)
        out.append(cfg.learning_rate / (div if div else 1.0))
    return out


def updates_per_epoch(cfg: TrainConfig) -> list[int]:
    """Sublinear decay with batch size: ``u_1 * (b_1 / b_e) ** exponent``."""
    if cfg.updates_per_epoch is not None:
        return list(cfg.updates_per_epoch[: cfg.epochs])
    sizes = batch_sizes(cfg)
    return [int(round(cfg.updates_first_epoch * (sizes[0] / b) ** cfg.updates_exponent)) for b in sizes]


# --------------------------------------------------------------------------
# one update


@dataclass
class TrainState:
    adam: AdamState
    controller: ControllerState
    batch: int = 0
    history: list[dict] = field(default_factory=list)


def warmup_steps(model: QuantileModel, cfg: TrainConfig) -> int:
    return max(model.dilations) if cfg.warmup_steps is None else cfg.warmup_steps


@dataclass
class UnrolledLoss:
    """Taped loss of one update plus the bookkeeping the controllers need."""

    tape: Tape
    loss: ad.Tensor | None
    n_selected: int = 0
    pinball_sum: float = 0.0
    confidence_sum: float = 0.0
    over_conf_sum: float = 0.0
    over_count: int = 0
    selected: list = field(default_factory=list)  # (G, B) masks per scored step


def unrolled_loss(model: QuantileModel, batch, windows: Windows, day0: int, q: np.ndarray, by_conf: bool,
                  cfg: TrainConfig, gamma1: float, gamma2: float) -> UnrolledLoss:
    """Unroll warmup plus ``training_steps`` days from target day ``day0``.

    ``q`` is ``(n_teams, len(batch))``.  The loss is the mean over selected
    (member, series, step) cases of the pinball loss plus the confidence
    term; members that are not selected do not enter the loss at all.
    """
    batch = np.asarray(batch, dtype=np.intp)
    S, M, K = model.n_teams, model.team_size, model.top_k
    B = batch.size
    G = S * M
    qg = np.repeat(q, M, axis=0)
    warm = warmup_steps(model, cfg)
    total = None
    out = UnrolledLoss(Tape(), None)
    with out.tape:
        rollout = Rollout(model, batch)
        for t in range(warm + cfg.training_steps):
            day = day0 + t
            forecast, conf, mean = rollout.step(windows, day, q)
            if t < warm:
                continue
            y = windows.targets(day, batch)
            pin = pinball_tensor(y[None], forecast, qg)
            pv = pin.data.reshape(S, M, B)
            cv = conf.data.reshape(S, M, B)
            lit = (mean > 0)[None, None, :]
            cls = rank_members(cv, pv, axis=1).classification
            sel = selection_mask(cv, pv, K, by_conf, axis=1) & lit
            out.selected.append(sel.reshape(G, B))
            if not sel.any():
                continue
            coef = np.where(cls > 0, gamma1, np.where(cls < 0, -gamma1 * gamma2, 0.0))
            member = ad.add(pin, ad.hadamard(coef.reshape(G, B), conf))
            step_loss = ad.sum_(ad.hadamard(member, sel.reshape(G, B).astype(float)))
            if not math.isfinite(float(step_loss.data)):
                bad = np.argwhere(~np.isfinite(pin.data))
                g_, b_ = bad[0] if bad.size else (0, 0)
                raise NumericalError(
                    f"non-finite loss: series {batch[b_]}, day {day}, q={qg[g_, b_]:.4f}")
            total = step_loss if total is None else ad.add(total, step_loss)
            over = (cls > 0) & lit
            out.n_selected += int(sel.sum())
            out.pinball_sum += float((pv * sel).sum())
            out.confidence_sum += float((coef * cv * sel).sum())
            out.over_conf_sum += float(cv[over].sum())
            out.over_count += int(over.sum())
        if total is not None:
            out.loss = ad.scale(total, 1.0 / out.n_selected)
    return out


def train_update(model: QuantileModel, batch, windows: Windows, day0: int, rng: np.random.Generator,
                 cfg: TrainConfig, state: TrainState, lr: float) -> dict | None:
    """One update: sample a level per (team, series), unroll, backpropagate
    the selected members' losses and take an Adam step.  Returns summary
    losses, or ``None`` if every window was dark."""
    batch = np.asarray(batch, dtype=np.intp)
    ctl = state.controller
    q = np.stack([sample_train_quantile(rng, cfg.beta_shape, sub, size=batch.size)
                  for sub in model.spec.subranges])
    by_conf = bool(rng.random() < cfg.crit_selection_prob)
    run = unrolled_loss(model, batch, windows, day0, q, by_conf, cfg, ctl.gamma1, ctl.gamma2)
    if run.loss is None:
        return None
    grads = backward(run.tape, run.loss, model.params)
    run.tape.reset()
    per_series = model.per_series_params()
    adam_step(
        model.params, grads, state.adam, lr,
        lr_scale={k: cfg.lr_multiplier_per_series for k in per_series},
        active_rows={k: batch for k in per_series},
    )
    ctl.pinball_sum += run.pinball_sum
    ctl.pinball_count += run.n_selected
    ctl.over_conf_sum += run.over_conf_sum
    ctl.over_count += run.over_count
    state.batch += 1
    ctl.batches += 1
    summary = {
        "loss": float(run.loss.data),
        "pinball": run.pinball_sum / run.n_selected,
        "confidence": run.confidence_sum / run.n_selected,
        "pinball_sum": run.pinball_sum, "n_selected": run.n_selected,
        "over_conf_sum": run.over_conf_sum, "over_count": run.over_count,
    }
    if state.batch % cfg.controller_every == 0:
        close_window(ctl, cfg)
    return summary


# --------------------------------------------------------------------------
# fitting


def rollout_origins(split: Split, windows: Windows, cfg: TrainConfig, warm: int) -> np.ndarray:
    """First target days from which a whole training rollout stays inside the training range."""
    lo = windows.m
    hi = split.train[1] - windows.h - (warm + cfg.training_steps - 1)
    return np.arange(lo, hi + 1)


def fit(panel: Panel, split: Split, config: RunConfig, seed: int | None = None,
        log_fn=None) -> tuple[QuantileModel, list[dict]]:
    """Train one model on the training range of ``split``."""
    seed = config.seed if seed is None else seed
    net, cfg = config.network, config.training
    model = QuantileModel(net, panel.n_series, seed=seed, region_ids=panel.region_ids)
    windows = Windows(panel, net.input_days, net.horizon_days)
    warm = warmup_steps(model, cfg)
    origins = rollout_origins(split, windows, cfg, warm)
    if origins.size == 0:
        raise ConfigError(
            f"training range of {split.train[1]} days is too short for m={net.input_days}, "
            f"h={net.horizon_days}, warmup={warm}, steps={cfg.training_steps}")
    rng = np.random.default_rng(seed + 7919)
    state = TrainState(AdamState(model.params), ControllerState(cfg.gamma1_init, cfg.gamma2_init))
    sizes, rates, counts = batch_sizes(cfg), learning_rates(cfg), updates_per_epoch(cfg)
    history = []
    window_losses = []
    for epoch in range(cfg.epochs):
        b = min(sizes[epoch], panel.n_series)
        for _ in range(counts[epoch]):
            batch = np.sort(rng.choice(panel.n_series, size=b, replace=False))
            day0 = int(rng.choice(origins))
            out = train_update(model, batch, windows, day0, rng, cfg, state, rates[epoch])
            if out is None:
                continue
            window_losses.append(out)
            if state.batch % cfg.controller_every == 0:
                row = {
                    "batch": state.batch,
                    "pinball": float(np.mean([o["pinball"] for o in window_losses])),
                    "confidence": float(np.mean([o["confidence"] for o in window_losses])),
                    "gamma1": state.controller.gamma1,
                    "gamma2": state.controller.gamma2,
                    "lr": rates[epoch],
                    "batch_size": b,
                }
                history.append(row)
                window_losses = []
                if log_fn is not None:
                    log_fn(format_log_line(row))
    return model, history


LOG_FIELDS = ("batch", "pinball", "confidence", "gamma1", "gamma2", "lr", "batch_size")


def format_log_line(row: dict) -> str:
    return "\t".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in LOG_FIELDS)


def fit_from_dates(panel: Panel, config: RunConfig, seed: int | None = None, log_fn=None):
    s = config.split
    split = chrono_split(panel, s.train_end, s.valid_end, s.test_end)
    return fit(panel, split, config, seed=seed, log_fn=log_fn)
