"""Quantile levels: training-time sampling, the evaluation grid and
overlapping subranges with linear blending between neighbouring teams."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError


def test_grid() -> np.ndarray:
    """The 101 evaluation levels 0.001, 0.01, 0.02, ..., 0.99, 0.999."""
    return np.concatenate([[0.001], np.arange(1, 100) / 100.0, [0.999]])


test_grid.__test__ = False  # keep pytest from collecting the name


@dataclass(frozen=True)
class SubrangeSpec:
    """Knots split (0, 1); each knot is widened by ``half_overlap`` on both sides."""

    knots: tuple[float, ...] = (0.2, 0.6)
    half_overlap: float = 0.1

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        d = self.half_overlap
        if k.size == 0:
            if d != 0:
                object.__setattr__(self, "half_overlap", 0.0)
            return
        if np.any(np.diff(k) <= 0):
            raise ConfigError(f"subrange knots must be strictly increasing: {self.knots}")
        if d < 0 or k[0] - d <= 0 or k[-1] + d >= 1 or np.any(np.diff(k) < 2 * d):
            raise ConfigError(f"overlap +-{d} does not fit knots {self.knots} inside (0, 1)")

    @cached_property
    def subranges(self) -> list[tuple[float, float]]:
        # bounds are decimal settings; rounding makes 0.2 + 0.1 exactly 0.3
        lows = [0.0] + [round(k - self.half_overlap, 12) for k in self.knots]
        highs = [round(k + self.half_overlap, 12) for k in self.knots] + [1.0]
        return list(zip(lows, highs))

    @property
    def n(self) -> int:
        return len(self.knots) + 1


def subrange_weights(q: float, spec: SubrangeSpec) -> list[tuple[int, float]]:
    """Blend weights ``[(subrange index, weight), ...]`` for level ``q``.

    Outside the overlaps a single subrange gets weight 1.  Inside the overlap
    ``(k - d, k + d]`` around knot ``k`` the lower subrange gets
    ``a = (k + d - q) / (2 d)`` and the upper one ``1 - a``.  Zero weights are
    dropped, so at ``q = k + d`` only the upper subrange remains.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    bounds = spec.subranges
    for j in range(spec.n - 1):
        lo, hi = bounds[j + 1][0], bounds[j][1]
        if q <= lo:
            return [(j, 1.0)]
        if q <= hi:
            a = (hi - q) / (hi - lo)
            return [(i, w) for i, w in ((j, a), (j + 1, 1.0 - a)) if w > 0.0]
    return [(spec.n - 1, 1.0)]


def weight_matrix(qs, spec: SubrangeSpec) -> np.ndarray:
    """Dense ``(len(qs), n_subranges)`` version of :func:`subrange_weights`."""
    qs = np.atleast_1d(np.asarray(qs, dtype=float))
    out = np.zeros((qs.size, spec.n))
    for r, q in enumerate(qs):
        for j, w in subrange_weights(float(q), spec):
            out[r, j] = w
    return out


def blend(q: float, forecasts, spec: SubrangeSpec) -> np.ndarray:
    """Combine per-subrange forecasts for level ``q``.

    ``forecasts`` is indexable by subrange; entries with zero weight may be
    ``None``.
    """
    out = None
    for j, w in subrange_weights(q, spec):
        if j >= len(forecasts) or forecasts[j] is None:
            raise ValueError(f"forecast for subrange {j} is required at q={q}")
        term = w * np.asarray(forecasts[j], dtype=float)
        out = term if out is None else out + term
    return out


def sample_train_quantile(rng: np.random.Generator, alpha: float, subrange=(0.0, 1.0), size=None):
    """Draw ``q = q_l + B (q_u - q_l)`` with ``B ~ Beta(alpha, alpha)``.

    Small ``alpha`` pushes mass towards both ends of the subrange.
    """
    lo, hi = subrange
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"Beta shape must lie in (0, 1), got {alpha}")
    if not lo < hi:
        raise ValueError(f"empty subrange ({lo}, {hi})")
    b = rng.beta(alpha, alpha, size=size)
    q = lo + b * (hi - lo)
    return np.clip(q, np.nextafter(lo, hi), np.nextafter(hi, lo))
