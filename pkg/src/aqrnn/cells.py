"""Dilated recurrent cell with recent and delayed state inputs.

Every gate sees the input, the previous controlling output and the one from
``dilation`` steps back.  The cell state is the fused recent/delayed memory;
its first ``u`` entries form the real output passed up the stack and the
remaining ``H`` entries drive the controlling output.

Parameters may carry leading dimensions (e.g. team member x patch stream), in
which case one call advances all those independent cells at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

GATES = ("f", "i", "g", "o")


@dataclass
class CellParams:
    """Gate weights of one cell (or a stack of independent cells).

    ``weight`` stacks the input matrix ``W``, the recent-state matrix ``V`` and
    the delayed-state matrix ``U`` row-wise, so a single product computes all
    gate pre-activations.  Columns are laid out as ``[f | i | g | o]``; the f,
    i and g blocks are ``H + u`` wide, the o block ``H`` wide.
    """

    weight: Tensor
    b: Tensor
    hidden: int
    out: int

    @property
    def state_size(self) -> int:
        return self.hidden + self.out

    @property
    def n_in(self) -> int:
        return self.weight.shape[-2] - 2 * self.hidden

    def gate_slice(self, gate: str) -> slice:
        c = self.state_size
        start = {"f": 0, "i": c, "g": 2 * c, "o": 3 * c}[gate]
        return slice(start, start + (self.hidden if gate == "o" else c))

    def row_slice(self, kind: str) -> slice:
        n, H = self.n_in, self.hidden
        return {"W": slice(0, n), "V": slice(n, n + H), "U": slice(n + H, n + 2 * H)}[kind]

    def matrix(self, kind: str, gate: str, array: np.ndarray | None = None) -> np.ndarray:
        """View of one of the twelve gate matrices, e.g. ``matrix("U", "f")``.

        Pass ``array`` (e.g. a gradient of ``weight``) to slice that instead.
        """
        src = self.weight.data if array is None else array
        return src[..., self.row_slice(kind), self.gate_slice(gate)]


def init_params(rng: np.random.Generator, n_in: int, hidden: int, out: int,
                lead: tuple[int, ...] = ()) -> CellParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per matrix."""
    width = 3 * (hidden + out) + hidden
    return CellParams(
        weight=Tensor(init_weight(rng, n_in, hidden, width, lead), requires_grad=True),
        b=Tensor(uniform(rng, n_in, lead + (1, width)), requires_grad=True),
        hidden=hidden,
        out=out,
    )


def uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def init_weight(rng, n_in: int, hidden: int, width: int, lead: tuple[int, ...] = ()) -> np.ndarray:
    return np.concatenate([
        uniform(rng, n_in, lead + (n_in, width)),
        uniform(rng, hidden, lead + (hidden, width)),
        uniform(rng, hidden, lead + (hidden, width)),
    ], axis=-2)


@dataclass
class CellState:
    """Ring buffers of the last ``dilation`` controlling outputs and cell states."""

    dilation: int
    h: list = field(default_factory=list)
    c: list = field(default_factory=list)
    step: int = 0

    def recent(self):
        k = (self.step - 1) % self.dilation
        return self.h[k], self.c[k]

    def delayed(self):
        k = self.step % self.dilation
        return self.h[k], self.c[k]

    def push(self, h: Tensor, c: Tensor) -> None:
        k = self.step % self.dilation
        self.h[k] = h
        self.c[k] = c
        self.step += 1


def init_state(dilation: int, hidden: int, out: int, batch_shape: tuple[int, ...] = ()) -> CellState:
    """Zero-filled buffers; slots not yet written read as zero vectors."""
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    h0 = Tensor(np.zeros(batch_shape + (hidden,)))
    c0 = Tensor(np.zeros(batch_shape + (hidden + out,)))
    return CellState(dilation, [h0] * dilation, [c0] * dilation)


def cell_forward(x: Tensor, state: CellState, params: CellParams, name: str = "cell"):
    """Advance the cell one step.

    ``x`` has shape ``(*lead, batch, n_in)``.  Returns ``(y, h, state)`` with
    ``y`` of size ``u`` and ``h`` of size ``H``; ``state`` is updated in place.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != params.n_in:
        raise DimensionError(
            f"{name} (dilation {state.dilation}): input size {x.shape[-1]}, expected {params.n_in}"
        )
    h_prev, c_prev = state.recent()
    h_del, c_del = state.delayed()
    pre = ad.concat([x, h_prev, h_del], axis=-1) @ params.weight + params.b
    f = ad.sigmoid(pre[..., params.gate_slice("f")])
    i = ad.sigmoid(pre[..., params.gate_slice("i")])
    g = ad.tanh(pre[..., params.gate_slice("g")])
    o = ad.sigmoid(pre[..., params.gate_slice("o")])
    # f*c_prev + (1-f)*c_del and i*g + (1-i)*c_mix, written with one product each
    c_mix = c_del + f * (c_prev - c_del)
    c = c_mix + i * (g - c_mix)
    y = c[..., : params.out]
    h = o * ad.tanh(c[..., params.out:])
    state.push(h, c)
    return y, h, state
