"""Tape-based reverse-mode differentiation over dense numpy tensors.

Operations executed inside an active :class:`Tape` are recorded in creation
order, which is already a topological order, so :func:`backward` simply walks
the tape in reverse.  Outside a tape the same operations only compute values,
which keeps inference cheap.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericalError

DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    """A dense real array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


class Tape:
    """Ordered record of the operations executed while it is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    tracked = bool(_TAPES) and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out.parents = parents
        out.backward_fn = backward_fn
        for tape in _TAPES:  # nested tapes each keep a full record
            tape.nodes.append(out)
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, "hadamard", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(out, "matmul", (a, b), backward_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g) if _is_fancy(index) else _assign_add(full, index, g)
        return (full,)

    return _record(out, "slice", (a,), backward_fn)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, index, g):
    full[index] += g


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _record(out, "take", (a,), backward_fn)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    orig = a.shape
    return _record(out, "reshape", (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError:
        raise DimensionError(f"broadcast_to: {a.shape} to {tuple(shape)}") from None
    orig = a.shape
    return _record(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, orig),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, "sum", (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _record(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _record(out, "leaky_relu", (a,), lambda g: (np.where(pos, g, slope * g),))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _record(out, "softplus", (a,), lambda g: (g * _sigmoid(x),))


_KINDS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "hadamard": hadamard,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "softplus": softplus,
    "scale": scale,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``kind``; see the module-level functions."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradients of the scalar ``loss`` with respect to ``wrt``.

    Leaves that cannot be reached from ``loss`` get an exactly-zero array.
    Returns a dict when ``wrt`` is a mapping, otherwise a list.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()  # accumulators safe to update in place
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in grads:
                grads[key] = pg
            elif key in owned:
                grads[key] += pg
            else:
                grads[key] = grads[key] + pg
                owned.add(key)
    # what remains in ``grads`` belongs to leaves (and the loss if it is one)
    if isinstance(wrt, Mapping):
        return {k: _leaf_grad(grads, t) for k, t in wrt.items()}
    return [_leaf_grad(grads, t) for t in wrt]


def _leaf_grad(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(id(t))
    if g is None:
        return np.zeros_like(t.data)
    return np.asarray(g, dtype=DTYPE).reshape(t.shape)


# --------------------------------------------------------------------------
# optimizer


class AdamState:
    """Moment accumulators for :func:`adam_step`."""

    def __init__(self, params: Mapping[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    lr_scale: Mapping[str, float] | None = None,
    active_rows: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One bias-corrected Adam update, applied in place.

    ``active_rows`` restricts the update of a parameter to the given indices of
    its first axis (moments of the other rows are left untouched), which is
    how per-series parameters stay frozen while their series is absent.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient for {k!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        step_lr = lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
        rows = active_rows.get(k) if active_rows else None
        m, v = state.m[k], state.v[k]
        if rows is None:
            if p.data.shape != g.shape:
                raise DimensionError(f"adam_step: {k} has shape {p.data.shape}, gradient {g.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
        else:
            rows = np.unique(rows)
            gr = g[rows]
            m[rows] = b1 * m[rows] + (1.0 - b1) * gr
            v[rows] = b2 * v[rows] + (1.0 - b2) * gr * gr
            p.data[rows] -= step_lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + eps)


# --------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    n_coords: int = 100,
    rng: np.random.Generator | None = None,
    min_grad: float = 0.0,
) -> dict[str, Any]:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must rebuild the loss from the current parameter values and be
    deterministic.  Coordinates are sampled uniformly over all parameters; with
    ``min_grad > 0`` only coordinates whose analytic gradient exceeds it in
    magnitude are sampled, since central differences carry an absolute
    round-off floor of roughly ``1e-16 * |loss| / eps``.

    Returns ``max_rel_err``, ``max_abs_err`` and the number of coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, params)

    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)
              if abs(analytic[k].flat[i]) >= min_grad] if min_grad > 0 else None
    if coords is None:
        sizes = {k: p.data.size for k, p in params.items()}
        keys = list(sizes)
        total = sum(sizes.values())
        offsets = np.cumsum([0] + [sizes[k] for k in keys])
        picks = rng.choice(total, size=min(n_coords, total), replace=False)
        coords = []
        for flat in picks:
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            coords.append((keys[j], int(flat - offsets[j])))
    elif len(coords) > n_coords:
        sel = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sel]

    max_rel = 0.0
    max_abs = 0.0
    for k, i in coords:
        flat = params[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[k].flat[i])
        err = abs(a - numeric)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(1e-12, abs(a) + abs(numeric)))
    return {"max_rel_err": max_rel, "max_abs_err": max_abs, "n_coords": len(coords)}
