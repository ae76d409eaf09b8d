"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Every value in the network is a Tensor: a contiguous (batch, channel,
height, width) float array plus an optional gradient buffer. Ops record
themselves on the active Tape; Tape.backward replays the records in exact
reverse execution order, accumulating gradients into every tensor that
requires them. With no tape active, ops run data-only (inference mode).

Layout is row-major BCHW throughout. Binary ops broadcast only along axes
of extent 1 (numpy semantics restricted to rank 4); anything fancier must
be an explicit reshape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend
from .errors import ContractError, DimensionError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        data = np.ascontiguousarray(data)
        if data.ndim != 4:
            raise DimensionError(f"tensors are rank-4 (b,c,h,w); got shape {data.shape}")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a rank-4 tensor in the active dtype."""
    arr = np.asarray(data, dtype=backend.DTYPE)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=backend.DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=backend.DTYPE), requires_grad=requires_grad)


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=backend.DTYPE))


# --------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss.

        Gradients from multiple uses of the same tensor are summed. The tape
        is single-shot: a second backward without a fresh forward raises.
        """
        if self.consumed:
            raise ContractError("tape already consumed; run a new forward pass first")
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced by this tape (stale tape)")
        self.consumed = True
        loss.grad = np.ones((1, 1, 1, 1), dtype=loss.data.dtype)
        for rec in reversed(self.records):
            gout = rec.output.grad
            if gout is None:
                continue
            grads = rec.backward_fn(gout)
            for t, g in zip(rec.inputs, grads):
                if g is None or not isinstance(t, Tensor):
                    continue
                if not (t.requires_grad or t._tape is self):
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
        self.records.clear()


_active_tape: Optional[Tape] = None


class tape:
    """Context manager installing a fresh tape: `with tape() as t: ...`."""

    def __enter__(self) -> Tape:
        global _active_tape
        self._prev = _active_tape
        _active_tape = Tape()
        return _active_tape

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False


def active_tape() -> Optional[Tape]:
    return _active_tape


def _finish(out_data: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap an op result, registering it on the tape when gradients flow."""
    if backend.debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by forward op")
    out = Tensor(np.ascontiguousarray(out_data))
    t = _active_tape
    if t is not None and not t.consumed and any(
        isinstance(x, Tensor) and (x.requires_grad or x._tape is t) for x in inputs
    ):
        out.requires_grad = True
        out._tape = t
        t.records.append(_Record(list(inputs), out, backward_fn))
    return out


# --------------------------------------------------------------------------
# Elementwise / broadcasting


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] > 1)
    return grad.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _finish(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _finish(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (with extent-1 broadcasting)."""
    _check_broadcast(a, b)
    return _finish(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _finish(a.data + s, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return _finish(a.data * s, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _finish(y, (a,), lambda g: (g * y,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # single exp of a non-positive argument: stable on both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _finish(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _finish(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x * x * x)
    t = np.tanh(inner)

    def bwd(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _finish(0.5 * x * (1.0 + t), (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    return _finish(y, (a,), lambda g: (g * _sigmoid(a.data),))


def absolute(a: Tensor) -> Tensor:
    return _finish(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# --------------------------------------------------------------------------
# Linear projection (1x1, per spatial position)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-position channel projection. w has shape (out, in, 1, 1); the
    optional bias (1, out, 1, 1) broadcasts over batch and space."""
    bsz, cin, h, wd = x.shape
    if w.shape[1] != cin or w.shape[2] != 1 or w.shape[3] != 1:
        raise DimensionError(f"linear weight {w.shape} incompatible with input {x.shape}")
    cout = w.shape[0]
    w2 = w.data.reshape(cout, cin)
    y = (w2 @ x.data.reshape(bsz, cin, h * wd)).reshape(bsz, cout, h, wd)
    if b is not None:
        y = y + b.data

    def bwd(g):
        gm = g.reshape(bsz, cout, h * wd)
        gx = (w2.T @ gm).reshape(bsz, cin, h, wd)
        gw = np.einsum("bol,bil->oi", gm, x.data.reshape(bsz, cin, h * wd))
        gb = None
        if b is not None:
            gb = g.sum(axis=(0, 2, 3), keepdims=True).reshape(b.shape)
        return (gx, gw.reshape(w.shape), gb)

    inputs = (x, w, b) if b is not None else (x, w)
    if b is None:
        return _finish(y, inputs, lambda g: bwd(g)[:2])
    return _finish(y, inputs, bwd)


# --------------------------------------------------------------------------
# Layer normalization over the channel axis


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over channels independently at each (batch, h, w) position."""
    if x.shape[1] == 0:
        raise DimensionError("layernorm needs at least one channel")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data

    def bwd(g):
        c = x.shape[1]
        gg = g * gamma.data
        gxhat_mean = gg.mean(axis=1, keepdims=True)
        prod_mean = (gg * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gg - gxhat_mean - xhat * prod_mean)
        ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True).reshape(gamma.shape)
        gbeta = g.sum(axis=(0, 2, 3), keepdims=True).reshape(beta.shape)
        return (gx.astype(x.data.dtype, copy=False), ggamma, gbeta)

    return _finish(y, (x, gamma, beta), bwd)


# --------------------------------------------------------------------------
# Shape / view ops: chunk, concat, sequence flattening, reversal, transpose


def narrow_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"bad channel slice [{start}:{stop}] for shape {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _finish(x.data[:, start:stop], (x,), bwd)


def chunk(x: Tensor, n: int) -> list[Tensor]:
    """Split into n equal parts along the channel axis."""
    c = x.shape[1]
    if c % n != 0:
        raise DimensionError(f"channel extent {c} not divisible into {n} chunks")
    step = c // n
    return [narrow_channels(x, i * step, (i + 1) * step) for i in range(n)]


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise DimensionError("concat parts must agree on batch and spatial extents")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _finish(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def flatten_spatial(x: Tensor) -> Tensor:
    """(b,c,h,w) -> (b,c,h*w,1), row-major traversal."""
    b, c, h, w = x.shape
    return _finish(
        x.data.reshape(b, c, h * w, 1),
        (x,),
        lambda g: (g.reshape(b, c, h, w),),
    )


def unflatten_spatial(x: Tensor, h: int, w: int) -> Tensor:
    b, c, l, one = x.shape
    if l != h * w or one != 1:
        raise DimensionError(f"cannot unflatten {x.shape} to spatial ({h},{w})")
    return _finish(
        x.data.reshape(b, c, h, w),
        (x,),
        lambda g: (g.reshape(b, c, l, 1),),
    )


def reverse_seq(x: Tensor) -> Tensor:
    """Reverse along the height axis (the sequence axis of flattened grids)."""
    return _finish(x.data[:, :, ::-1, :], (x,), lambda g: (g[:, :, ::-1, :],))


def transpose_hw(x: Tensor) -> Tensor:
    """Swap the spatial traversal order: (b,c,h,w) -> (b,c,w,h)."""
    return _finish(
        x.data.transpose(0, 1, 3, 2),
        (x,),
        lambda g: (g.transpose(0, 1, 3, 2),),
    )


def channel_max(x: Tensor) -> Tensor:
    """Max over channels -> (b,1,h,w); gradient routes to the argmax entry."""
    idx = np.argmax(x.data, axis=1)[:, None]
    y = np.take_along_axis(x.data, idx, axis=1)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _finish(y, (x,), bwd)


# --------------------------------------------------------------------------
# Reductions


def sum_all(x: Tensor) -> Tensor:
    s = x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1)
    return _finish(s, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    s = (x.data.sum(dtype=x.data.dtype) / n).reshape(1, 1, 1, 1)
    return _finish(
        s, (x,), lambda g: (np.broadcast_to(g.reshape(()) / n, x.shape).astype(x.data.dtype),)
    )
