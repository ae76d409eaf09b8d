"""Selective state-space scan: discretization, oracle, fast path, 2D merge.

The 1D recurrence maps an input sequence u through a diagonal hidden state:

    h_t = a_bar_t * h_{t-1} + b_bar_t * u_t
    y_t = <c_sel_t, h_t> + d * u_t  (+ local bias, which stays outside the
                                     recurrence and is purely additive)

with input-dependent (a_bar, b_bar, c_sel) produced by zero-order-hold
discretization of per-step sizes delta and selection projections of the
input itself. `selective_scan_seq` is the deliberately plain one-step-at-a-
time reference; `selective_scan_fast` dispatches to the compiled/blocked
kernels and must agree with it. `ssm_2d` runs four directional traversals
of a (b,c,h,w) grid and sums the un-permuted results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backend, kernels
from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

SMALL_Z = kernels.SMALL_Z
N_DIRECTIONS = 4


# --------------------------------------------------------------------------
# Array-level contracts (the oracle side works on plain numpy arrays)


@dataclass
class ScanInputs:
    """Pre-scan sequences: u/delta (batch, length, channels), selections
    (batch, length, state)."""

    u: np.ndarray
    delta: np.ndarray
    b_sel: np.ndarray
    c_sel: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.delta.shape:
            raise DimensionError(f"u {self.u.shape} and delta {self.delta.shape} differ")
        if self.b_sel.shape != self.c_sel.shape:
            raise DimensionError("b_sel and c_sel shapes differ")
        if self.b_sel.shape[:2] != self.u.shape[:2]:
            raise DimensionError("selection and input disagree on (batch, length)")


def discretize(delta: np.ndarray, a: np.ndarray, b_sel: Optional[np.ndarray] = None):
    """Zero-order hold: a_bar = exp(delta*a), b_bar = ((exp(delta*a)-1)/a)*b.

    Near delta*a = 0 the exact ratio degenerates to 0/0; below |delta*a| <
    1e-4 the series delta*(1 + delta*a/2) takes over. Inputs broadcast;
    delta must be strictly positive and a strictly negative.
    """
    delta = np.asarray(delta)
    a = np.asarray(a)
    if np.any(delta <= 0):
        raise ContractError("discretize requires delta > 0")
    if np.any(a >= 0):
        raise ContractError("discretize requires a < 0")
    z = delta * a
    a_bar = np.exp(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (a_bar - 1.0) / a
    coef = np.where(np.abs(z) < SMALL_Z, delta * (1.0 + 0.5 * z), exact)
    if b_sel is None:
        return a_bar, coef
    return a_bar, coef * b_sel


def selective_scan_seq(
    inputs: ScanInputs,
    a: np.ndarray,
    d: np.ndarray,
    local_bias: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Reference scan: exact left-to-right recurrence, one step per position.

    a is (channels, state) and strictly negative, d is (channels,). This is
    the oracle every faster variant is checked against; it stays simple on
    purpose.
    """
    u, delta = inputs.u, inputs.delta
    b_sel, c_sel = inputs.b_sel, inputs.c_sel
    bsz, length, ch = u.shape
    m = a.shape[1]
    h = np.zeros((bsz, ch, m), dtype=u.dtype)
    y = np.empty_like(u)
    for t in range(length):
        a_bar, b_bar = discretize(delta[:, t, :, None], a, b_sel[:, t, None, :])
        h = a_bar * h + b_bar * u[:, t, :, None]
        y[:, t] = np.einsum("bcm,bm->bc", h, c_sel[:, t]) + d * u[:, t]
    if local_bias is not None:
        y = y + local_bias
    return y


def selective_scan_fast(
    inputs: ScanInputs,
    a: np.ndarray,
    d: np.ndarray,
    local_bias: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Fast scan with identical semantics to selective_scan_seq.

    Dispatches to the numba kernel or the blocked numpy kernel depending on
    the active backend; both vectorize the inner work over channels and
    state while carrying boundary states across blocks.
    """
    # kernels use (B, C, L) inputs with (B, L, M) selections
    u = np.ascontiguousarray(inputs.u.transpose(0, 2, 1))
    delta = np.ascontiguousarray(inputs.delta.transpose(0, 2, 1))
    bs = np.ascontiguousarray(inputs.b_sel)
    cs = np.ascontiguousarray(inputs.c_sel)
    y, _ = kernels.scan_forward(u, delta, np.ascontiguousarray(a), bs, cs,
                                np.ascontiguousarray(d), store_h=False)
    y = y.transpose(0, 2, 1)
    if local_bias is not None:
        y = y + local_bias
    return np.ascontiguousarray(y)


# --------------------------------------------------------------------------
# Tape op: differentiable scan on rank-4 tensors


def scan_op(
    u: Tensor,
    delta: Tensor,
    a_log: Tensor,
    b_sel: Tensor,
    c_sel: Tensor,
    d: Tensor,
    local_bias: Optional[Tensor] = None,
) -> Tensor:
    """Differentiable selective scan over (b, c, L, 1) sequence tensors.

    a_log (c, m, 1, 1) stores log(-a), so the state matrix a = -exp(a_log)
    is negative by construction; gradients flow back to a_log. b_sel/c_sel
    are (b, m, L, 1), d is (c, 1, 1, 1). The optional local bias (b, c, L, 1)
    is added outside the recurrence.
    """
    bsz, ch, length, _ = u.shape
    m = a_log.shape[1]
    if delta.shape != u.shape:
        raise DimensionError(f"delta {delta.shape} must match u {u.shape}")
    if b_sel.shape != (bsz, m, length, 1) or c_sel.shape != (bsz, m, length, 1):
        raise DimensionError("selection tensors must be (b, m, L, 1)")
    if local_bias is not None and local_bias.shape != u.shape:
        raise DimensionError(f"local bias {local_bias.shape} must match u {u.shape}")
    if backend.debug_checks and np.any(delta.data <= 0):
        raise ContractError("scan requires delta > 0")

    a = -np.exp(a_log.data.reshape(ch, m))
    uv = u.data.reshape(bsz, ch, length)
    dv = delta.data.reshape(bsz, ch, length)
    # selections go to the kernels in (B, L, M) layout for locality
    bv = np.ascontiguousarray(b_sel.data.reshape(bsz, m, length).transpose(0, 2, 1))
    cv = np.ascontiguousarray(c_sel.data.reshape(bsz, m, length).transpose(0, 2, 1))
    dskip = d.data.reshape(ch)

    tracked = [u, delta, a_log, b_sel, c_sel, d]
    if local_bias is not None:
        tracked.append(local_bias)
    recording = T.active_tape() is not None and any(
        t.requires_grad or t._tape is T.active_tape() for t in tracked
    )
    y, saved = kernels.scan_forward(uv, dv, a, bv, cv, dskip, store_h=recording)
    if local_bias is not None:
        y = y + local_bias.data.reshape(bsz, ch, length)

    def bwd(g):
        gy = np.ascontiguousarray(g.reshape(bsz, ch, length))
        gu, gdelta, ga, gb, gc, gd = kernels.scan_backward(
            uv, dv, a, bv, cv, dskip, saved, gy
        )
        ga_log = ga * a  # d a / d a_log = -exp(a_log) = a
        out = [
            gu.reshape(u.shape),
            gdelta.reshape(delta.shape),
            ga_log.reshape(a_log.shape),
            np.ascontiguousarray(gb.transpose(0, 2, 1)).reshape(b_sel.shape),
            np.ascontiguousarray(gc.transpose(0, 2, 1)).reshape(c_sel.shape),
            gd.reshape(d.shape),
        ]
        if local_bias is not None:
            out.append(g.copy())
        return tuple(out)

    inputs = [u, delta, a_log, b_sel, c_sel, d]
    if local_bias is not None:
        inputs.append(local_bias)
    return T._finish(y.reshape(bsz, ch, length, 1), tuple(inputs), bwd)


# --------------------------------------------------------------------------
# Selection and 2D cross-scan


@dataclass
class DirectionParams:
    """Scan parameters for one traversal direction."""

    a_log: Tensor  # (c, m, 1, 1), stores log(-a)
    skip: Tensor  # (c, 1, 1, 1) feedthrough gain
    dt_bias: Tensor  # (1, c, 1, 1) offset inside the step-size selection
    w_dt: Tensor  # (1, c, 1, 1) rank-1 step-size projection
    w_b: Tensor  # (m, c, 1, 1)
    w_c: Tensor  # (m, c, 1, 1)


@dataclass
class SSMParams:
    """Independent parameter groups for the four scan directions."""

    directions: list[DirectionParams]

    def __post_init__(self):
        if len(self.directions) != N_DIRECTIONS:
            raise DimensionError(f"expected {N_DIRECTIONS} direction groups")


def selection(x: Tensor, p: DirectionParams):
    """Input-dependent scan parameters for one direction.

    delta = softplus(dt_bias + w_dt x) broadcast from the rank-1 projection
    to every channel, so it is strictly positive; b_sel/c_sel are plain
    linear maps into the state dimension.
    """
    dt = T.softplus(T.add(T.linear(x, p.w_dt), p.dt_bias))
    return dt, T.linear(x, p.w_b), T.linear(x, p.w_c)


def cross_scan_2d(x: Tensor) -> list[Tensor]:
    """Flatten a (b,c,h,w) grid into 4 directed sequences (b,c,h*w,1).

    0: row-major, left-to-right then top-to-bottom
    1: reverse of 0
    2: column-major, top-to-bottom then left-to-right
    3: reverse of 2
    All four are pure permutations of the grid.
    """
    rows = T.flatten_spatial(x)
    cols = T.flatten_spatial(T.transpose_hw(x))
    return [rows, T.reverse_seq(rows), cols, T.reverse_seq(cols)]


def cross_merge_2d(ys: list[Tensor], h: int, w: int) -> Tensor:
    """Invert each directional permutation back to the grid and sum."""
    if len(ys) != N_DIRECTIONS:
        raise DimensionError(f"expected {N_DIRECTIONS} directional outputs")
    d0 = T.unflatten_spatial(ys[0], h, w)
    d1 = T.unflatten_spatial(T.reverse_seq(ys[1]), h, w)
    d2 = T.transpose_hw(T.unflatten_spatial(ys[2], w, h))
    d3 = T.transpose_hw(T.unflatten_spatial(T.reverse_seq(ys[3]), w, h))
    return T.add(T.add(d0, d1), T.add(d2, d3))


def ssm_2d(x: Tensor, params: SSMParams, local_bias: Optional[Tensor] = None) -> Tensor:
    """Four-direction selective scan over a feature grid.

    Each direction gets its own selection and scan; the local bias is split
    as bias/4 per direction so the merged sum carries it exactly once.
    Merging is a plain sum in fixed direction order (so with all scan
    parameters zeroed except skip gain 1, the output is 4x the input).
    """
    h, w = x.shape[2], x.shape[3]
    seqs = cross_scan_2d(x)
    bias_seqs = [None] * N_DIRECTIONS
    if local_bias is not None:
        if local_bias.shape != x.shape:
            raise DimensionError(f"local bias {local_bias.shape} must match x {x.shape}")
        quarter = T.mul_scalar(local_bias, 0.25)
        bias_seqs = cross_scan_2d(quarter)
    outs = []
    for k in range(N_DIRECTIONS):
        p = params.directions[k]
        dt, b_sel, c_sel = selection(seqs[k], p)
        outs.append(scan_op(seqs[k], dt, p.a_log, b_sel, c_sel, p.skip, bias_seqs[k]))
    return cross_merge_2d(outs, h, w)
