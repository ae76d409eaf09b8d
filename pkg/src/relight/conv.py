"""2D convolution ops: standard, grouped/depthwise, strided, and transposed.

Forward paths extract strided windows (zero-copy views) and contract them
with einsum/tensordot; backward scatters per kernel offset, which keeps
everything vectorized without np.add.at. Weight layout is (out, in/groups,
kh, kw) for conv2d and (in, out, kh, kw) for conv_transpose2d.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, _finish


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_offsets(target: np.ndarray, col: np.ndarray, stride: int) -> None:
    # col: (b, c, oh, ow, kh, kw); accumulate into target at strided origins
    _, _, oh, ow, kh, kw = col.shape
    for i in range(kh):
        for j in range(kw):
            target[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col[
                ..., i, j
            ]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation with zero padding.

    Output extents follow floor((h + 2*padding - kh)/stride) + 1. Depthwise
    convolution is groups == channels with weight shape (c, 1, kh, kw).
    """
    bsz, cin, h, wd = x.shape
    cout, cing, kh, kw = w.shape
    if cin % groups or cout % groups or cing != cin // groups:
        raise DimensionError(
            f"groups={groups} incompatible with weight {w.shape} and input {x.shape}"
        )
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)  # (b, cin, oh, ow, kh, kw)
    oh, ow = win.shape[2], win.shape[3]

    if groups == 1:
        y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (b, oh, ow, cout)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    elif groups == cin and cout == cin:
        y = np.einsum("bchwkl,ckl->bchw", win, w.data[:, 0], optimize=True)
    else:
        cpg_in, cpg_out = cin // groups, cout // groups
        y = np.empty((bsz, cout, oh, ow), dtype=x.data.dtype)
        for g in range(groups):
            wg = w.data[g * cpg_out : (g + 1) * cpg_out]
            wing = win[:, g * cpg_in : (g + 1) * cpg_in]
            yg = np.tensordot(wing, wg, axes=([1, 4, 5], [1, 2, 3]))
            y[:, g * cpg_out : (g + 1) * cpg_out] = yg.transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data

    def bwd(g):
        if groups == 1:
            gw = np.einsum("bohw,bihwkl->oikl", g, win, optimize=True)
            gcol = np.einsum("bohw,oikl->bihwkl", g, w.data, optimize=True)
        elif groups == cin and cout == cin:
            gw = np.einsum("bchw,bchwkl->ckl", g, win, optimize=True)[:, None]
            gcol = np.einsum("bchw,ckl->bchwkl", g, w.data[:, 0], optimize=True)
        else:
            cpg_in, cpg_out = cin // groups, cout // groups
            gw = np.empty_like(w.data)
            gcol = np.empty(win.shape, dtype=x.data.dtype)
            for gi in range(groups):
                gs = g[:, gi * cpg_out : (gi + 1) * cpg_out]
                wing = win[:, gi * cpg_in : (gi + 1) * cpg_in]
                gw[gi * cpg_out : (gi + 1) * cpg_out] = np.einsum(
                    "bohw,bihwkl->oikl", gs, wing, optimize=True
                )
                gcol[:, gi * cpg_in : (gi + 1) * cpg_in] = np.einsum(
                    "bohw,oikl->bihwkl", gs, w.data[gi * cpg_out : (gi + 1) * cpg_out],
                    optimize=True,
                )
        gxp = np.zeros(
            (bsz, cin, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype
        )
        _scatter_offsets(gxp, gcol, stride)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        gb = None
        if b is not None:
            gb = g.sum(axis=(0, 2, 3), keepdims=True).reshape(b.shape)
        return (np.ascontiguousarray(gx), gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    if b is None:
        return _finish(y, inputs, lambda g: bwd(g)[:2])
    return _finish(y, inputs, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution; stride 2 with a 2x2 kernel exactly doubles
    the spatial extents. Weight layout (in, out, kh, kw)."""
    bsz, cin, h, wd = x.shape
    win_c, cout, kh, kw = w.shape
    if win_c != cin:
        raise DimensionError(f"transposed-conv weight {w.shape} incompatible with {x.shape}")
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    col = np.einsum("bihw,iokl->bohwkl", x.data, w.data, optimize=True)
    y = np.zeros((bsz, cout, oh, ow), dtype=x.data.dtype)
    _scatter_offsets(y, col, stride)
    if b is not None:
        y = y + b.data

    def bwd(g):
        gwin = _windows(g, kh, kw, stride)  # (b, cout, h, wd, kh, kw)
        gx = np.einsum("bohwkl,iokl->bihw", gwin, w.data, optimize=True)
        gw = np.einsum("bihw,bohwkl->iokl", x.data, gwin, optimize=True)
        gb = None
        if b is not None:
            gb = g.sum(axis=(0, 2, 3), keepdims=True).reshape(b.shape)
        return (np.ascontiguousarray(gx), gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    if b is None:
        return _finish(y, inputs, lambda g: bwd(g)[:2])
    return _finish(y, inputs, bwd)
