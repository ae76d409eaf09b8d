"""Finite-difference verification of every differentiable kernel.

Everything runs in float64 (float32 rounding drowns the comparison) with
central differences of step 1e-4. Each check builds a scalar loss from a
fresh forward pass, takes autodiff gradients once, then re-evaluates the
loss twice per probed coordinate. Small tensors are swept exhaustively;
the end-to-end model check probes a fixed random sample of coordinates in
every parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import backend
from . import tensor as T
from .conv import conv2d, conv_transpose2d
from .model import Enhancer, ModelConfig, named_params
from .scan import DirectionParams, SSMParams, scan_op, ssm_2d
from .tensor import Tensor, tape
from .train import mae_loss

FD_STEP = 1e-4
REL_TOL = 1e-3
_DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < REL_TOL


def fd_check(
    make_loss: Callable[[], Tensor],
    wrt: list[Tensor],
    coords_per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    step: float = FD_STEP,
) -> float:
    """Max relative error between autodiff and central differences.

    coords_per_tensor=None sweeps every coordinate; otherwise that many
    random coordinates per tensor are probed.
    """
    for t in wrt:
        t.grad = None
    with tape() as tp:
        loss = make_loss()
        tp.backward(loss)
    ad = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    worst = 0.0
    for t, g_ad in zip(wrt, ad):
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_tensor is None or coords_per_tensor >= n:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=coords_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = make_loss().item()
            flat[i] = orig - step
            lm = make_loss().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            a = g_ad.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), _DENOM_FLOOR)
            worst = max(worst, rel)
    return worst


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection catches permutation/sign errors a plain sum would hide
    return T.sum_all(T.mul(out, Tensor(w)))


def _elementwise_checks(rng) -> list[CheckResult]:
    shape = (2, 3, 4, 4)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    yb = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
    w = rng.standard_normal(shape)
    cases = {
        "add(broadcast)": lambda: _weighted_sum(T.add(x, yb), w),
        "sub(broadcast)": lambda: _weighted_sum(T.sub(x, yb), w),
        "mul(broadcast)": lambda: _weighted_sum(T.mul(x, yb), w),
        "neg": lambda: _weighted_sum(T.neg(x), w),
        "exp": lambda: _weighted_sum(T.exp(T.mul_scalar(x, 0.3)), w),
        "sigmoid": lambda: _weighted_sum(T.sigmoid(x), w),
        "silu": lambda: _weighted_sum(T.silu(x), w),
        "gelu": lambda: _weighted_sum(T.gelu(x), w),
        "softplus": lambda: _weighted_sum(T.softplus(x), w),
        "scalar_ops": lambda: _weighted_sum(T.add_scalar(T.mul_scalar(x, 1.7), 0.3), w),
    }
    out = [CheckResult(n, fd_check(f, [x, yb])) for n, f in cases.items()]
    # keep |x| away from 0 so the abs subgradient is unambiguous
    xa = Tensor(rng.standard_normal(shape) + np.sign(rng.standard_normal(shape)) * 1.0,
                requires_grad=True)
    out.append(CheckResult("abs", fd_check(lambda: _weighted_sum(T.absolute(xa), w), [xa])))
    xm = Tensor(rng.standard_normal(shape), requires_grad=True)
    out.append(
        CheckResult(
            "channel_max",
            fd_check(lambda: _weighted_sum(T.channel_max(xm), w[:, :1]), [xm]),
        )
    )
    return out


def _linear_checks(rng) -> list[CheckResult]:
    x = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True)
    pw = rng.standard_normal((2, 2, 2, 2))
    return [
        CheckResult(
            "linear", fd_check(lambda: _weighted_sum(T.linear(x, w, b), pw), [x, w, b])
        )
    ]


def _conv_checks(rng) -> list[CheckResult]:
    results = []
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
    pw = rng.standard_normal((2, 4, 6, 6))
    results.append(
        CheckResult(
            "conv2d_3x3",
            fd_check(lambda: _weighted_sum(conv2d(x, w, b, padding=1), pw), [x, w, b]),
        )
    )
    xd = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    wd = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.3, requires_grad=True)
    pd = rng.standard_normal((2, 3, 8, 8))
    results.append(
        CheckResult(
            "conv2d_depthwise",
            fd_check(
                lambda: _weighted_sum(conv2d(xd, wd, padding=1, groups=3), pd), [xd, wd]
            ),
        )
    )
    xs = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    ws = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.3, requires_grad=True)
    ps = rng.standard_normal((1, 4, 4, 4))
    results.append(
        CheckResult(
            "conv2d_stride2",
            fd_check(
                lambda: _weighted_sum(conv2d(xs, ws, stride=2, padding=1), ps), [xs, ws]
            ),
        )
    )
    xt = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    wt = Tensor(rng.standard_normal((4, 2, 2, 2)) * 0.3, requires_grad=True)
    bt = Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True)
    pt = rng.standard_normal((1, 2, 8, 8))
    results.append(
        CheckResult(
            "conv_transpose2d",
            fd_check(
                lambda: _weighted_sum(conv_transpose2d(xt, wt, bt, stride=2), pt),
                [xt, wt, bt],
            ),
        )
    )
    return results


def _norm_reshape_checks(rng) -> list[CheckResult]:
    x = Tensor(rng.standard_normal((1, 4, 2, 2)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, (1, 4, 1, 1)), requires_grad=True)
    beta = Tensor(rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
    pw = rng.standard_normal((1, 4, 2, 2))
    results = [
        CheckResult(
            "layernorm",
            fd_check(
                lambda: _weighted_sum(T.layernorm(x, gamma, beta), pw), [x, gamma, beta]
            ),
        )
    ]
    xr = Tensor(rng.standard_normal((2, 4, 3, 5)), requires_grad=True)
    pr = rng.standard_normal((2, 4, 3, 5))

    def reshape_loss():
        a, b = T.chunk(xr, 2)
        back = T.concat([b, a])
        flipped = T.transpose_hw(T.reverse_seq(back))
        return _weighted_sum(T.transpose_hw(flipped), pr)

    results.append(CheckResult("chunk/concat/reverse/transpose", fd_check(reshape_loss, [xr])))
    ps = rng.standard_normal((2, 4, 15, 1))
    results.append(
        CheckResult(
            "flatten_spatial",
            fd_check(lambda: _weighted_sum(T.flatten_spatial(xr), ps), [xr]),
        )
    )
    return results


def _scan_checks(rng) -> list[CheckResult]:
    b, c, l, m = 1, 2, 12, 4
    u = Tensor(rng.standard_normal((b, c, l, 1)), requires_grad=True)
    delta = Tensor(rng.uniform(0.3, 1.5, (b, c, l, 1)), requires_grad=True)
    a_log = Tensor(rng.uniform(-0.5, 1.0, (c, m, 1, 1)), requires_grad=True)
    b_sel = Tensor(rng.standard_normal((b, m, l, 1)), requires_grad=True)
    c_sel = Tensor(rng.standard_normal((b, m, l, 1)), requires_grad=True)
    d = Tensor(rng.standard_normal((c, 1, 1, 1)), requires_grad=True)
    bias = Tensor(rng.standard_normal((b, c, l, 1)), requires_grad=True)
    pw = rng.standard_normal((b, c, l, 1))
    results = [
        CheckResult(
            "selective_scan",
            fd_check(
                lambda: _weighted_sum(scan_op(u, delta, a_log, b_sel, c_sel, d, bias), pw),
                [u, delta, a_log, b_sel, c_sel, d, bias],
            ),
        )
    ]
    x2 = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    dirs = []
    for _ in range(4):
        dirs.append(
            DirectionParams(
                a_log=Tensor(rng.uniform(-0.5, 1.0, (2, 4, 1, 1)), requires_grad=True),
                skip=Tensor(rng.standard_normal((2, 1, 1, 1)), requires_grad=True),
                dt_bias=Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True),
                w_dt=Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True),
                w_b=Tensor(rng.standard_normal((4, 2, 1, 1)), requires_grad=True),
                w_c=Tensor(rng.standard_normal((4, 2, 1, 1)), requires_grad=True),
            )
        )
    ssm = SSMParams(dirs)
    bias2 = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    p2 = rng.standard_normal((1, 2, 3, 3))
    wrt = [x2, bias2]
    for dp in dirs:
        wrt += [dp.a_log, dp.skip, dp.dt_bias, dp.w_dt, dp.w_b, dp.w_c]
    results.append(
        CheckResult(
            "ssm_2d",
            fd_check(lambda: _weighted_sum(ssm_2d(x2, ssm, bias2), p2), wrt),
        )
    )
    return results


def _end_to_end_check(rng, coords_per_tensor: int = 2) -> CheckResult:
    cfg = ModelConfig(base_width=8)
    model = Enhancer.create(cfg, seed=17)
    # the tail starts zero-initialized; nudge it so gradients reach every path
    for name, t in named_params(model.params):
        if name.startswith("tail"):
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    low = Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    high = Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    wrt = [t for _, t in named_params(model.params)]
    err = fd_check(
        lambda: mae_loss(model.forward(low), high),
        wrt,
        coords_per_tensor=coords_per_tensor,
        rng=rng,
    )
    return CheckResult("end_to_end(C=8, 16x16, MAE)", err)


def run_gradcheck(seed: int = 0, report=print) -> list[CheckResult]:
    """Full 64-bit finite-difference suite; prints one line per check."""
    results = []
    with backend.precision(np.float64):
        rng = np.random.default_rng(seed)
        for group in (
            _elementwise_checks,
            _linear_checks,
            _conv_checks,
            _norm_reshape_checks,
            _scan_checks,
        ):
            results.extend(group(rng))
        results.append(_end_to_end_check(rng))
    if report is not None:
        for r in results:
            report(f"{'PASS' if r.ok else 'FAIL'}  {r.name:42s} max rel err {r.max_rel_err:.3e}")
    return results


def gradcheck_passed(results: list[CheckResult]) -> bool:
    return all(r.ok for r in results)
