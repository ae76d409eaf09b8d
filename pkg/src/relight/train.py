"""Supervised training: MAE objective, Adam, cosine annealing, dihedral
patch augmentation, CSV metrics log, periodic checkpoints and eval.

The loop is strictly deterministic for a fixed seed: batch sampling comes
from a dedicated Generator whose state rides along in checkpoints, so a
resumed run reproduces the uninterrupted loss trajectory bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import backend
from . import tensor as T
from .checkpoint import CheckpointBundle, load_checkpoint
from .data import PairedSample
from .errors import ConfigError, ContractError, DataError, DimensionError, TrainingDiverged
from .model import Enhancer, named_params
from .tensor import Tensor, tape

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 4
    total_iters: int = 2000
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 500

    def __post_init__(self):
        if self.patch_size % 4:
            raise ConfigError("patch_size must be divisible by 4")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "batch_size": self.batch_size,
            "total_iters": self.total_iters,
            "lr_init": repr(self.lr_init),
            "lr_min": repr(self.lr_min),
            "beta1": repr(self.beta1),
            "beta2": repr(self.beta2),
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            patch_size=int(d["patch_size"]),
            batch_size=int(d["batch_size"]),
            total_iters=int(d["total_iters"]),
            lr_init=float(d["lr_init"]),
            lr_min=float(d["lr_min"]),
            beta1=float(d["beta1"]),
            beta2=float(d["beta2"]),
            seed=int(d["seed"]),
            checkpoint_every=int(d["checkpoint_every"]),
            eval_every=int(d["eval_every"]),
        )


# --------------------------------------------------------------------------
# Loss and optimizer


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise DimensionError(f"mae shapes differ: {pred.shape} vs {target.shape}")
    return T.mean_all(T.absolute(T.sub(pred, target)))


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params: list[tuple[str, Tensor]]):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}


def adam_step(
    params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = ADAM_EPS,
) -> None:
    """Standard bias-corrected Adam update, in place; clears grads."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
        p.grad = None


def cosine_lr(iteration: int, total: int, lr_init: float, lr_min: float) -> float:
    """Cosine annealing without restarts; clamps to lr_min past the end."""
    if iteration >= total:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * iteration / total))


# --------------------------------------------------------------------------
# Batch sampling


def _dihedral(img: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 square symmetries: 4 rotations x optional horizontal flip."""
    out = np.rot90(img, code & 3, axes=(1, 2))
    if code & 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def sample_batch(
    dataset: list[PairedSample], rng: np.random.Generator, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Random crops with a shared dihedral transform per pair.

    The same window and the same transform apply to both images of a pair.
    Draw order per sample is fixed (index, y0, x0, transform) so checkpointed
    rng state replays identically.
    """
    ps = cfg.patch_size
    lows, highs = [], []
    for _ in range(cfg.batch_size):
        idx = int(rng.integers(len(dataset)))
        pair = dataset[idx]
        h, w = pair.low.shape[1], pair.low.shape[2]
        if h < ps or w < ps:
            raise DataError(
                f"image pair '{pair.id}' is {h}x{w}, smaller than patch size {ps}"
            )
        y0 = int(rng.integers(h - ps + 1))
        x0 = int(rng.integers(w - ps + 1))
        code = int(rng.integers(8))
        lows.append(_dihedral(pair.low[:, y0 : y0 + ps, x0 : x0 + ps], code))
        highs.append(_dihedral(pair.high[:, y0 : y0 + ps, x0 : x0 + ps], code))
    return (
        np.stack(lows).astype(backend.DTYPE),
        np.stack(highs).astype(backend.DTYPE),
    )


# --------------------------------------------------------------------------
# Training loop


def _grad_norms(params: list[tuple[str, Tensor]]) -> dict:
    norms = {
        name: float(np.sqrt((p.grad.astype(np.float64) ** 2).sum()))
        for name, p in params
        if p.grad is not None
    }
    total = math.sqrt(sum(n * n for n in norms.values()))
    worst = dict(sorted(norms.items(), key=lambda kv: -kv[1])[:3])
    return {"total": total, **worst}


def train(
    model: Enhancer,
    dataset: list[PairedSample],
    cfg: TrainConfig,
    out_dir: Path | str,
    eval_dataset: Optional[list[PairedSample]] = None,
    resume: Optional[CheckpointBundle] = None,
    log_hook: Optional[Callable[[int, float, float], None]] = None,
) -> Path:
    """Run the full loop; returns the path of the final checkpoint.

    Writes metrics.csv (`iter,loss,lr,psnr,ssim`; psnr/ssim only on eval
    rows) and ckpt_NNNNNN.gls snapshots under out_dir. NaN/Inf loss aborts
    with diagnostics rather than training onward silently.
    """
    from .metrics import evaluate_arrays  # deferred: metrics imports this module's loss

    if not dataset:
        raise DataError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = list(named_params(model.params))

    start_iter = 0
    if resume is not None:
        resume.apply_to(model, require_opt=True)
        state = resume.opt_state
        rng = resume.restore_rng()
        start_iter = resume.iteration
    else:
        state = AdamState(params)
        rng = np.random.default_rng(cfg.seed)

    csv_path = out_dir / "metrics.csv"
    mode = "a" if (resume is not None and csv_path.exists()) else "w"
    csv = open(csv_path, mode)
    if mode == "w":
        csv.write("iter,loss,lr,psnr,ssim\n")

    def save(it: int, path: Path):
        CheckpointBundle.capture(model, state, rng, it).write(path)

    final_path = out_dir / "ckpt_final.gls"
    try:
        for it in range(start_iter, cfg.total_iters):
            lr = cosine_lr(it, cfg.total_iters, cfg.lr_init, cfg.lr_min)
            low, high = sample_batch(dataset, rng, cfg)
            with tape() as tp:
                pred = model.forward(Tensor(low))
                loss = mae_loss(pred, Tensor(high))
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    tp.backward(loss)
                    raise TrainingDiverged(
                        f"non-finite loss {loss_val} at iteration {it} (lr={lr:.3e})",
                        iteration=it,
                        lr=lr,
                        grad_norms=_grad_norms(params),
                    )
                tp.backward(loss)
            adam_step(params, state, lr, cfg.beta1, cfg.beta2)

            done = it + 1
            psnr_s = ssim_s = ""
            if eval_dataset and cfg.eval_every and done % cfg.eval_every == 0:
                mean_psnr, mean_ssim = evaluate_arrays(model, eval_dataset)
                psnr_s, ssim_s = f"{mean_psnr:.4f}", f"{mean_ssim:.6f}"
            csv.write(f"{done},{loss_val:.8e},{lr:.8e},{psnr_s},{ssim_s}\n")
            csv.flush()
            if log_hook is not None:
                log_hook(done, loss_val, lr)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save(done, out_dir / f"ckpt_{done:06d}.gls")
        save(cfg.total_iters, final_path)
    finally:
        csv.close()
    return final_path


def resume_training(
    model: Enhancer,
    dataset: list[PairedSample],
    cfg: TrainConfig,
    out_dir: Path | str,
    ckpt_path: Path | str,
    eval_dataset: Optional[list[PairedSample]] = None,
    log_hook=None,
) -> Path:
    bundle = load_checkpoint(ckpt_path)
    return train(
        model, dataset, cfg, out_dir,
        eval_dataset=eval_dataset, resume=bundle, log_hook=log_hook,
    )
