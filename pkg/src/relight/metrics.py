"""Quality metrics (PSNR, SSIM) and effective-receptive-field analysis.

PSNR is computed jointly over RGB with dynamic range 1. SSIM uses the
standard 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03) per channel,
restricted to windows fully inside the image: enhancement nets are
sensitive to padding artifacts at borders, so none are introduced here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import backend
from . import tensor as T
from .data import PairedSample
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, tape

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    ids: list
    psnr_db: list
    ssim: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


@dataclass
class ERFMap:
    """Max-normalized input-gradient footprint of one output pixel."""

    grid: np.ndarray  # (h, w), values in [0, 1]
    source: tuple


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10*log10(1/MSE) with dynamic range 1.0; identical inputs cap at 100 dB."""
    if pred.shape != target.shape:
        raise DimensionError(f"psnr shapes differ: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable valid-region filtering via strided windows
    out = sliding_window_view(img, len(kernel), axis=0) @ kernel
    return sliding_window_view(out, len(kernel), axis=1) @ kernel


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over all valid 11x11 windows, per channel then averaged."""
    if pred.shape != target.shape:
        raise DimensionError(f"ssim shapes differ: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    if pred.shape[1] < SSIM_WINDOW or pred.shape[2] < SSIM_WINDOW:
        raise DataError(
            f"image {pred.shape[1]}x{pred.shape[2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    k = _gaussian_window()
    vals = []
    for ch in range(pred.shape[0]):
        x = pred[ch].astype(np.float64)
        y = target[ch].astype(np.float64)
        mu_x = _filter_valid(x, k)
        mu_y = _filter_valid(y, k)
        var_x = _filter_valid(x * x, k) - mu_x * mu_x
        var_y = _filter_valid(y * y, k) - mu_y * mu_y
        cov = _filter_valid(x * y, k) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# Effective receptive field


def erf_map(model, image: np.ndarray, source: Optional[tuple] = None) -> ERFMap:
    """Gradient of one output pixel with respect to every input pixel.

    Runs a forward pass, seeds the gradient with 1 on all channels of the
    output pixel at `source` (default: center), backpropagates to the input,
    and reduces per pixel by the L1 norm over channels, max-normalized.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"erf_map expects a (3, h, w) image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    if source is None:
        source = (h // 2, w // 2)
    sy, sx = source
    if not (0 <= sy < h and 0 <= sx < w):
        raise ConfigError(f"source {source} outside image extents {h}x{w}")
    x = Tensor(image[None].astype(backend.DTYPE), requires_grad=True)
    mask = np.zeros((1, 3, h, w), dtype=backend.DTYPE)
    mask[0, :, sy, sx] = 1.0
    with tape() as tp:
        out = model.forward(x)
        picked = T.sum_all(T.mul(out, Tensor(mask)))
        tp.backward(picked)
    grid = np.abs(x.grad[0]).sum(axis=0)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return ERFMap(grid=grid, source=(sy, sx))


# --------------------------------------------------------------------------
# Dataset evaluation


def evaluate_arrays(model, dataset: list[PairedSample]) -> tuple[float, float]:
    """Mean (PSNR, SSIM) of full-image enhancement over a paired dataset."""
    if not dataset:
        raise DataError("evaluation dataset is empty")
    ps, ss = [], []
    for pair in dataset:
        out = model.enhance_array(pair.low)
        ps.append(psnr(out, pair.high))
        ss.append(ssim(out, pair.high))
    return float(np.mean(ps)), float(np.mean(ss))


def evaluate(model, dataset: list[PairedSample], out_csv: Optional[Path | str] = None) -> MetricReport:
    """Per-image metrics plus a trailing mean row, optionally written as CSV."""
    if not dataset:
        raise DataError("evaluation dataset is empty")
    report = MetricReport(ids=[], psnr_db=[], ssim=[])
    for pair in dataset:
        out = model.enhance_array(pair.low)
        report.ids.append(pair.id)
        report.psnr_db.append(psnr(out, pair.high))
        report.ssim.append(ssim(out, pair.high))
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w") as f:
            f.write("id,psnr_db,ssim\n")
            for i, pid in enumerate(report.ids):
                f.write(f"{pid},{report.psnr_db[i]:.6f},{report.ssim[i]:.6f}\n")
            f.write(f"mean,{report.mean_psnr:.6f},{report.mean_ssim:.6f}\n")
    return report
