"""Image decoding/encoding, paired-dataset discovery, synthetic degradation.

Datasets follow the common paired-enhancement layout

    root/low/<stem>.png
    root/high/<stem>.png

matched by identical filename stem. Pixels map u8 -> v/255 on load and
round-half-up back on save, so the round trip is byte exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".bmp")


@dataclass
class PairedSample:
    """Low/normal-light pair as (3, h, w) floats in [0, 1]."""

    low: np.ndarray
    high: np.ndarray
    id: str

    def __post_init__(self):
        if self.low.shape != self.high.shape:
            raise DataError(
                f"pair '{self.id}': low {self.low.shape} != high {self.high.shape}"
            )


@dataclass
class DegradeParams:
    """Synthetic low-light recipe: gamma darkening, gain, sensor noise."""

    gamma: float = 2.5
    scale: float = 0.5
    noise_sigma: float = 0.03
    seed: int = 0

    GAMMA_RANGE = (2.0, 3.5)
    SCALE_RANGE = (0.3, 0.7)
    SIGMA_RANGE = (0.01, 0.05)

    def __post_init__(self):
        if self.gamma < 1.0:
            raise DataError("gamma must be >= 1 (darkening; 1 is the identity)")


def load_image(path: Path | str) -> np.ndarray:
    """Decode an 8-bit image file to (3, h, w) float32 in [0, 1].

    Grayscale is promoted to 3 channels; anything Pillow cannot read raises
    a DataError naming the path.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("RGB", "L") else im
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


def save_image(arr: np.ndarray, path: Path | str) -> None:
    """Write a (3,h,w) or (1,h,w) float image as an 8-bit file.

    Values clamp to [0, 1] and quantize round-half-up: 0.5 -> byte 128.
    """
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"save_image expects (1|3, h, w), got {arr.shape}")
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if q.shape[0] == 1:
        im = Image.fromarray(q[0], mode="L")
    else:
        im = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        im.save(path)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size  # (w, h)


def scan_pairs(root: Path | str) -> list[tuple[str, Path, Path]]:
    """Discover (id, low path, high path) triples under root/{low,high}.

    Pairs match by filename stem and come back sorted; unmatched files are
    logged as warnings, mismatched extents within a pair are an error.
    """
    root = Path(root)
    low_dir, high_dir = root / "low", root / "high"
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise DataError(f"dataset root {root} is missing the '{d.name}/' subdirectory")

    def index(d: Path) -> dict[str, Path]:
        return {
            p.stem: p
            for p in sorted(d.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS
        }

    lows, highs = index(low_dir), index(high_dir)
    for stem in sorted(set(lows) - set(highs)):
        log.warning("unmatched low image without a counterpart: %s", lows[stem])
    for stem in sorted(set(highs) - set(lows)):
        log.warning("unmatched high image without a counterpart: %s", highs[stem])
    pairs = []
    for stem in sorted(set(lows) & set(highs)):
        if _image_size(lows[stem]) != _image_size(highs[stem]):
            raise DataError(
                f"pair '{stem}': extents differ between {lows[stem]} and {highs[stem]}"
            )
        pairs.append((stem, lows[stem], highs[stem]))
    return pairs


def load_pairs(root: Path | str) -> list[PairedSample]:
    return [
        PairedSample(load_image(lo), load_image(hi), stem)
        for stem, lo, hi in scan_pairs(root)
    ]


def synth_degrade(high: np.ndarray, params: DegradeParams) -> np.ndarray:
    """Darken a clean image: clamp(high^gamma * scale + N(0, sigma^2), 0, 1).

    Per-pixel independent noise, deterministic under params.seed.
    """
    rng = np.random.default_rng(params.seed)
    low = np.power(high, params.gamma) * params.scale
    if params.noise_sigma > 0:
        low = low + rng.normal(0.0, params.noise_sigma, size=high.shape)
    return np.clip(low, 0.0, 1.0).astype(np.float32)
