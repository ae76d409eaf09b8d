import numpy as np
import pytest

from relight import backend
from relight.data import DegradeParams, PairedSample, synth_degrade


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _float32_default():
    # every test starts from the training dtype; precision() contexts nest
    backend.set_dtype(np.float32)
    yield
    backend.set_dtype(np.float32)
    backend.set_scan_backend("auto")


@pytest.fixture(params=["numpy", "numba"] if backend.HAS_NUMBA else ["numpy"])
def scan_backend(request):
    backend.set_scan_backend(request.param)
    yield request.param
    backend.set_scan_backend("auto")


def make_clean_image(rng: np.random.Generator, h: int = 96, w: int = 96) -> np.ndarray:
    """Procedural stand-in for a photograph: smooth gradients plus blobs."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) / max(h, w)
    img = np.zeros((3, h, w), np.float32)
    for c in range(3):
        img[c] = (
            rng.uniform(0.25, 0.75)
            + rng.uniform(-0.3, 0.3) * yy
            + rng.uniform(-0.3, 0.3) * xx
        )
    for _ in range(5):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(4, h / 3)
        blob = np.exp(
            -(((np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None] - cx) ** 2) / (2 * r * r))
        )
        img[int(rng.integers(3))] += rng.uniform(-0.35, 0.35) * blob.astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_pairs(
    rng: np.random.Generator,
    count: int,
    h: int = 64,
    w: int = 64,
    sigma_range: tuple = (0.01, 0.05),
):
    """Synthetic low/high pairs with per-pair degradation parameters."""
    pairs = []
    for i in range(count):
        high = make_clean_image(rng, h, w)
        low = synth_degrade(
            high,
            DegradeParams(
                gamma=float(rng.uniform(2.0, 3.5)),
                scale=float(rng.uniform(0.3, 0.7)),
                noise_sigma=float(rng.uniform(*sigma_range)),
                seed=int(rng.integers(2**31)),
            ),
        )
        pairs.append(PairedSample(low, high, f"pair{i:04d}"))
    return pairs
