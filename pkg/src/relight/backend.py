"""Runtime switches: scan-kernel backend, float precision, debug checks.

The hot scan kernels exist twice, once as numba @njit functions and once in
pure numpy. `RELIGHT_SCAN_BACKEND` (auto | numba | numpy) picks at import
time; `set_scan_backend` overrides at runtime. `auto` means numba when it is
importable, numpy otherwise.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

_VALID_BACKENDS = ("auto", "numba", "numpy")

_scan_backend = os.environ.get("RELIGHT_SCAN_BACKEND", "auto").lower()
if _scan_backend not in _VALID_BACKENDS:
    raise ValueError(
        f"RELIGHT_SCAN_BACKEND={_scan_backend!r}: expected one of {_VALID_BACKENDS}"
    )

# Training/inference run in float32; gradient checking flips this to float64
# because central differences drown in float32 rounding noise.
DTYPE = np.float32

# When true, every op asserts its output is finite. Off on the hot path.
debug_checks = False


def set_scan_backend(name: str) -> None:
    global _scan_backend
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown scan backend {name!r}: expected one of {_VALID_BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _scan_backend = name


def use_numba() -> bool:
    if _scan_backend == "numba":
        return True
    if _scan_backend == "numpy":
        return False
    return HAS_NUMBA


def scan_backend_name() -> str:
    return "numba" if use_numba() else "numpy"


def set_dtype(dtype) -> None:
    global DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("only float32 and float64 are supported")
    DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global float width (used by gradient checks)."""
    prev = DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    global debug_checks
    prev = debug_checks
    debug_checks = enabled
    try:
        yield
    finally:
        debug_checks = prev
