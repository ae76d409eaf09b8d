"""Checkpoint file format and round-tripping.

Layout (all integers little-endian):

    magic   b"GLSB"
    version u16 (currently 1)
    config  u32 byte length, then UTF-8 `key = value` lines: the model
            configuration (model.* keys), training iteration, adam step
    table   u32 tensor count, then per tensor:
              u16 name length + UTF-8 name
              u8 dtype code (0 = float32, 1 = float64)
              4 x u32 extents
              raw element bytes, little-endian
            optimizer moments share the namespace as opt.m.<name> /
            opt.v.<name>
    rng     u32 byte length + serialized PCG64 state
    crc     u32 CRC32 of every preceding byte

The round trip is bitwise exact for tensors, config, optimizer state and
rng state, so a resumed run replays the interrupted trajectory.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError
from .model import Enhancer, ModelConfig, init_model, named_params

MAGIC = b"GLSB"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _encode_config(pairs: dict) -> bytes:
    text = "".join(f"{k} = {v}\n" for k, v in pairs.items())
    return text.encode("utf-8")


def _decode_config(raw: bytes) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def _pack_rng(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointFormatError(f"unsupported rng {st['bit_generator']}")
    inner = st["state"]
    return (
        inner["state"].to_bytes(16, "little")
        + inner["inc"].to_bytes(16, "little")
        + struct.pack("<BI", int(st["has_uint32"]), int(st["uinteger"]))
    )


def _unpack_rng(raw: bytes) -> np.random.Generator:
    if len(raw) != 37:
        raise CheckpointFormatError(f"rng state block has {len(raw)} bytes, expected 37")
    state = int.from_bytes(raw[0:16], "little")
    inc = int.from_bytes(raw[16:32], "little")
    has_uint32, uinteger = struct.unpack("<BI", raw[32:37])
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    return gen


class CheckpointBundle:
    """Named tensors + model config + optimizer/rng state."""

    def __init__(
        self,
        config: ModelConfig,
        tensors: dict[str, np.ndarray],
        iteration: int,
        adam_step: int,
        rng_raw: Optional[bytes],
    ):
        self.config = config
        self.tensors = tensors
        self.iteration = iteration
        self.adam_step = adam_step
        self.rng_raw = rng_raw
        self.opt_state = None  # populated by apply_to

    @classmethod
    def capture(cls, model: Enhancer, adam_state, rng: np.random.Generator, iteration: int):
        tensors: dict[str, np.ndarray] = {}
        for name, t in named_params(model.params):
            tensors[name] = t.data.copy()
        if adam_state is not None:
            for name, buf in adam_state.m.items():
                tensors[f"opt.m.{name}"] = buf.copy()
            for name, buf in adam_state.v.items():
                tensors[f"opt.v.{name}"] = buf.copy()
        return cls(
            model.config,
            tensors,
            iteration,
            adam_state.step if adam_state is not None else 0,
            _pack_rng(rng) if rng is not None else None,
        )

    # -- serialization -----------------------------------------------------

    def write(self, path: Path | str) -> None:
        parts = [MAGIC, struct.pack("<H", VERSION)]
        cfg = {f"model.{k}": v for k, v in self.config.to_dict().items()}
        cfg["iteration"] = self.iteration
        cfg["adam_step"] = self.adam_step
        blob = _encode_config(cfg)
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        parts.append(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            code = _CODE_FOR[np.dtype(arr.dtype)]
            nb = name.encode("utf-8")
            parts.append(struct.pack("<H", len(nb)))
            parts.append(nb)
            parts.append(struct.pack("<B", code))
            parts.append(struct.pack("<4I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
        rng_raw = self.rng_raw or b""
        parts.append(struct.pack("<I", len(rng_raw)))
        parts.append(rng_raw)
        body = b"".join(parts)
        body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        Path(path).write_bytes(body)

    # -- application -------------------------------------------------------

    def build_model(self) -> Enhancer:
        """Fresh model of the stored architecture with the stored weights."""
        model = Enhancer(self.config, init_model(self.config, seed=0))
        self.apply_to(model, require_opt=False)
        return model

    def apply_to(self, model: Enhancer, require_opt: bool = False) -> None:
        """Copy stored tensors into the model, validating the shape table."""
        from .train import AdamState  # deferred: train imports this module

        params = list(named_params(model.params))
        problems = []
        for name, t in params:
            stored = self.tensors.get(name)
            if stored is None:
                problems.append(f"  missing: {name} {tuple(t.shape)}")
            elif stored.shape != tuple(t.shape):
                problems.append(
                    f"  shape mismatch: {name} checkpoint {stored.shape} vs model {tuple(t.shape)}"
                )
        known = {name for name, _ in params}
        for name in self.tensors:
            base = name
            for prefix in ("opt.m.", "opt.v."):
                if name.startswith(prefix):
                    base = name[len(prefix):]
                    break
            if base not in known:
                problems.append(f"  unexpected: {name} {self.tensors[name].shape}")
        if problems:
            raise CheckpointFormatError(
                "checkpoint does not fit this model:\n" + "\n".join(problems)
            )
        for name, t in params:
            t.data = np.ascontiguousarray(self.tensors[name], dtype=t.data.dtype)
            t.grad = None
        have_opt = any(k.startswith("opt.m.") for k in self.tensors)
        if require_opt and not have_opt:
            raise CheckpointFormatError("checkpoint carries no optimizer state")
        if have_opt:
            state = AdamState(params)
            state.step = self.adam_step
            for name, _ in params:
                state.m[name] = self.tensors[f"opt.m.{name}"].copy()
                state.v[name] = self.tensors[f"opt.v.{name}"].copy()
            self.opt_state = state

    def restore_rng(self) -> np.random.Generator:
        if not self.rng_raw:
            raise CheckpointFormatError("checkpoint carries no rng state")
        return _unpack_rng(self.rng_raw)


def save_checkpoint(path: Path | str, model: Enhancer, adam_state=None,
                    rng: Optional[np.random.Generator] = None, iteration: int = 0) -> None:
    CheckpointBundle.capture(model, adam_state, rng, iteration).write(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str, what: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def load_checkpoint(path: Path | str) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 2 + 4 + 4 + 4 + 4:
        raise CheckpointFormatError("file too short to be a checkpoint", offset=len(raw))
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointFormatError("CRC mismatch (corrupt file)", offset=len(raw) - 4)
    r = _Reader(body)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    version = r.u("<H", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}", offset=4)
    cfg_len = r.u("<I", "config length")
    cfg_raw = _decode_config(r.take(cfg_len, "config block"))
    model_keys = {k[len("model."):]: v for k, v in cfg_raw.items() if k.startswith("model.")}
    try:
        config = ModelConfig.from_dict(model_keys)
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}", offset=10) from exc
    iteration = int(cfg_raw.get("iteration", 0))
    adam_step = int(cfg_raw.get("adam_step", 0))
    count = r.u("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        code = r.u("<B", f"{name} dtype")
        if code not in _DTYPE_CODES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name}", offset=r.pos - 1)
        shape = struct.unpack("<4I", r.take(16, f"{name} extents"))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"{name} data"), dtype=dtype).reshape(shape)
        tensors[name] = data.copy()
    rng_len = r.u("<I", "rng length")
    rng_raw = r.take(rng_len, "rng state") if rng_len else None
    if r.pos != len(body):
        raise CheckpointFormatError(
            f"{len(body) - r.pos} trailing bytes after rng state", offset=r.pos
        )
    return CheckpointBundle(config, tensors, iteration, adam_step, rng_raw)
