"""The enhancement network: illumination prior, scan mixer, gated kernel
refinement, and the 3-level encoder/decoder assembly.

Each block is pre-norm residual twice over: a state-space scan mixer that
captures global structure (optionally biased by a prior-derived local term),
then a gated cascade of depthwise kernels that refines local detail, with
sigmoid gates derived from the same prior. The net predicts a residual on
top of the input image; in explicit mode it instead predicts a >=1
illumination map and brightens multiplicatively; in none mode every
prior pathway is removed.

Parameters are plain dataclasses of leaf Tensors; `named_params` walks them
in a stable order for the optimizer, checkpoints, and bookkeeping.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import backend
from . import tensor as T
from .conv import conv2d, conv_transpose2d
from .errors import ConfigError, DimensionError
from .scan import DirectionParams, N_DIRECTIONS, SSMParams, ssm_2d
from .tensor import Tensor

PRIOR_MODES = ("implicit", "explicit", "none")
N_SCALES = 3  # spatial scales i = 0, 1, 2 at widths 2^i * base_width


@dataclass
class ModelConfig:
    base_width: int = 16
    depths: tuple = (1, 2, 2, 2, 1)  # enc0, enc1, mid, dec1, dec0 block counts
    state_size: int = 16
    expand: int = 2
    gate_kernels: tuple = (3, 5)  # ascending: small kernels in front
    prior_mode: str = "implicit"
    scan_prior_bias: bool = True  # additive prior bias inside the scan mixer
    kernel_gate_enabled: bool = True  # second (local refinement) sub-block

    def __post_init__(self):
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"prior_mode must be one of {PRIOR_MODES}")
        if len(self.depths) != 2 * N_SCALES - 1:
            raise ConfigError(f"depths needs {2 * N_SCALES - 1} entries, got {self.depths}")
        if any(d < 1 for d in self.depths):
            raise ConfigError("every level needs at least one block")
        if not self.gate_kernels:
            raise ConfigError("gate_kernels must not be empty")
        if list(self.gate_kernels) != sorted(self.gate_kernels):
            raise ConfigError("gate_kernels must be ascending (small kernels in front)")
        if any(k % 2 == 0 for k in self.gate_kernels):
            raise ConfigError("gate_kernels must be odd")
        if self.state_size < 1 or self.expand < 1 or self.base_width < 1:
            raise ConfigError("base_width, state_size and expand must be >= 1")

    @property
    def uses_prior(self) -> bool:
        return self.prior_mode == "implicit" and (
            self.scan_prior_bias or self.kernel_gate_enabled
        )

    def to_dict(self) -> dict:
        return {
            "base_width": self.base_width,
            "depths": ",".join(str(d) for d in self.depths),
            "state_size": self.state_size,
            "expand": self.expand,
            "gate_kernels": ",".join(str(k) for k in self.gate_kernels),
            "prior_mode": self.prior_mode,
            "scan_prior_bias": int(self.scan_prior_bias),
            "kernel_gate_enabled": int(self.kernel_gate_enabled),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            base_width=int(d["base_width"]),
            depths=tuple(int(x) for x in str(d["depths"]).split(",")),
            state_size=int(d["state_size"]),
            expand=int(d["expand"]),
            gate_kernels=tuple(int(x) for x in str(d["gate_kernels"]).split(",")),
            prior_mode=str(d["prior_mode"]),
            scan_prior_bias=bool(int(d["scan_prior_bias"])),
            kernel_gate_enabled=bool(int(d["kernel_gate_enabled"])),
        )


# Full-scale width: the benchmark-sized configuration lands near 2.3M
# parameters (the acceptance suite reports the exact count); the desk-scale
# default of 16 is a quarter of that.
FULL_SCALE_WIDTH = 32


def full_scale_config() -> ModelConfig:
    return ModelConfig(base_width=FULL_SCALE_WIDTH)


# --------------------------------------------------------------------------
# Layer parameter containers


@dataclass
class LinearP:
    w: Tensor
    b: Optional[Tensor] = None


@dataclass
class ConvP:
    w: Tensor
    b: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class ConvTP:
    w: Tensor
    b: Optional[Tensor] = None
    stride: int = 2


@dataclass
class NormP:
    gamma: Tensor
    beta: Tensor


@dataclass
class ScanMixerParams:
    """Gated two-branch mixer around the 4-direction scan."""

    in_proj: LinearP  # c -> 2*expand*c, chunked into the two branches
    b1_lin: LinearP
    dwconv: ConvP  # depthwise 3x3 on the scan branch
    ssm: SSMParams
    bias_conv: Optional[ConvP]  # prior -> scan width local bias, 3x3
    post_norm: NormP
    b2_lin: LinearP
    out_proj: LinearP


@dataclass
class KernelGateParams:
    """Cascaded depthwise kernels with prior-derived sigmoid gates."""

    dw_convs: list
    gate_conv: Optional[ConvP]  # prior -> len(kernels)*c gate logits, 1x1
    fuse_dw: ConvP
    out_conv: ConvP


@dataclass
class BlockParams:
    norm1: NormP
    mixer: ScanMixerParams
    norm2: Optional[NormP]
    gate: Optional[KernelGateParams]


@dataclass
class EnhancerParams:
    head: ConvP
    prior_stem: Optional[list]  # three convs: full res, /2, /4
    enc0: list
    down0: ConvP
    enc1: list
    down1: ConvP
    mid: list
    up1: ConvTP
    fuse1: ConvP
    dec1: list
    up0: ConvTP
    fuse0: ConvP
    dec0: list
    tail: ConvP


def named_params(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a parameter tree in stable field/index order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list, tuple)) or dataclasses.is_dataclass(val):
                sub = f"{prefix}.{f.name}" if prefix else f.name
                yield from named_params(val, sub)
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            yield from named_params(val, f"{prefix}.{i}" if prefix else str(i))


def param_count(obj) -> int:
    return sum(t.numel() for _, t in named_params(obj))


# --------------------------------------------------------------------------
# Initialization


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(backend.DTYPE), requires_grad=True)


def _zeros_p(shape):
    return Tensor(np.zeros(shape, dtype=backend.DTYPE), requires_grad=True)


def _ones_p(shape):
    return Tensor(np.ones(shape, dtype=backend.DTYPE), requires_grad=True)


def _linear_init(rng, cin, cout, bias=True) -> LinearP:
    w = _uniform(rng, (cout, cin, 1, 1), cin)
    return LinearP(w, _zeros_p((1, cout, 1, 1)) if bias else None)


def _conv_init(rng, cin, cout, k, stride=1, padding=0, groups=1, bias=True, zero=False) -> ConvP:
    shape = (cout, cin // groups, k, k)
    if zero:
        w = _zeros_p(shape)
    else:
        w = _uniform(rng, shape, (cin // groups) * k * k)
    b = _zeros_p((1, cout, 1, 1)) if bias else None
    return ConvP(w, b, stride=stride, padding=padding, groups=groups)


def _convt_init(rng, cin, cout, k=2, stride=2) -> ConvTP:
    w = _uniform(rng, (cin, cout, k, k), cin * k * k)
    return ConvTP(w, _zeros_p((1, cout, 1, 1)), stride=stride)


def _norm_init(c) -> NormP:
    return NormP(_ones_p((1, c, 1, 1)), _zeros_p((1, c, 1, 1)))


def _direction_init(rng, c, m) -> DirectionParams:
    # -a spans [1, m]: a_log[c, j] = log(j + 1), negative state by construction
    a_log = np.tile(np.log(np.arange(1, m + 1, dtype=np.float64)), (c, 1))
    # step-size offsets chosen so softplus(dt_bias) is log-uniform in
    # [1e-3, 0.1]: the slow states then carry context across whole rows at
    # initialization instead of decaying within a couple of positions
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(0.1), size=c))
    dt_bias = np.log(np.expm1(dt)).reshape(1, c, 1, 1)
    return DirectionParams(
        a_log=Tensor(a_log.reshape(c, m, 1, 1).astype(backend.DTYPE), requires_grad=True),
        skip=_ones_p((c, 1, 1, 1)),
        dt_bias=Tensor(dt_bias.astype(backend.DTYPE), requires_grad=True),
        w_dt=_uniform(rng, (1, c, 1, 1), c),
        w_b=_uniform(rng, (m, c, 1, 1), c),
        w_c=_uniform(rng, (m, c, 1, 1), c),
    )


def _mixer_init(rng, c, cfg: ModelConfig, with_bias_conv: bool) -> ScanMixerParams:
    ec = cfg.expand * c
    return ScanMixerParams(
        in_proj=_linear_init(rng, c, 2 * ec),
        b1_lin=_linear_init(rng, ec, ec),
        dwconv=_conv_init(rng, ec, ec, 3, padding=1, groups=ec),
        ssm=SSMParams([_direction_init(rng, ec, cfg.state_size) for _ in range(N_DIRECTIONS)]),
        bias_conv=_conv_init(rng, c, ec, 3, padding=1) if with_bias_conv else None,
        post_norm=_norm_init(ec),
        b2_lin=_linear_init(rng, ec, ec),
        out_proj=_linear_init(rng, ec, c),
    )


def _gate_init(rng, c, cfg: ModelConfig, with_gate_conv: bool) -> KernelGateParams:
    dws = [
        _conv_init(rng, c, c, k, padding=k // 2, groups=c) for k in cfg.gate_kernels
    ]
    n = len(cfg.gate_kernels)
    return KernelGateParams(
        dw_convs=dws,
        gate_conv=_conv_init(rng, c, n * c, 1) if with_gate_conv else None,
        fuse_dw=_conv_init(rng, c, c, 3, padding=1, groups=c),
        out_conv=_conv_init(rng, c, c, 1),
    )


def _block_init(rng, c, cfg: ModelConfig) -> BlockParams:
    prior_ok = cfg.prior_mode == "implicit"
    mixer = _mixer_init(rng, c, cfg, with_bias_conv=prior_ok and cfg.scan_prior_bias)
    if cfg.kernel_gate_enabled:
        gate = _gate_init(rng, c, cfg, with_gate_conv=prior_ok)
        return BlockParams(_norm_init(c), mixer, _norm_init(c), gate)
    return BlockParams(_norm_init(c), mixer, None, None)


def init_model(cfg: ModelConfig, seed: int) -> EnhancerParams:
    """Deterministic parameter initialization.

    Conv/linear weights are fan-in-scaled uniform, biases zero, and the tail
    projection is zero so a fresh model starts as the identity mapping.
    """
    rng = np.random.default_rng(seed)
    c = cfg.base_width
    stem = None
    if cfg.uses_prior:
        stem = [
            _conv_init(rng, 5, c, 3, padding=1),
            _conv_init(rng, c, 2 * c, 3, stride=2, padding=1),
            _conv_init(rng, 2 * c, 4 * c, 3, stride=2, padding=1),
        ]
    return EnhancerParams(
        head=_conv_init(rng, 3, c, 3, padding=1),
        prior_stem=stem,
        enc0=[_block_init(rng, c, cfg) for _ in range(cfg.depths[0])],
        down0=_conv_init(rng, c, 2 * c, 3, stride=2, padding=1),
        enc1=[_block_init(rng, 2 * c, cfg) for _ in range(cfg.depths[1])],
        down1=_conv_init(rng, 2 * c, 4 * c, 3, stride=2, padding=1),
        mid=[_block_init(rng, 4 * c, cfg) for _ in range(cfg.depths[2])],
        up1=_convt_init(rng, 4 * c, 2 * c),
        fuse1=_conv_init(rng, 4 * c, 2 * c, 1),
        dec1=[_block_init(rng, 2 * c, cfg) for _ in range(cfg.depths[3])],
        up0=_convt_init(rng, 2 * c, c),
        fuse0=_conv_init(rng, 2 * c, c, 1),
        dec0=[_block_init(rng, c, cfg) for _ in range(cfg.depths[4])],
        tail=_conv_init(rng, c, 3, 3, padding=1, zero=True),
    )


# --------------------------------------------------------------------------
# Forward passes


def apply_linear(x: Tensor, p: LinearP) -> Tensor:
    return T.linear(x, p.w, p.b)


def apply_conv(x: Tensor, p: ConvP) -> Tensor:
    return conv2d(x, p.w, p.b, stride=p.stride, padding=p.padding, groups=p.groups)


def apply_convt(x: Tensor, p: ConvTP) -> Tensor:
    return conv_transpose2d(x, p.w, p.b, stride=p.stride)


def apply_norm(x: Tensor, p: NormP) -> Tensor:
    return T.layernorm(x, p.gamma, p.beta)


def illumination_prior(img: Tensor) -> Tensor:
    """Stack [R, G, B, mean(RGB), max(RGB)] per pixel -> (b, 5, h, w)."""
    if img.shape[1] != 3:
        raise DimensionError(f"prior needs a 3-channel image, got {img.shape}")
    r, g, b = T.chunk(img, 3)
    mean = T.mul_scalar(T.add(T.add(r, g), b), 1.0 / 3.0)
    return T.concat([img, mean, T.channel_max(img)])


def prior_features(prior: Tensor, stem: list) -> list:
    """Project the 5-channel prior to per-scale features (widths c, 2c, 4c)."""
    if prior.shape[2] % 4 or prior.shape[3] % 4:
        raise DimensionError(f"prior extents {prior.shape} must be multiples of 4")
    p0 = apply_conv(prior, stem[0])
    p1 = apply_conv(p0, stem[1])
    p2 = apply_conv(p1, stem[2])
    return [p0, p1, p2]


def scan_mixer_forward(x: Tensor, prior: Optional[Tensor], p: ScanMixerParams) -> Tensor:
    """Two-branch gated mixer; caller handles the pre-norm and residual.

    Branch 1 runs linear -> depthwise 3x3 -> SiLU -> 4-direction scan (with
    the prior-derived local bias added inside) -> layernorm. Branch 2 is a
    SiLU-gated linear path; the branches multiply and project back down.
    """
    f1, f2 = T.chunk(apply_linear(x, p.in_proj), 2)
    b1 = T.silu(apply_conv(apply_linear(f1, p.b1_lin), p.dwconv))
    local_bias = None
    if p.bias_conv is not None and prior is not None:
        local_bias = apply_conv(prior, p.bias_conv)
    b1 = apply_norm(ssm_2d(b1, p.ssm, local_bias), p.post_norm)
    b2 = T.silu(apply_linear(f2, p.b2_lin))
    return apply_linear(T.mul(b1, b2), p.out_proj)


def kernel_gate_forward(x: Tensor, prior: Optional[Tensor], p: KernelGateParams) -> Tensor:
    """Cascade of depthwise kernels, each gated by a sigmoid map from the
    prior, summed with the block input; caller adds the residual."""
    feats = []
    cur = x
    for dw in p.dw_convs:
        cur = apply_conv(cur, dw)
        feats.append(cur)
    fused = x
    if p.gate_conv is not None and prior is not None:
        gates = T.chunk(T.sigmoid(apply_conv(prior, p.gate_conv)), len(feats))
        for f, s in zip(feats, gates):
            fused = T.add(fused, T.mul(f, s))
    else:
        for f in feats:
            fused = T.add(fused, f)
    return apply_conv(T.gelu(apply_conv(fused, p.fuse_dw)), p.out_conv)


def block_forward(x: Tensor, prior: Optional[Tensor], p: BlockParams) -> Tensor:
    """Pre-norm residual pair: scan mixer, then (optionally) the kernel gate."""
    m = T.add(scan_mixer_forward(apply_norm(x, p.norm1), prior, p.mixer), x)
    if p.gate is None:
        return m
    return T.add(kernel_gate_forward(apply_norm(m, p.norm2), prior, p.gate), m)


def net_forward(img: Tensor, cfg: ModelConfig, params: EnhancerParams) -> Tensor:
    """Full forward pass: (b, 3, h, w) in [0,1] -> enhanced (b, 3, h, w).

    h and w must be multiples of 4 (callers pad full images by reflection).
    """
    if img.shape[1] != 3:
        raise DimensionError(f"expected a 3-channel image batch, got {img.shape}")
    if img.shape[2] % 4 or img.shape[3] % 4:
        raise DimensionError(
            f"spatial extents {img.shape[2]}x{img.shape[3]} must be multiples of 4"
        )
    priors = [None] * N_SCALES
    if params.prior_stem is not None:
        priors = prior_features(illumination_prior(img), params.prior_stem)

    x = apply_conv(img, params.head)
    for blk in params.enc0:
        x = block_forward(x, priors[0], blk)
    skip0 = x
    x = apply_conv(x, params.down0)
    for blk in params.enc1:
        x = block_forward(x, priors[1], blk)
    skip1 = x
    x = apply_conv(x, params.down1)
    for blk in params.mid:
        x = block_forward(x, priors[2], blk)
    x = apply_conv(T.concat([apply_convt(x, params.up1), skip1]), params.fuse1)
    for blk in params.dec1:
        x = block_forward(x, priors[1], blk)
    x = apply_conv(T.concat([apply_convt(x, params.up0), skip0]), params.fuse0)
    for blk in params.dec0:
        x = block_forward(x, priors[0], blk)
    out = apply_conv(x, params.tail)

    if cfg.prior_mode == "explicit":
        # brighten-only: illumination >= 1 via 1 + softplus
        illum = T.add_scalar(T.softplus(out), 1.0)
        return T.mul(img, illum)
    return T.add(out, img)


# --------------------------------------------------------------------------
# Convenience wrapper


class Enhancer:
    """Config + parameters with full-image inference helpers."""

    def __init__(self, config: ModelConfig, params: EnhancerParams):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Enhancer":
        return cls(config, init_model(config, seed))

    def forward(self, img: Tensor) -> Tensor:
        return net_forward(img, self.config, self.params)

    def named_params(self):
        return named_params(self.params)

    def param_count(self) -> int:
        return param_count(self.params)

    def enhance_array(self, img: np.ndarray) -> np.ndarray:
        """Enhance one (3, h, w) float image of arbitrary extents.

        Pads to the next multiple of 4 by reflection, runs the net without
        recording gradients, crops back, and clamps to [0, 1].
        """
        if img.ndim != 3 or img.shape[0] != 3:
            raise DimensionError(f"expected (3, h, w), got {img.shape}")
        h, w = img.shape[1], img.shape[2]
        if h < 4 or w < 4:
            raise DimensionError("images smaller than 4x4 are not supported")
        ph = (-h) % 4
        pw = (-w) % 4
        padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        x = Tensor(padded[None].astype(backend.DTYPE))
        y = self.forward(x).data[0, :, :h, :w]
        return np.clip(y, 0.0, 1.0)


def disable_scan_paths(params: EnhancerParams) -> EnhancerParams:
    """Copy of the parameters with every scan input projection zeroed.

    The hidden state then stays at zero and each scan reduces to its skip
    path, leaving a conv-only network: useful as the local-connectivity
    reference for receptive-field analysis.
    """
    import copy

    out = copy.deepcopy(params)
    for name, t in named_params(out):
        if name.endswith(".w_b"):
            t.data[:] = 0.0
    return out


def conv_receptive_radius(cfg: ModelConfig) -> int:
    """Conservative Chebyshev radius bound for the scan-disabled network.

    Sums every conv contribution along the trunk at its spatial jump, plus
    slack for resampling offsets and the prior pathway. An over-estimate is
    fine: it is used as an outer bound that the conv-only ERF must not
    exceed.
    """

    def block_r(level: int) -> int:
        j = 2 ** level
        r = 1 * j  # mixer depthwise 3x3
        if cfg.kernel_gate_enabled:
            r += sum((k - 1) // 2 for k in cfg.gate_kernels) * j  # cascade
            r += 1 * j  # fuse depthwise 3x3
        return r

    levels = (0, 1, 2, 1, 0)
    r = 1 + 1  # head and tail 3x3
    r += 1 * 1 + 1 * 2  # stride-2 downsampling convs at jumps 1 and 2
    r += 2 + 4  # transposed-conv alignment slack at each upsampling
    for depth, lvl in zip(cfg.depths, levels):
        r += depth * block_r(lvl)
    if cfg.uses_prior:
        # prior pyramid radius at the deepest scale plus its 3x3 consumer
        r += 4 + 1 * 4
    return r
