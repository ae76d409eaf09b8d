import numpy as np
import pytest

from relight import tensor as T
from relight.errors import ConfigError, DimensionError
from relight.model import (
    Enhancer,
    ModelConfig,
    conv_receptive_radius,
    disable_scan_paths,
    illumination_prior,
    init_model,
    named_params,
    net_forward,
    param_count,
    full_scale_config,
    prior_features,
)
from relight.tensor import Tensor, tape, tensor
from relight.train import mae_loss


def small_cfg(**kw):
    base = dict(base_width=8, depths=(1, 1, 1, 1, 1), state_size=4)
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# Config validation


def test_config_rejects_bad_prior_mode():
    with pytest.raises(ConfigError):
        ModelConfig(prior_mode="both")


def test_config_rejects_descending_kernels():
    with pytest.raises(ConfigError):
        ModelConfig(gate_kernels=(5, 3))


def test_config_rejects_empty_kernels():
    with pytest.raises(ConfigError):
        ModelConfig(gate_kernels=())


def test_config_round_trips_through_dict():
    cfg = ModelConfig(base_width=12, prior_mode="none", kernel_gate_enabled=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------------
# Illumination prior


def test_prior_pixel_arithmetic():
    px = tensor(np.array([0.2, 0.4, 0.6]).reshape(1, 3, 1, 1))
    out = illumination_prior(px).data.ravel()
    np.testing.assert_allclose(out, [0.2, 0.4, 0.6, 0.4, 0.6], atol=1e-6)


def test_prior_black_image_all_zero():
    img = tensor(np.zeros((2, 3, 8, 8)))
    np.testing.assert_array_equal(illumination_prior(img).data, 0.0)


def test_prior_grayscale_mean_equals_max(rng):
    v = rng.uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    img = tensor(np.concatenate([v, v, v], axis=1))
    out = illumination_prior(img).data
    np.testing.assert_allclose(out[:, 3], v[:, 0], atol=1e-6)
    np.testing.assert_allclose(out[:, 4], v[:, 0], atol=1e-6)


def test_prior_rejects_non_rgb():
    with pytest.raises(DimensionError):
        illumination_prior(tensor(np.zeros((1, 4, 4, 4))))


def test_prior_pyramid_shapes(rng):
    cfg = small_cfg()
    params = init_model(cfg, seed=0)
    prior = illumination_prior(tensor(rng.uniform(0, 1, (1, 3, 64, 64))))
    p0, p1, p2 = prior_features(prior, params.prior_stem)
    assert p0.shape == (1, 8, 64, 64)
    assert p1.shape == (1, 16, 32, 32)
    assert p2.shape == (1, 32, 16, 16)


def test_prior_pyramid_zero_input_zero_output(rng):
    cfg = small_cfg()
    params = init_model(cfg, seed=0)  # conv biases are zero-initialized
    zero_prior = tensor(np.zeros((1, 5, 32, 32)))
    for feat in prior_features(zero_prior, params.prior_stem):
        np.testing.assert_array_equal(feat.data, 0.0)


def test_prior_path_differentiable_to_input(rng):
    cfg = small_cfg()
    model = Enhancer.create(cfg, seed=3)
    for name, t in named_params(model.params):
        if name.startswith("tail"):
            t.data = rng.uniform(-0.1, 0.1, t.shape).astype(np.float32)
    img = tensor(rng.uniform(0, 1, (1, 3, 16, 16)), requires_grad=True)
    target = tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    with tape() as tp:
        tp.backward(mae_loss(model.forward(img), target))
    assert img.grad is not None and np.abs(img.grad).max() > 0


# --------------------------------------------------------------------------
# Forward contracts


def test_net_shape_contract(rng):
    cfg = small_cfg()
    model = Enhancer.create(cfg, seed=0)
    for h, w in ((8, 8), (16, 24), (64, 32), (128, 128)):
        img = tensor(rng.uniform(0, 1, (1, 3, h, w)))
        assert model.forward(img).shape == (1, 3, h, w)


def test_net_rejects_indivisible_extents(rng):
    model = Enhancer.create(small_cfg(), seed=0)
    with pytest.raises(DimensionError):
        model.forward(tensor(rng.uniform(0, 1, (1, 3, 30, 46))))


def test_residual_identity_with_zero_head(rng):
    model = Enhancer.create(small_cfg(), seed=0)  # tail is zero-initialized
    img = tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    out = model.forward(img)
    assert np.array_equal(out.data, img.data)


def test_explicit_mode_unit_illumination_is_identity(rng):
    cfg = small_cfg(prior_mode="explicit")
    model = Enhancer.create(cfg, seed=0)
    # force the head to emit illumination exactly 1: softplus(-50) underflows
    # to 0 against 1.0 in both float widths
    model.params.tail.b.data[:] = -50.0
    img = tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    out = model.forward(img)
    assert np.array_equal(out.data, img.data)


def test_explicit_mode_brightens_only(rng):
    cfg = small_cfg(prior_mode="explicit")
    model = Enhancer.create(cfg, seed=0)
    model.params.tail.w.data = rng.standard_normal(model.params.tail.w.shape).astype(
        np.float32
    ) * 0.1
    img = tensor(rng.uniform(0.05, 0.5, (1, 3, 16, 16)))
    out = model.forward(img)
    assert np.all(out.data >= img.data - 1e-6)  # illumination >= 1


def test_fresh_model_is_near_identity_with_random_head(rng):
    model = Enhancer.create(small_cfg(), seed=0)
    model.params.tail.w.data = (
        rng.standard_normal(model.params.tail.w.shape).astype(np.float32) * 0.02
    )
    img = tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
    out = model.forward(img)
    assert np.abs(out.data - img.data).mean() < 0.05


def test_mixer_zero_input_zero_prior_gives_zero(rng):
    from relight.model import scan_mixer_forward

    cfg = small_cfg()
    params = init_model(cfg, seed=3)  # biases start at zero
    x = tensor(np.zeros((1, 8, 8, 8)))
    prior = tensor(np.zeros((1, 8, 8, 8)))
    out = scan_mixer_forward(x, prior, params.enc0[0].mixer)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-7)


def test_scan_bias_toggle_changes_output(rng):
    img = tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    with_bias = Enhancer.create(small_cfg(scan_prior_bias=True), seed=5)
    without = Enhancer.create(small_cfg(scan_prior_bias=False), seed=5)
    # same seed, same tail randomization: only the bias path differs
    for m in (with_bias, without):
        m.params.tail.w.data = np.full(m.params.tail.w.shape, 0.01, dtype=np.float32)
    diff = np.abs(with_bias.forward(img).data - without.forward(img).data).max()
    assert diff > 1e-6


# --------------------------------------------------------------------------
# Residual block structure


def test_block_is_identity_with_zero_output_projections(rng):
    cfg = small_cfg()
    params = init_model(cfg, seed=2)
    from relight.model import block_forward

    blk = params.enc0[0]
    blk.mixer.out_proj.w.data[:] = 0.0
    blk.mixer.out_proj.b.data[:] = 0.0
    blk.gate.out_conv.w.data[:] = 0.0
    blk.gate.out_conv.b.data[:] = 0.0
    x = tensor(rng.standard_normal((1, 8, 8, 8)))
    prior = tensor(rng.standard_normal((1, 8, 8, 8)))
    out = block_forward(x, prior, blk)
    np.testing.assert_array_equal(out.data, x.data)


def test_gate_saturation_negative_bias_passthrough(rng):
    from relight.model import kernel_gate_forward

    cfg = small_cfg()
    params = init_model(cfg, seed=2)
    gp = params.enc0[0].gate
    gp.gate_conv.b.data[:] = -40.0  # sigmoid -> 0: cascade contributes nothing
    gp.gate_conv.w.data[:] = 0.0
    x = tensor(rng.standard_normal((1, 8, 8, 8)))
    prior = tensor(rng.standard_normal((1, 8, 8, 8)))
    out = kernel_gate_forward(x, prior, gp)
    # fused == x exactly: compare against the tail applied to x alone
    from relight.model import apply_conv
    from relight import tensor as TT

    expected = apply_conv(TT.gelu(apply_conv(x, gp.fuse_dw)), gp.out_conv)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-6)


def test_gate_saturation_positive_bias_full_cascade(rng):
    from relight.model import apply_conv, kernel_gate_forward

    cfg = small_cfg()
    params = init_model(cfg, seed=2)
    gp = params.enc0[0].gate
    gp.gate_conv.b.data[:] = 40.0  # sigmoid -> 1: fused = f1 + f2 + x
    gp.gate_conv.w.data[:] = 0.0
    x = tensor(rng.standard_normal((1, 8, 8, 8)))
    prior = tensor(rng.standard_normal((1, 8, 8, 8)))
    out = kernel_gate_forward(x, prior, gp)
    f1 = apply_conv(x, gp.dw_convs[0])
    f2 = apply_conv(f1, gp.dw_convs[1])
    fused = T.add(T.add(f1, f2), x)
    expected = apply_conv(T.gelu(apply_conv(fused, gp.fuse_dw)), gp.out_conv)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-5)


def test_gate_maps_strictly_inside_unit_interval(rng):
    from relight.model import apply_conv

    cfg = small_cfg()
    params = init_model(cfg, seed=2)
    gp = params.enc0[0].gate
    prior = tensor(rng.standard_normal((2, 8, 8, 8)) * 3.0)
    gates = T.sigmoid(apply_conv(prior, gp.gate_conv)).data
    assert np.all(gates > 0.0) and np.all(gates < 1.0)


# --------------------------------------------------------------------------
# Initialization and ablation bookkeeping


def test_init_deterministic_and_seed_sensitive():
    cfg = small_cfg()
    p1 = init_model(cfg, seed=7)
    p2 = init_model(cfg, seed=7)
    p3 = init_model(cfg, seed=8)
    for (n1, t1), (n2, t2) in zip(named_params(p1), named_params(p2)):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    assert any(
        not np.array_equal(t1.data, t3.data)
        for (_, t1), (_, t3) in zip(named_params(p1), named_params(p3))
    )


def test_ablation_param_count_lattice():
    full = param_count(init_model(small_cfg(), seed=0))
    no_gate = param_count(init_model(small_cfg(kernel_gate_enabled=False), seed=0))
    no_bias = param_count(init_model(small_cfg(scan_prior_bias=False), seed=0))
    baseline_none = param_count(init_model(small_cfg(prior_mode="none"), seed=0))
    baseline_explicit = param_count(init_model(small_cfg(prior_mode="explicit"), seed=0))
    assert full > no_gate
    assert full > no_bias
    assert full > baseline_none
    assert baseline_none == baseline_explicit  # same trunk, different head math


def test_gate_toggle_changes_count_by_exact_gate_total():
    cfg_on = small_cfg()
    cfg_off = small_cfg(kernel_gate_enabled=False)
    p_on = init_model(cfg_on, seed=0)
    p_off = init_model(cfg_off, seed=0)
    gate_total = sum(
        t.numel()
        for name, t in named_params(p_on)
        if ".gate." in name or name.endswith("norm2.gamma") or name.endswith("norm2.beta")
    )
    assert param_count(p_on) - param_count(p_off) == gate_total


def test_ablation_outputs_differ(rng):
    img = tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    outs = []
    for cfg in (small_cfg(), small_cfg(kernel_gate_enabled=False), small_cfg(prior_mode="none")):
        m = Enhancer.create(cfg, seed=4)
        m.params.tail.w.data = np.full(m.params.tail.w.shape, 0.01, dtype=np.float32)
        outs.append(m.forward(img).data)
    assert np.abs(outs[0] - outs[1]).max() > 1e-6
    assert np.abs(outs[0] - outs[2]).max() > 1e-6


def test_dead_path_detector_most_params_get_gradient(rng):
    model = Enhancer.create(small_cfg(), seed=6)
    for name, t in named_params(model.params):
        if name.startswith("tail"):
            t.data = rng.uniform(-0.1, 0.1, t.shape).astype(np.float32)
    low = tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    high = tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    with tape() as tp:
        tp.backward(mae_loss(model.forward(low), high))
    total = nonzero = 0
    for _, t in named_params(model.params):
        total += 1
        if t.grad is not None and np.abs(t.grad).max() > 0:
            nonzero += 1
    assert nonzero / total > 0.99


def test_full_scale_param_count_within_window():
    count = param_count(init_model(full_scale_config(), seed=0))
    assert 0.75 * 2.28e6 <= count <= 1.25 * 2.28e6


# --------------------------------------------------------------------------
# Receptive field structure


def test_global_connectivity_center_sees_corner(rng):
    model = Enhancer.create(small_cfg(), seed=9)
    model.params.tail.w.data = (
        rng.standard_normal(model.params.tail.w.shape).astype(np.float32) * 0.05
    )
    img = tensor(rng.uniform(0, 1, (1, 3, 32, 32)), requires_grad=True)
    mask = np.zeros((1, 3, 32, 32), dtype=np.float32)
    mask[0, :, 16, 16] = 1.0
    with tape() as tp:
        out = model.forward(img)
        tp.backward(T.sum_all(T.mul(out, Tensor(mask))))
    for y, x in ((0, 0), (0, 31), (31, 0), (31, 31)):
        assert np.abs(img.grad[0, :, y, x]).max() > 0


def test_scan_disabled_gradient_is_local(rng):
    cfg = small_cfg()
    model = Enhancer.create(cfg, seed=9)
    model.params.tail.w.data = (
        rng.standard_normal(model.params.tail.w.shape).astype(np.float32) * 0.05
    )
    model = Enhancer(cfg, disable_scan_paths(model.params))
    radius = conv_receptive_radius(cfg)
    size = 160
    center = size // 2
    assert radius + 4 < size - 1 - center  # the bound must leave a testable ring
    img = tensor(rng.uniform(0, 1, (1, 3, size, size)), requires_grad=True)
    mask = np.zeros((1, 3, size, size), dtype=np.float32)
    mask[0, :, center, center] = 1.0
    with tape() as tp:
        out = model.forward(img)
        tp.backward(T.sum_all(T.mul(out, Tensor(mask))))
    g = np.abs(img.grad[0]).sum(axis=0)
    yy, xx = np.mgrid[0:size, 0:size]
    outside = np.maximum(np.abs(yy - center), np.abs(xx - center)) > radius
    assert np.abs(g[outside]).max() == 0.0
    assert g[center, center] > 0
