import math

import numpy as np
import pytest

from conftest import make_pairs
from relight.data import PairedSample
from relight.errors import ConfigError, ContractError, DataError, DimensionError, TrainingDiverged
from relight.model import Enhancer, ModelConfig, named_params
from relight.tensor import Tensor, tape, tensor
from relight.train import (
    AdamState,
    TrainConfig,
    adam_step,
    cosine_lr,
    mae_loss,
    sample_batch,
    train,
)


def tiny_model():
    return Enhancer.create(ModelConfig(base_width=8, depths=(1, 1, 1, 1, 1), state_size=4), seed=0)


# --------------------------------------------------------------------------
# Loss


def test_mae_identical_is_zero(rng):
    x = tensor(rng.uniform(0, 1, (2, 3, 4, 4)))
    assert mae_loss(x, x).item() == 0.0


def test_mae_uniform_offset():
    a = tensor(np.zeros((1, 3, 4, 4)))
    b = tensor(np.full((1, 3, 4, 4), 0.5))
    assert mae_loss(a, b).item() == pytest.approx(0.5, abs=1e-7)


def test_mae_shape_mismatch():
    with pytest.raises(DimensionError):
        mae_loss(tensor(np.zeros((1, 3, 4, 4))), tensor(np.zeros((1, 3, 4, 2))))


def test_mae_gradient_is_scaled_sign(rng):
    pred = tensor(rng.uniform(0, 1, (1, 1, 2, 2)) + 1.0, requires_grad=True)
    target = tensor(rng.uniform(0, 1, (1, 1, 2, 2)))
    with tape() as tp:
        tp.backward(mae_loss(pred, target))
    n = pred.numel()
    np.testing.assert_allclose(pred.grad, np.sign(pred.data - target.data) / n, atol=1e-7)


# --------------------------------------------------------------------------
# Adam


def make_param(value):
    t = tensor(np.array(value, dtype=np.float32).reshape(1, 1, 1, -1), requires_grad=True)
    return [("w", t)], t


def test_adam_zero_grad_keeps_params():
    params, t = make_param([1.0, -2.0])
    t.grad = np.zeros_like(t.data)
    state = AdamState(params)
    adam_step(params, state, lr=0.1)
    np.testing.assert_array_equal(t.data.ravel(), [1.0, -2.0])
    assert state.step == 1


def test_adam_missing_grad_is_contract_error():
    params, t = make_param([1.0])
    state = AdamState(params)
    with pytest.raises(ContractError):
        adam_step(params, state, lr=0.1)


def test_adam_first_step_moves_by_lr_sign():
    params, t = make_param([1.0, -1.0, 3.0])
    t.grad = np.array([[0.5, -2.0, 1e-3]], dtype=np.float32).reshape(t.shape)
    state = AdamState(params)
    adam_step(params, state, lr=0.1)
    # bias correction makes m_hat/sqrt(v_hat) == sign(g) up to eps
    np.testing.assert_allclose(
        t.data.ravel(), [1.0 - 0.1, -1.0 + 0.1, 3.0 - 0.1], atol=1e-4
    )


def test_adam_converges_on_quadratic_bowl(rng):
    w = tensor(rng.standard_normal((1, 1, 1, 8)), requires_grad=True)
    params = [("w", w)]
    state = AdamState(params)
    for _ in range(500):
        w.grad = 2.0 * w.data  # gradient of ||w||^2
        adam_step(params, state, lr=0.1)
    assert float(np.sqrt((w.data.astype(np.float64) ** 2).sum())) < 1e-3


# --------------------------------------------------------------------------
# LR schedule


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 2e-4, 1e-6) == pytest.approx(2e-4)
    assert cosine_lr(100, 100, 2e-4, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(50, 100, 2e-4, 1e-6) == pytest.approx((2e-4 + 1e-6) / 2)


def test_cosine_clamps_past_total():
    assert cosine_lr(150, 100, 2e-4, 1e-6) == 1e-6


# --------------------------------------------------------------------------
# Batch sampling


def test_sample_batch_reproducible(rng):
    pairs = make_pairs(rng, 3, 48, 48)
    cfg = TrainConfig(patch_size=32, batch_size=4)
    l1, h1 = sample_batch(pairs, np.random.default_rng(9), cfg)
    l2, h2 = sample_batch(pairs, np.random.default_rng(9), cfg)
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(h1, h2)
    assert l1.shape == (4, 3, 32, 32)


def test_sample_batch_constant_pair_gives_constant_patches():
    const = PairedSample(
        np.full((3, 40, 40), 0.25, np.float32), np.full((3, 40, 40), 0.75, np.float32), "flat"
    )
    cfg = TrainConfig(patch_size=32, batch_size=3)
    low, high = sample_batch([const], np.random.default_rng(1), cfg)
    assert np.all(low == 0.25) and np.all(high == 0.75)


def test_sample_batch_rejects_undersized_image(rng):
    small = PairedSample(
        np.zeros((3, 16, 16), np.float32), np.zeros((3, 16, 16), np.float32), "toosmall"
    )
    cfg = TrainConfig(patch_size=32, batch_size=1)
    with pytest.raises(DataError, match="toosmall"):
        sample_batch([small], np.random.default_rng(0), cfg)


def test_dihedral_transforms_uniform_frequency():
    from relight.train import _dihedral

    # track which of the 8 transforms occurred via a marker image
    marker = np.zeros((3, 8, 8), np.float32)
    marker[:, 0, 1] = 1.0
    variants = [(_dihedral(marker, k) != 0).nonzero()[1:] for k in range(8)]
    keys = {tuple(np.concatenate(v).tolist()) for v in variants}
    assert len(keys) == 8  # all eight are distinct
    rng = np.random.default_rng(0)
    counts = np.bincount(rng.integers(0, 8, 10_000), minlength=8) / 10_000
    assert np.all(np.abs(counts - 0.125) < 0.02)


def test_augmentation_preserves_pairwise_mae(rng):
    pairs = make_pairs(rng, 2, 40, 40)
    cfg = TrainConfig(patch_size=40, batch_size=6)
    low, high = sample_batch(pairs, np.random.default_rng(3), cfg)
    # the shared dihedral transform is a permutation of pixels: per-sample
    # MAE must match the MAE of the untransformed pair crop
    ref = {p.id: np.abs(p.low - p.high).mean() for p in pairs}
    for i in range(low.shape[0]):
        mae = np.abs(low[i] - high[i]).mean()
        assert any(abs(mae - v) < 1e-7 for v in ref.values())


def test_patch_size_must_be_multiple_of_four():
    with pytest.raises(ConfigError):
        TrainConfig(patch_size=30)


# --------------------------------------------------------------------------
# Training loop


def test_train_one_iteration_smoke(tmp_path, rng):
    pairs = make_pairs(rng, 2, 32, 32)
    cfg = TrainConfig(patch_size=32, batch_size=1, total_iters=1, seed=0,
                      checkpoint_every=0, eval_every=0)
    model = tiny_model()
    final = train(model, pairs, cfg, tmp_path)
    assert final.exists()
    rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "iter,loss,lr,psnr,ssim"
    assert len(rows) == 2
    assert (tmp_path / "metrics.csv").exists()


def test_train_eval_rows_carry_metrics(tmp_path, rng):
    pairs = make_pairs(rng, 2, 32, 32)
    cfg = TrainConfig(patch_size=32, batch_size=1, total_iters=4, seed=0,
                      checkpoint_every=0, eval_every=2)
    model = tiny_model()
    train(model, pairs, cfg, tmp_path, eval_dataset=pairs)
    rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()[1:]
    for i, row in enumerate(rows, start=1):
        _, _, _, psnr_s, ssim_s = row.split(",")
        if i % 2 == 0:
            assert psnr_s and ssim_s  # eval row
            float(psnr_s), float(ssim_s)
        else:
            assert psnr_s == "" and ssim_s == ""


def test_train_empty_dataset_rejected(tmp_path):
    cfg = TrainConfig(total_iters=1)
    with pytest.raises(DataError):
        train(tiny_model(), [], cfg, tmp_path)


@pytest.mark.slow
def test_train_deterministic_loss_sequence(tmp_path, rng):
    pairs = make_pairs(rng, 2, 32, 32)
    cfg = TrainConfig(patch_size=32, batch_size=2, total_iters=12, seed=7,
                      checkpoint_every=0, eval_every=0)
    seqs = []
    for run in range(2):
        model = tiny_model()
        losses = []
        train(model, pairs, cfg, tmp_path / f"run{run}",
              log_hook=lambda it, loss, lr: losses.append(loss))
        seqs.append(losses)
    assert seqs[0] == seqs[1]  # bitwise identical


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostics(tmp_path, rng):
    pairs = make_pairs(rng, 1, 32, 32)
    cfg = TrainConfig(patch_size=32, batch_size=1, total_iters=5, seed=0,
                      checkpoint_every=0, eval_every=0)
    model = tiny_model()
    model.params.head.w.data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(model, pairs, cfg, tmp_path)
    assert exc.value.iteration == 0
    assert "total" in exc.value.grad_norms
