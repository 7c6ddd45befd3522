import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from sam3unet.decoder import DecoderOutput
from sam3unet.errors import ConfigError, ShapeError, ValidationError
from sam3unet.losses import (
    DeepSupervisionLoss,
    LossConfig,
    structure_loss,
    total_loss,
    weight_map,
    weighted_bce,
    weighted_iou,
)


def _omega_reference(gt: np.ndarray, k: int, gain: float) -> np.ndarray:
    height, width = gt.shape
    r = k // 2
    omega = np.zeros_like(gt, dtype=np.float64)
    for i in range(height):
        for j in range(width):
            total, count = 0.0, 0
            for y in range(max(0, i - r), min(height, i + r + 1)):
                for x in range(max(0, j - r), min(width, j + r + 1)):
                    total += gt[y, x]
                    count += 1
            omega[i, j] = 1.0 + gain * abs(total / count - gt[i, j])
    return omega


def _bce_reference(logits: np.ndarray, gt: np.ndarray, omega: np.ndarray) -> float:
    num = den = 0.0
    for z, g, w in zip(logits.ravel(), gt.ravel(), omega.ravel()):
        num += w * (max(z, 0.0) - z * g + math.log1p(math.exp(-abs(z))))
        den += w
    return num / den


def _iou_reference(logits: np.ndarray, gt: np.ndarray, omega: np.ndarray, eps: float) -> float:
    inter = union = 0.0
    for z, g, w in zip(logits.ravel(), gt.ravel(), omega.ravel()):
        p = 1.0 / (1.0 + math.exp(-z))
        inter += w * p * g
        union += w * (p + g - p * g)
    return 1.0 - (inter + eps) / (union + eps)


def _structure_reference(logits: np.ndarray, gt: np.ndarray, k: int, gain: float, eps: float) -> float:
    omega = _omega_reference(gt, k, gain)
    return _bce_reference(logits, gt, omega) + _iou_reference(logits, gt, omega, eps)


def _random_instance(seed: int):
    """Non-square mask, logits, positive weights and an odd pooling kernel."""

    rng = np.random.default_rng(seed)
    height, width = rng.integers(2, 9, size=2)
    gt = (rng.random((height, width)) > rng.uniform(0.2, 0.8)).astype(np.float64)
    logits = rng.normal(0.0, 3.0, (height, width))
    omega = rng.uniform(0.5, 6.0, (height, width))
    kernel = int(rng.choice([1, 3, 5, 7]))
    gain = float(rng.uniform(0.0, 8.0))
    return logits, gt, omega, kernel, gain


def _random_case(seed: int, size: int = 8):
    rng = np.random.default_rng(seed)
    gt = (rng.random((size, size)) > 0.6).astype(np.float64)
    logits = rng.normal(0.0, 2.0, (size, size))
    return logits, gt


def _t(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(array, dtype=np.float64))[None, None]


# --- weight map ----------------------------------------------------------------


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_constant_gt_gives_unit_weights(value):
    gt = torch.full((2, 1, 16, 16), value)
    assert torch.allclose(weight_map(gt), torch.ones_like(gt))


def test_single_center_pixel_weight():
    gt = torch.zeros(1, 1, 7, 7, dtype=torch.float64)
    gt[0, 0, 3, 3] = 1.0
    omega = weight_map(gt, LossConfig(pool_kernel=3, weight_gain=5.0))
    assert omega[0, 0, 3, 3].item() == pytest.approx(1.0 + 5.0 * (1.0 - 1.0 / 9.0), abs=1e-9)
    assert omega[0, 0, 3, 3].item() == pytest.approx(5.4444444, abs=1e-6)


def test_zero_gain_gives_unit_weights():
    gt = (torch.rand(1, 1, 9, 9) > 0.5).float()
    assert torch.equal(weight_map(gt, LossConfig(weight_gain=0.0)), torch.ones_like(gt))


def test_weight_map_matches_loop_reference_at_borders():
    _, gt = _random_case(3, size=9)
    omega = weight_map(_t(gt), LossConfig(pool_kernel=5, weight_gain=5.0))
    assert np.allclose(omega[0, 0].numpy(), _omega_reference(gt, 5, 5.0), atol=1e-12)


def test_weight_map_matches_loop_reference_on_random_masks():
    for seed in range(100):
        _, gt, _, kernel, gain = _random_instance(seed)
        omega = weight_map(_t(gt), LossConfig(pool_kernel=kernel, weight_gain=gain))
        assert np.allclose(omega[0, 0].numpy(), _omega_reference(gt, kernel, gain), atol=1e-12), seed


def test_strict_mode_rejects_soft_masks():
    gt = torch.full((1, 1, 4, 4), 0.5)
    with pytest.raises(ValidationError):
        weight_map(gt, LossConfig(strict=True))
    weight_map(gt)


@pytest.mark.parametrize("kwargs", [{"pool_kernel": 4}, {"pool_kernel": 0}, {"epsilon": 0.0}, {"weight_gain": -1.0}])
def test_invalid_loss_config(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs)


# --- weighted BCE / IoU --------------------------------------------------------


def test_saturated_prediction_has_tiny_bce():
    gt = (torch.rand(1, 1, 8, 8) > 0.5).double()
    logits = torch.where(gt > 0, 100.0, -100.0).double()
    assert weighted_bce(logits, gt, weight_map(gt)).item() < 1e-6


def test_unit_weights_reduce_to_plain_bce():
    logits = torch.randn(3, 1, 8, 8, dtype=torch.float64)
    gt = (torch.rand(3, 1, 8, 8) > 0.5).double()
    plain = F.binary_cross_entropy_with_logits(logits, gt)
    assert weighted_bce(logits, gt, torch.ones_like(gt)).item() == pytest.approx(plain.item(), abs=1e-12)


def test_bce_matches_loop_reference():
    logits, gt = _random_case(11)
    omega = _omega_reference(gt, 31, 5.0)
    expected = sum(
        w * (max(z, 0.0) - z * g + math.log1p(math.exp(-abs(z))))
        for z, g, w in zip(logits.ravel(), gt.ravel(), omega.ravel())
    ) / omega.sum()
    actual = weighted_bce(_t(logits), _t(gt), _t(omega)).item()
    assert abs(actual - expected) < 1e-6


def test_bce_matches_loop_reference_on_random_instances():
    for seed in range(100):
        logits, gt, omega, _, _ = _random_instance(seed)
        actual = weighted_bce(_t(logits), _t(gt), _t(omega)).item()
        assert abs(actual - _bce_reference(logits, gt, omega)) < 1e-6, seed


def test_iou_matches_loop_reference_on_random_instances():
    for seed in range(100):
        logits, gt, omega, _, _ = _random_instance(seed)
        eps = 1.0 if seed % 2 else 1e-3
        actual = weighted_iou(_t(logits), _t(gt), _t(omega), epsilon=eps).item()
        assert abs(actual - _iou_reference(logits, gt, omega, eps)) < 1e-6, seed


def test_batched_losses_average_per_image_terms():
    rng = np.random.default_rng(40)
    logits = rng.normal(0.0, 3.0, (2, 5, 7))
    gt = (rng.random((2, 5, 7)) > 0.5).astype(np.float64)
    omega = rng.uniform(0.5, 6.0, (2, 5, 7))
    expected_bce = np.mean([_bce_reference(logits[b], gt[b], omega[b]) for b in range(2)])
    expected_iou = np.mean([_iou_reference(logits[b], gt[b], omega[b], 1.0) for b in range(2)])

    batch = [torch.from_numpy(a)[:, None] for a in (logits, gt, omega)]
    assert weighted_bce(*batch).item() == pytest.approx(expected_bce, abs=1e-9)
    assert weighted_iou(*batch).item() == pytest.approx(expected_iou, abs=1e-9)


def test_iou_is_zero_for_exact_binary_prediction():
    gt = (torch.rand(1, 1, 8, 8) > 0.5).double()
    logits = torch.where(gt > 0, 100.0, -100.0).double()
    assert weighted_iou(logits, gt, weight_map(gt)).item() < 1e-7


def test_iou_half_probability_on_full_gt():
    gt = torch.ones(1, 1, 8, 8, dtype=torch.float64)
    logits = torch.zeros_like(gt)
    loss = weighted_iou(logits, gt, torch.ones_like(gt), epsilon=1e-9)
    assert loss.item() == pytest.approx(0.5, abs=1e-8)


def test_iou_empty_gt_and_empty_prediction():
    gt = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    logits = torch.full_like(gt, -100.0)
    omega = torch.rand_like(gt) + 1.0
    assert weighted_iou(logits, gt, omega).item() == pytest.approx(0.0, abs=1e-9)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        weighted_bce(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 7), torch.ones(1, 1, 8, 8))
    with pytest.raises(ShapeError):
        structure_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4))


# --- structure loss ------------------------------------------------------------


def test_structure_loss_is_sum_of_components():
    logits, gt = _random_case(5)
    logits_t, gt_t = _t(logits), _t(gt)
    omega = weight_map(gt_t)
    expected = weighted_bce(logits_t, gt_t, omega) + weighted_iou(logits_t, gt_t, omega)
    assert structure_loss(logits_t, gt_t).item() == pytest.approx(expected.item(), abs=1e-12)


def test_structure_loss_matches_loop_reference():
    logits, gt = _random_case(7)
    expected = _structure_reference(logits, gt, 31, 5.0, 1.0)
    assert abs(structure_loss(_t(logits), _t(gt)).item() - expected) < 1e-6


def test_structure_loss_vanishes_when_saturated():
    gt = (torch.rand(2, 1, 8, 8) > 0.5).double()
    logits = torch.where(gt > 0, 100.0, -100.0).double()
    assert structure_loss(logits, gt).item() < 1e-6


@given(st.integers(0, 2**16))
def test_structure_loss_is_finite_and_non_negative(seed):
    logits, gt = _random_case(seed)
    value = structure_loss(_t(logits * 10), _t(gt)).item()
    assert math.isfinite(value)
    assert value >= 0.0


def test_structure_loss_gradient_matches_central_differences():
    logits, gt = _random_case(13, size=5)
    cfg = LossConfig(pool_kernel=3)
    z = _t(logits).requires_grad_(True)
    structure_loss(z, _t(gt), cfg).backward()
    analytic = z.grad[0, 0].numpy()

    h = 1e-6
    for i in range(5):
        for j in range(5):
            plus, minus = logits.copy(), logits.copy()
            plus[i, j] += h
            minus[i, j] -= h
            numeric = (
                structure_loss(_t(plus), _t(gt), cfg).item() - structure_loss(_t(minus), _t(gt), cfg).item()
            ) / (2 * h)
            assert abs(numeric - analytic[i, j]) < 1e-6


def test_structure_loss_gradcheck():
    gt = (torch.rand(1, 1, 6, 6) > 0.5).double()
    z = torch.randn(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: structure_loss(x, gt, LossConfig(pool_kernel=3)), (z,))


# --- deep supervision ----------------------------------------------------------


def test_identical_heads_triple_the_loss():
    logits, gt = _random_case(17)
    head, gt_t = _t(logits), _t(gt)
    single = structure_loss(head, gt_t)
    assert total_loss([head, head, head], gt_t).item() == pytest.approx(3 * single.item(), abs=1e-12)


def test_only_first_head_weighted():
    gt = _t(_random_case(19)[1])
    heads = [_t(_random_case(s)[0]) for s in (21, 22, 23)]
    loss = total_loss(heads, gt, LossConfig(head_weights=(1.0, 0.0, 0.0)))
    assert loss.item() == pytest.approx(structure_loss(heads[0], gt).item(), abs=1e-12)


def test_weighted_sum_over_decoder_output():
    gt = _t(_random_case(29)[1])
    heads = [_t(_random_case(s)[0]) for s in (31, 32, 33)]
    cfg = LossConfig(head_weights=(0.5, 1.5, 2.0))
    output = DecoderOutput(logits=heads, stage_features=(heads[0], heads[1], heads[2]))
    expected = sum(w * structure_loss(h, gt, cfg).item() for w, h in zip(cfg.head_weights, heads))
    assert DeepSupervisionLoss(cfg)(output, gt).item() == pytest.approx(expected, abs=1e-12)


def test_total_loss_matches_loop_reference_on_random_instances():
    for seed in range(100):
        _, gt, _, kernel, gain = _random_instance(seed)
        rng = np.random.default_rng(1000 + seed)
        heads = [rng.normal(0.0, 3.0, gt.shape) for _ in range(3)]
        weights = tuple(float(w) for w in rng.uniform(0.0, 2.0, 3))
        cfg = LossConfig(pool_kernel=kernel, weight_gain=gain, head_weights=weights)
        expected = sum(w * _structure_reference(h, gt, kernel, gain, 1.0) for w, h in zip(weights, heads))
        actual = total_loss([_t(h) for h in heads], _t(gt), cfg).item()
        assert abs(actual - expected) < 1e-6, seed


def test_total_loss_gradient_matches_central_differences():
    _, gt, _, _, _ = _random_instance(55)
    cfg = LossConfig(pool_kernel=3, head_weights=(0.5, 1.5, 2.0))
    heads = tuple(torch.randn(1, 1, *gt.shape, dtype=torch.float64, requires_grad=True) for _ in range(3))
    assert torch.autograd.gradcheck(lambda *h: total_loss(list(h), _t(gt), cfg), heads, eps=1e-6, atol=1e-6)


def test_head_count_mismatch():
    gt = torch.zeros(1, 1, 8, 8)
    with pytest.raises(ConfigError) as exc:
        total_loss([torch.zeros(1, 1, 8, 8)] * 2, gt)
    assert exc.value.key == "head_weights"
