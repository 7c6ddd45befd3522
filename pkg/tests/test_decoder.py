import math

import numpy as np
import pytest
import torch

from sam3unet.decoder import (
    LightweightBlock,
    LightweightBlockConfig,
    LightweightDecoder,
    decode,
    lightweight_block,
    upsample_to,
)
from sam3unet.errors import ConfigError, ShapeError
from sam3unet.pyramid import FeaturePyramid, PyramidNeck


def _gelu(v: float) -> float:
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def _conv_bn_gelu(x: np.ndarray, unit, groups: int) -> np.ndarray:
    """Loop convolution (zero padding, stride 1) followed by eval-mode BN and GELU."""

    weight = unit.conv.weight.detach().numpy()
    bn = unit.bn
    mean, var = bn.running_mean.numpy(), bn.running_var.numpy()
    gamma, beta = bn.weight.detach().numpy(), bn.bias.detach().numpy()
    out_c, in_per_group, k, _ = weight.shape
    channels, height, width = x.shape
    pad = k // 2
    out_per_group = out_c // groups
    out = np.zeros((out_c, height, width))
    for o in range(out_c):
        group = o // out_per_group
        for i in range(height):
            for j in range(width):
                total = 0.0
                for c in range(in_per_group):
                    src = group * in_per_group + c
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i + di - pad, j + dj - pad
                            if 0 <= y < height and 0 <= xx < width:
                                total += weight[o, c, di, dj] * x[src, y, xx]
                normed = (total - mean[o]) / math.sqrt(var[o] + bn.eps) * gamma[o] + beta[o]
                out[o, i, j] = _gelu(normed)
    return out


def _block_reference(x: np.ndarray, block: LightweightBlock) -> np.ndarray:
    branch = block.cfg.branch
    reduced = _conv_bn_gelu(x, block.reduce, groups=1)
    p1, p2 = reduced[:branch], reduced[branch:]
    p3 = _conv_bn_gelu(p2, block.dw1, groups=branch)
    p4 = _conv_bn_gelu(p3, block.dw2, groups=branch)
    return _conv_bn_gelu(np.concatenate([p1, p2, p3, p4]), block.expand, groups=1)


# --- lightweight block ---------------------------------------------------------


def test_block_arithmetic_at_128_channels():
    cfg = LightweightBlockConfig(128, 128)
    assert (cfg.reduced, cfg.branch, cfg.concat) == (32, 16, 64)
    block = LightweightBlock(128, 96)
    assert block.reduce.conv.out_channels == 32
    assert block.dw1.conv.groups == 16
    assert block.expand.conv.in_channels == 64
    assert lightweight_block(torch.randn(2, 128, 5, 5), block).shape == (2, 96, 5, 5)


def test_convolutions_carry_no_bias():
    block = LightweightBlock(16, 8)
    for unit in (block.reduce, block.dw1, block.dw2, block.expand):
        assert unit.conv.bias is None


@pytest.mark.parametrize("channels", [0, 4, 12, 100])
def test_channels_not_divisible_by_8_are_rejected(channels):
    with pytest.raises(ConfigError):
        LightweightBlock(channels, 8)


def test_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        LightweightBlock(16, 16)(torch.randn(1, 8, 4, 4))


def test_zero_weights_give_gelu_of_bias():
    block = LightweightBlock(8, 8).eval()
    with torch.no_grad():
        for unit in (block.reduce, block.dw1, block.dw2, block.expand):
            unit.conv.weight.zero_()
        block.expand.bn.bias.fill_(0.3)
    out = block(torch.randn(1, 8, 4, 4))
    expected = torch.nn.functional.gelu(torch.tensor(0.3))
    assert torch.allclose(out, expected.expand_as(out), atol=1e-6)


def test_block_matches_scalar_reference():
    block = LightweightBlock(8, 8).double().eval()
    with torch.no_grad():
        for unit in (block.reduce, block.dw1, block.dw2, block.expand):
            torch.nn.init.normal_(unit.conv.weight, std=0.5)
            unit.bn.running_mean.uniform_(-0.2, 0.2)
            unit.bn.running_var.uniform_(0.5, 1.5)
            unit.bn.weight.uniform_(0.5, 1.5)
            unit.bn.bias.uniform_(-0.2, 0.2)
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    actual = block(x)[0].detach().numpy()
    expected = _block_reference(x[0].numpy(), block)
    assert np.max(np.abs(actual - expected)) < 1e-5


def test_block_gradcheck():
    block = LightweightBlock(8, 8).double().eval()
    x = torch.randn(1, 8, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(block, (x,), eps=1e-6, atol=1e-5)


def _randomize_batch_norms(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for bn in module.modules():
            if isinstance(bn, torch.nn.BatchNorm2d):
                bn.weight.uniform_(0.5, 1.5)
                bn.bias.uniform_(-0.2, 0.2)
                bn.running_mean.uniform_(-0.1, 0.1)
                bn.running_var.uniform_(0.5, 1.5)


def _leaf_parameters(module: torch.nn.Module):
    names = [name for name, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())
    return names, params


def test_block_parameter_gradients_match_central_differences():
    block = LightweightBlock(8, 8).double().eval()
    _randomize_batch_norms(block)
    x = torch.randn(1, 8, 3, 3, dtype=torch.float64)
    names, params = _leaf_parameters(block)

    def call(*values):
        return torch.func.functional_call(block, dict(zip(names, values)), (x,))

    assert torch.autograd.gradcheck(call, params, eps=1e-6, atol=1e-5)


def test_tiny_decoder_parameter_gradients_match_central_differences():
    decoder = LightweightDecoder(channels=8).double().eval()
    _randomize_batch_norms(decoder)
    maps = [torch.randn(1, 8, s, s, dtype=torch.float64) for s in (8, 4, 2, 1)]
    pyr = FeaturePyramid(*maps, input_size=(32, 32))
    readout = [torch.randn(1, 1, 32, 32, dtype=torch.float64) for _ in range(3)]
    names, params = _leaf_parameters(decoder)

    def scalar(*values):
        out = torch.func.functional_call(decoder, dict(zip(names, values)), (pyr,))
        return sum((logit * w).sum() for logit, w in zip(out.logits, readout))

    assert torch.autograd.gradcheck(scalar, params, eps=1e-6, atol=1e-5)


# --- decoder -------------------------------------------------------------------


def _toy_pyramid(batch: int = 1) -> FeaturePyramid:
    neck = PyramidNeck(64)
    return neck(torch.randn(batch, 64, 6, 6), (84, 84))


def test_toy_decoder_stage_and_logit_shapes():
    out = decode(LightweightDecoder(), _toy_pyramid(batch=2))
    assert [tuple(f.shape) for f in out.stage_features] == [
        (2, 128, 5, 5),
        (2, 128, 10, 10),
        (2, 128, 21, 21),
    ]
    assert [tuple(logit.shape) for logit in out.logits] == [(2, 1, 84, 84)] * 3
    assert out.prediction is out.logits[-1]


def test_decoder_at_336():
    neck = PyramidNeck(32)
    decoder = LightweightDecoder().eval()
    with torch.no_grad():
        out = decoder(neck(torch.randn(1, 32, 24, 24), (336, 336)))
    assert [tuple(logit.shape) for logit in out.logits] == [(1, 1, 336, 336)] * 3


def test_decoder_blocks_all_output_128_channels():
    decoder = LightweightDecoder()
    for block in (decoder.stem, decoder.fuse3, decoder.fuse2, decoder.fuse1):
        assert block.expand.conv.out_channels == 128
    for block in (decoder.fuse3, decoder.fuse2, decoder.fuse1):
        assert block.cfg.in_channels == 256


def test_decoder_rejects_wrong_pyramid_width():
    pyr = PyramidNeck(64, channels=64)(torch.randn(1, 64, 6, 6), (84, 84))
    with pytest.raises(ShapeError):
        LightweightDecoder()(pyr)


# --- upsample ------------------------------------------------------------------


def test_upsample_to_target_size():
    assert upsample_to(torch.randn(1, 128, 10, 10), (21, 21)).shape == (1, 128, 21, 21)


def test_upsample_of_constant_is_constant_both_ways():
    constant = torch.full((1, 3, 5, 5), -1.25)
    up = upsample_to(constant, (21, 21))
    assert torch.allclose(up, torch.full_like(up, -1.25), atol=1e-6)
    down = upsample_to(up, (5, 5))
    assert torch.allclose(down, constant, atol=1e-6)


def test_upsample_rejects_empty_target():
    with pytest.raises(ShapeError):
        upsample_to(torch.randn(1, 1, 4, 4), (0, 4))
