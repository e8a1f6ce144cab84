import math

import numpy as np
import pytest

from repspark import repvit
from repspark.repvit import (
    BackboneConfig,
    ConvBN,
    RepBranchSet,
    RepViTBlock,
    SEParams,
    backbone_forward,
    cb_fuse,
    cb_linear,
    fuse_conv_bn,
    fuse_rep_branches,
    init_backbone,
    random_block,
    random_rep_branches,
    reparam_backbone,
    reparam_block,
    rep_branches_forward,
    repvit_block_forward,
    se_forward,
    se_gate,
)
from repspark.tensor_core import BNParams, ConvParams, batchnorm_apply, conv2d


def random_bn(rng, c, eps=1e-5):
    return BNParams(rng.uniform(0.5, 2, c), rng.standard_normal(c), rng.standard_normal(c), rng.uniform(0.1, 2, c), eps)


def zero_conv(c_out, c_in_per_group, k, stride=1, groups=1):
    return ConvParams(np.zeros((c_out, c_in_per_group, k, k)), np.zeros(c_out), stride, k // 2, groups)


# -- conv + BN folding -------------------------------------------------------


def test_fuse_identity_bn_keeps_weights():
    rng = np.random.default_rng(0)
    conv = ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), 1, 1)
    fused = fuse_conv_bn(conv, BNParams.identity(3))
    np.testing.assert_array_equal(fused.weight, conv.weight)
    np.testing.assert_array_equal(fused.bias, conv.bias)


def test_fuse_hand_algebra():
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    bn = BNParams(np.array([2.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]), 0.0)
    fused = fuse_conv_bn(ConvParams(w, np.zeros(1), 1, 1), bn)
    np.testing.assert_array_equal(fused.weight, 2 * w)
    np.testing.assert_array_equal(fused.bias, [1.0])


def test_fuse_conv_bn_identity_relative():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        c_in, c_out = rng.integers(1, 5, 2)
        conv = ConvParams(rng.standard_normal((c_out, c_in, 3, 3)), rng.standard_normal(c_out), 1, 1)
        bn = random_bn(rng, c_out)
        x = rng.standard_normal((1, c_in, 5, 5))
        a = batchnorm_apply(conv2d(x, conv), bn)
        b = conv2d(x, fuse_conv_bn(conv, bn))
        worst = max(worst, np.max(np.abs(a - b)) / np.max(np.abs(a)))
    assert worst <= 1e-12


def test_fuse_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        fuse_conv_bn(zero_conv(3, 1, 1), BNParams.identity(2))


# -- rep branches --------------------------------------------------------------


def test_identity_only_branches_fuse_to_center_one():
    c = 3
    bn0 = BNParams(np.zeros(c), np.zeros(c), np.zeros(c), np.ones(c), 0.0)
    branches = RepBranchSet(
        ConvBN(zero_conv(c, 1, 3, groups=c), bn0),
        ConvBN(zero_conv(c, 1, 1, groups=c), bn0),
        BNParams.identity(c),
    )
    fused = fuse_rep_branches(branches)
    want = np.zeros((c, 1, 3, 3))
    want[:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(fused.weight, want)
    np.testing.assert_array_equal(fused.bias, np.zeros(c))
    x = np.random.default_rng(2).standard_normal((1, c, 6, 6))
    np.testing.assert_array_equal(conv2d(x, fused), x)


def test_pointwise_branch_lands_on_center():
    c = 2
    bn0 = BNParams(np.zeros(c), np.zeros(c), np.zeros(c), np.ones(c), 0.0)
    w1 = np.array([0.7, -1.3]).reshape(c, 1, 1, 1)
    branches = RepBranchSet(
        ConvBN(zero_conv(c, 1, 3, stride=2, groups=c), bn0),
        ConvBN(ConvParams(w1, np.zeros(c), 2, 0, c), BNParams.identity(c)),
        None,
    )
    fused = fuse_rep_branches(branches)
    assert fused.stride == 2
    want = np.zeros((c, 1, 3, 3))
    want[:, 0, 1, 1] = [0.7, -1.3]
    np.testing.assert_array_equal(fused.weight, want)


@pytest.mark.parametrize("stride", [1, 2])
def test_branch_sum_equals_fused(stride):
    rng = np.random.default_rng(3)
    for c in (4, 8):
        br = random_rep_branches(rng, c, stride, np.float32)
        x = rng.standard_normal((2, c, 9, 9)).astype(np.float32)
        a = rep_branches_forward(x, br)
        b = conv2d(x, fuse_rep_branches(br))
        assert np.max(np.abs(a - b)) <= 1e-5


def test_rep_branch_validation():
    rng = np.random.default_rng(4)
    good = random_rep_branches(rng, 4, 1)
    with pytest.raises(ValueError):
        RepBranchSet(good.dw3x3, good.dw1x1, None)  # stride 1 needs identity
    s2 = random_rep_branches(rng, 4, 2)
    with pytest.raises(ValueError):
        RepBranchSet(s2.dw3x3, s2.dw1x1, BNParams.identity(4))
    with pytest.raises(ValueError):
        RepBranchSet(good.dw3x3, s2.dw1x1, good.identity_bn)  # stride mismatch
    with pytest.raises(ValueError):
        RepBranchSet(good.dw3x3, random_rep_branches(rng, 8, 1).dw1x1, good.identity_bn)


# -- SE ----------------------------------------------------------------------


def make_se(c, expand_bias, ratio=4):
    r = c // ratio
    return SEParams(
        ConvParams(np.zeros((r, c, 1, 1)), np.zeros(r)),
        ConvParams(np.zeros((c, r, 1, 1)), np.full(c, expand_bias)),
        ratio,
    )


def test_se_half_gate_and_saturation():
    x = np.random.default_rng(5).standard_normal((2, 8, 4, 4))
    np.testing.assert_array_equal(se_forward(x, make_se(8, 0.0)), x / 2)
    np.testing.assert_allclose(se_forward(x, make_se(8, 60.0)), x, rtol=1e-15)


def test_se_zero_input_and_gate_bounds():
    rng = np.random.default_rng(6)
    se = repvit.random_se(rng, 8)
    assert np.all(se_forward(np.zeros((1, 8, 3, 3)), se) == 0)
    x = rng.standard_normal((3, 8, 5, 5))
    g = se_gate(x, se)
    assert g.shape == (3, 8, 1, 1) and np.all((g > 0) & (g < 1))
    assert np.array_equal(np.sign(se_forward(x, se)), np.sign(x))


def test_se_validation():
    with pytest.raises(ValueError):
        make_se(6, 0.0)
    with pytest.raises(ValueError, match="channel"):
        se_forward(np.zeros((1, 4, 2, 2)), make_se(8, 0.0))


# -- blocks ------------------------------------------------------------------


def zero_block(c, expansion=2):
    zero_bn = BNParams.identity(c)
    return RepViTBlock(
        RepBranchSet(ConvBN(zero_conv(c, 1, 3, groups=c), zero_bn), ConvBN(zero_conv(c, 1, 1, groups=c), zero_bn), BNParams.identity(c)),
        None,
        ConvBN(zero_conv(c * expansion, c, 1), BNParams.identity(c * expansion)),
        ConvBN(zero_conv(c, c * expansion, 1), BNParams.identity(c)),
    )


def test_zero_block_is_identity():
    x = np.random.default_rng(7).standard_normal((2, 4, 6, 6))
    np.testing.assert_array_equal(repvit_block_forward(x, zero_block(4)), x)
    np.testing.assert_array_equal(repvit_block_forward(x, reparam_block(zero_block(4))), x)


def test_hand_computed_single_channel_block():
    ident0 = BNParams.identity(1)
    w3 = np.zeros((1, 1, 3, 3))
    w3[0, 0, 1, 1] = 0.5
    block = RepViTBlock(
        RepBranchSet(
            ConvBN(ConvParams(w3, np.array([0.1]), 1, 1, 1), ident0),
            ConvBN(ConvParams(np.full((1, 1, 1, 1), 0.25), np.zeros(1), 1, 0, 1), ident0),
            BNParams(np.array([2.0]), np.zeros(1), np.zeros(1), np.ones(1), 0.0),
        ),
        None,
        ConvBN(ConvParams(np.array([1.0, -1.0]).reshape(2, 1, 1, 1), np.zeros(2)), BNParams.identity(2)),
        ConvBN(ConvParams(np.ones((1, 2, 1, 1)), np.zeros(1)), ident0),
    )
    # token: 0.5*2 + 0.1 + 0.25*2 + 2*2 = 5.6 ; ffn: gelu(a) + gelu(-a) = a*erf(a/sqrt2)
    a = 5.6
    want = a + a * math.erf(a / math.sqrt(2))
    got = repvit_block_forward(np.full((1, 1, 1, 1), 2.0), block).item()
    assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_block_train_deploy_equivalence(dtype, tol):
    rng = np.random.default_rng(8)
    for i in range(30):
        c = (4, 8, 16)[i % 3]
        s = (8, 16)[i % 2]
        block = random_block(rng, c, se=bool(i % 2), dtype=dtype)
        x = rng.standard_normal((1, c, s, s)).astype(dtype)
        a = repvit_block_forward(x, block, mode="train_form")
        b = repvit_block_forward(x, reparam_block(block), mode="deploy_form")
        assert a.dtype == dtype
        assert np.max(np.abs(a - b)) <= tol


def test_block_mode_errors():
    block = random_block(np.random.default_rng(9), 4)
    x = np.zeros((1, 4, 4, 4))
    with pytest.raises(ValueError, match="fused weights are missing"):
        repvit_block_forward(x, block, mode="deploy_form")
    with pytest.raises(ValueError):
        repvit_block_forward(x, reparam_block(block), mode="train_form")
    with pytest.raises(ValueError, match="already in deploy form"):
        reparam_block(reparam_block(block))


# -- backbone ------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy32():
    return init_backbone(BackboneConfig(), seed=0, dtype=np.float32)


def test_level_shapes(toy32):
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32)
    pyr = backbone_forward(x, toy32)
    assert [lvl.shape[1:] for lvl in pyr.levels] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert tuple(pyr.strides) == (4, 8, 16, 32)


def test_backbone_train_deploy_equivalence(toy32):
    deploy = reparam_backbone(toy32)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal((1, 3, 64, 64)).astype(np.float32)
        a = backbone_forward(x, toy32, mode="train_form")
        b = backbone_forward(x, deploy, mode="deploy_form")
        assert max(np.max(np.abs(p - q)) for p, q in zip(a.levels, b.levels)) <= 1e-4


def test_backbone_param_count_and_double_fuse(toy32):
    deploy = reparam_backbone(toy32)
    assert deploy.num_params() < toy32.num_params()
    assert deploy.form == "deploy"
    with pytest.raises(ValueError, match="already in deploy form"):
        reparam_backbone(deploy)


def test_backbone_deterministic(toy32):
    x = np.random.default_rng(2).standard_normal((1, 3, 32, 32)).astype(np.float32)
    a, b = backbone_forward(x, toy32), backbone_forward(x, toy32)
    assert all(np.array_equal(p, q) for p, q in zip(a.levels, b.levels))


def test_backbone_input_errors(toy32):
    with pytest.raises(ValueError, match="divisible by 32"):
        backbone_forward(np.zeros((1, 3, 48, 64), np.float32), toy32)
    with pytest.raises(ValueError, match="channel"):
        backbone_forward(np.zeros((1, 1, 64, 64), np.float32), toy32)


def test_zero_weight_backbone_gives_zero_pyramid():
    w = init_backbone(BackboneConfig(stage_channels=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1)), seed=0)
    tensors = repvit_zero(w)
    pyr = backbone_forward(np.random.default_rng(3).standard_normal((1, 3, 32, 32)), tensors)
    assert all(np.all(lvl == 0) for lvl in pyr.levels)


def repvit_zero(weights):
    """Zero every conv weight/bias and BN shift; keep BN scales at 1."""
    from repspark import io_formats

    c = io_formats.backbone_to_tensors(weights)
    out = {}
    for name, arr in c.tensors.items():
        if name.endswith((".gamma", ".running_var")):
            out[name] = np.ones_like(arr)
        elif name.endswith(".eps"):
            out[name] = arr
        else:
            out[name] = np.zeros_like(arr)
    return io_formats.backbone_from_tensors(io_formats.WeightContainer(c.form, out))


def test_se_alternates_starting_with_se():
    w = init_backbone(BackboneConfig(), seed=0)
    for stage in w.stages:
        assert [b.se is not None for b in stage] == [i % 2 == 0 for i in range(len(stage))]
    w1 = init_backbone(BackboneConfig(se_phase=1), seed=0)
    assert w1.stages[0][0].se is None and w1.stages[0][1].se is not None


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(stage_channels=(32, 16, 64, 128))
    with pytest.raises(ValueError):
        BackboneConfig(stage_depths=(2, 0, 4, 2))
    with pytest.raises(ValueError):
        BackboneConfig(stage_channels=(6, 8, 8, 8))


def test_grayscale_input():
    w = init_backbone(BackboneConfig(input_channels=1, stage_channels=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1)))
    assert backbone_forward(np.zeros((2, 1, 32, 32)), w).levels[3].shape == (2, 8, 1, 1)


# -- CBLinear / CBFuse -------------------------------------------------------


def test_cb_linear_identity_and_split():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 4, 4))
    eye = ConvParams(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    (only,) = cb_linear(x, eye, [3])
    np.testing.assert_array_equal(only, x)
    a, b = cb_linear(x, eye, [1, 2])
    np.testing.assert_array_equal(a, x[:, :1])
    np.testing.assert_array_equal(b, x[:, 1:])


def test_cb_linear_concat_round_trip():
    rng = np.random.default_rng(5)
    proj = ConvParams(rng.standard_normal((6, 4, 1, 1)), rng.standard_normal(6))
    x = rng.standard_normal((2, 4, 5, 5))
    parts = cb_linear(x, proj, [2, 1, 3])
    assert np.array_equal(np.concatenate(parts, axis=1), conv2d(x, proj))
    with pytest.raises(ValueError, match="sum"):
        cb_linear(x, proj, [2, 2])


def test_cb_fuse_cases():
    rng = np.random.default_rng(6)
    f = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(cb_fuse([f], 0), f)
    g = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(cb_fuse([f, g], 1), f + g)
    big = np.arange(16.0).reshape(1, 1, 4, 4)
    small = np.ones((1, 1, 2, 2))
    # top-left of each 2x2 block: 0, 2, 8, 10
    np.testing.assert_array_equal(cb_fuse([big, small], 1)[0, 0], [[1, 3], [9, 11]])
    up = cb_fuse([small, big], 1)
    np.testing.assert_array_equal(up[0, 0], big[0, 0] + 1)


def test_cb_fuse_errors():
    with pytest.raises(ValueError, match="channel"):
        cb_fuse([np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 4))], 0)
    with pytest.raises(ValueError):
        cb_fuse([np.zeros((1, 2, 6, 6)), np.zeros((1, 2, 4, 4))], 1)
