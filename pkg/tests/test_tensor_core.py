import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repspark import _backend
from repspark.tensor_core import (
    BNParams,
    ConvParams,
    activation,
    as_tensor,
    batchnorm_apply,
    conv2d,
    conv_output_size,
    global_avg_pool,
    resize_nearest,
)

BACKENDS = ["python"] + (["cython"] if _backend.compiled_kernels is not None else [])


def naive_conv(x, w, b, stride, padding, groups):
    """Seven nested loops, written independently of the library kernels."""
    n, c, h, wd = x.shape
    co, cpg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    opg = co // groups
    for ni in range(n):
        for o in range(co):
            g = o // opg
            for i in range(oh):
                for j in range(ow):
                    s = b[o]
                    for ci in range(cpg):
                        for ky in range(kh):
                            for kx in range(kw):
                                s += w[o, ci, ky, kx] * xp[ni, g * cpg + ci, i * stride + ky, j * stride + kx]
                    out[ni, o, i, j] = s
    return out


def random_conv(rng, c_in, c_out, k, stride=1, padding=0, groups=1, dtype=np.float64):
    w = rng.standard_normal((c_out, c_in // groups, k, k)).astype(dtype)
    b = rng.standard_normal(c_out).astype(dtype)
    return ConvParams(w, b, stride, padding, groups)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize(
    "c_in,c_out,k,stride,padding,groups",
    [(1, 1, 3, 1, 1, 1), (3, 4, 3, 2, 1, 1), (4, 4, 3, 1, 1, 4), (6, 4, 1, 1, 0, 2), (2, 3, 3, 2, 0, 1), (4, 8, 3, 2, 1, 4)],
)
def test_conv_matches_naive_loops(backend, c_in, c_out, k, stride, padding, groups):
    rng = np.random.default_rng(c_in * 100 + c_out * 10 + k + stride)
    x = rng.standard_normal((2, c_in, 7, 6))
    p = random_conv(rng, c_in, c_out, k, stride, padding, groups)
    got = conv2d(x, p, backend=backend)
    want = naive_conv(x, p.weight, p.bias, stride, padding, groups)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(dtype):
    rng = np.random.default_rng(7)
    for stride, groups in [(1, 1), (2, 1), (1, 8), (2, 8), (1, 2)]:
        x = rng.standard_normal((1, 8, 11, 9)).astype(dtype)
        p = random_conv(rng, 8, 8, 3, stride, 1, groups, dtype)
        a = conv2d(x, p, backend="python")
        b = conv2d(x, p, backend="cython")
        assert a.dtype == b.dtype == dtype
        assert np.array_equal(a, b)


def test_identity_kernel_returns_input():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(conv2d(x, ConvParams(w, np.zeros(1), 1, 1)), x)


def test_pointwise_hand_value():
    y = conv2d(np.ones((1, 1, 2, 2)), ConvParams(np.full((1, 1, 1, 1), 3.0), np.ones(1)))
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 4.0))


def test_zero_kernel_gives_bias():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    y = conv2d(x, ConvParams(np.zeros((2, 3, 3, 3)), np.array([1.5, -2.0]), 1, 1))
    assert np.all(y[:, 0] == 1.5) and np.all(y[:, 1] == -2.0)


def test_channel_mismatch_names_dimension():
    p = ConvParams(np.zeros((4, 2, 3, 3)), np.zeros(4), groups=2)
    with pytest.raises(ValueError, match="channel"):
        conv2d(np.zeros((1, 3, 5, 5)), p)
    with pytest.raises(ValueError, match="height"):
        conv2d(np.zeros((1, 4, 2, 5)), p)
    with pytest.raises(ValueError, match="width"):
        conv2d(np.zeros((1, 4, 5, 2)), p)


def test_conv_params_invariants():
    with pytest.raises(ValueError):
        ConvParams(np.zeros((3, 1, 3, 3)), np.zeros(3), groups=2)
    with pytest.raises(ValueError):
        ConvParams(np.zeros((3, 1, 3, 3)), np.zeros(2))
    dw = ConvParams(np.zeros((4, 1, 3, 3)), np.zeros(4), groups=4)
    assert dw.is_depthwise and dw.in_channels == 4


def test_as_tensor_rejects_bad_rank():
    with pytest.raises(ValueError):
        as_tensor(np.zeros((3, 3)))
    assert as_tensor(np.zeros((1, 1, 2, 2), dtype=np.int64)).dtype == np.float64


def test_conv_linearity():
    rng = np.random.default_rng(3)
    p = random_conv(rng, 8, 5, 3, 1, 1)
    p0 = ConvParams(p.weight, np.zeros(5), 1, 1)
    x, y = rng.standard_normal((2, 1, 8, 9, 9))
    a, b = 1.7, -0.4
    lhs = conv2d(a * x + b * y, p)
    rhs = a * conv2d(x, p0) + b * conv2d(y, p0) + p.bias[None, :, None, None]
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_conv_is_sum_over_input_channels():
    rng = np.random.default_rng(4)
    p = random_conv(rng, 5, 3, 3, 2, 1)
    x = rng.standard_normal((1, 5, 9, 9))
    total = p.bias[None, :, None, None].copy()
    for c in range(5):
        single = ConvParams(p.weight[:, c:c + 1], np.zeros(3), 2, 1)
        total = total + conv2d(x[:, c:c + 1], single)
    np.testing.assert_allclose(conv2d(x, p), total, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    size=st.integers(1, 12), k=st.integers(1, 5), stride=st.integers(1, 3), padding=st.integers(0, 2),
)
def test_output_shape_formula(size, k, stride, padding):
    if size + 2 * padding < k:
        return
    p = ConvParams(np.ones((2, 1, k, k)), np.zeros(2), stride, padding)
    y = conv2d(np.ones((1, 1, size, size + 1)), p)
    assert y.shape == (1, 2, conv_output_size(size, k, stride, padding), conv_output_size(size + 1, k, stride, padding))


def test_conv_deterministic():
    rng = np.random.default_rng(5)
    p = random_conv(rng, 4, 4, 3, 1, 1)
    x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    assert np.array_equal(conv2d(x, p), conv2d(x, p))


# -- batch norm --------------------------------------------------------------


def test_bn_identity_and_hand_value():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(batchnorm_apply(x, BNParams.identity(3)), x)
    bn = BNParams(np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), 0.0)
    assert batchnorm_apply(np.full((1, 1, 1, 1), 3.0), bn)[0, 0, 0, 0] == 3.0


def test_bn_zero_gamma_is_constant_beta():
    bn = BNParams(np.zeros(2), np.array([0.5, -1.0]), np.ones(2), np.ones(2))
    y = batchnorm_apply(np.random.default_rng(1).standard_normal((1, 2, 3, 3)), bn)
    assert np.all(y[:, 0] == 0.5) and np.all(y[:, 1] == -1.0)


def test_bn_affine_property():
    rng = np.random.default_rng(2)
    bn = BNParams(rng.uniform(0.5, 2, 4), rng.standard_normal(4), rng.standard_normal(4), rng.uniform(0.1, 2, 4), 1e-5)
    x = rng.standard_normal((1, 4, 3, 3))
    d = rng.standard_normal((1, 4, 3, 3))
    diff = batchnorm_apply(x + d, bn) - batchnorm_apply(x, bn)
    np.testing.assert_allclose(diff, (bn.gamma / np.sqrt(bn.running_var + bn.eps))[None, :, None, None] * d, atol=1e-10)


def test_bn_validation():
    with pytest.raises(ValueError):
        BNParams(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        BNParams(np.ones(2), np.zeros(2), np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError, match="channel"):
        batchnorm_apply(np.zeros((1, 3, 2, 2)), BNParams.identity(2))


# -- activations, pooling, resizing ------------------------------------------


def test_activation_points():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(activation(x, "relu").ravel(), [0.0, 0.0, 2.0])
    assert activation(np.zeros((1, 1, 1, 1)), "sigmoid").item() == 0.5
    assert activation(np.zeros((1, 1, 1, 1)), "gelu").item() == 0.0
    with pytest.raises(ValueError):
        activation(x, "swish")


def test_gelu_uses_exact_cdf():
    from math import erf, sqrt

    for v in (-3.0, -0.5, 0.7, 2.5):
        want = 0.5 * v * (1 + erf(v / sqrt(2)))
        assert activation(np.full((1, 1, 1, 1), v), "gelu").item() == pytest.approx(want, abs=1e-15)


def test_activation_keeps_float32():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    for kind in ("relu", "gelu", "sigmoid"):
        assert activation(x, kind).dtype == np.float32


def test_global_avg_pool():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert global_avg_pool(x).item() == 2.5
    assert global_avg_pool(np.full((2, 3, 4, 5), 7.0)).shape == (2, 3, 1, 1)
    single = np.random.default_rng(0).standard_normal((2, 3, 1, 1))
    np.testing.assert_array_equal(global_avg_pool(single), single)


def test_resize_nearest():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    up = resize_nearest(x, 2)
    np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    np.testing.assert_array_equal(resize_nearest(up, 2, downsample=True), x)
    np.testing.assert_array_equal(resize_nearest(x, 1), x)
    with pytest.raises(ValueError):
        resize_nearest(np.zeros((1, 1, 3, 3)), 2, downsample=True)
