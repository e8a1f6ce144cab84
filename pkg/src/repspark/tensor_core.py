"""Dense rank-4 tensor kernels (NCHW) used by every higher-level module.

Tensors are plain ``numpy.ndarray`` objects of shape (n, c, h, w) and dtype
float32 or float64. Convolution and its sparse variant dispatch to the
compiled kernels when available (see ``_backend``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from . import _backend

Tensor = np.ndarray

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_tensor(x, dtype=None) -> Tensor:
    """Validate (and optionally cast) ``x`` as a contiguous NCHW float tensor."""
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _DTYPES:
        arr = arr.astype(np.float64)
    if arr.dtype not in _DTYPES:
        raise TypeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
    if arr.ndim != 4:
        raise ValueError(f"tensor must be rank 4 (n, c, h, w), got shape {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch_per_group, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 4:
            raise ValueError(f"conv weight must be rank 4, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv bias shape {b.shape} does not match out_ch={w.shape[0]}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError("stride >= 1, padding >= 0 and groups >= 1 are required")
        if w.shape[0] % self.groups:
            raise ValueError(f"out_ch={w.shape[0]} is not divisible by groups={self.groups}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def astype(self, dtype) -> ConvParams:
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype), self.stride, self.padding, self.groups)


@dataclass(frozen=True)
class BNParams:
    """Inference-mode batch norm statistics and affine parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = field(default=1e-5)

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.gamma, self.beta, self.running_mean, self.running_var)]
        for name, a in zip(("gamma", "beta", "running_mean", "running_var"), arrays):
            object.__setattr__(self, name, a)
            if a.shape != arrays[0].shape or a.ndim != 1:
                raise ValueError(f"BN {name} has shape {a.shape}, expected ({arrays[0].shape[0]},)")
        if np.any(arrays[3] < 0):
            raise ValueError("BN running_var must be non-negative")
        # eps == 0 is allowed as long as no channel divides by zero
        if self.eps < 0 or np.any(arrays[3] + self.eps <= 0):
            raise ValueError("BN requires eps >= 0 and running_var + eps > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, eps: float = 0.0) -> BNParams:
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), eps,
        )

    def scale(self) -> np.ndarray:
        return self.gamma / np.sqrt(self.running_var + self.eps)

    def num_params(self) -> int:
        return 4 * self.channels

    def astype(self, dtype) -> BNParams:
        return BNParams(*(a.astype(dtype) for a in (self.gamma, self.beta, self.running_mean, self.running_var)), self.eps)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_input(x: Tensor, p: ConvParams) -> None:
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ValueError(
            f"channel mismatch: input has {c} channels, conv expects "
            f"groups*in_ch_per_group = {p.groups}*{p.weight.shape[1]} = {p.in_channels}"
        )
    kh, kw = p.kernel_size
    if h + 2 * p.padding < kh:
        raise ValueError(f"height mismatch: padded height {h + 2 * p.padding} < kernel height {kh}")
    if w + 2 * p.padding < kw:
        raise ValueError(f"width mismatch: padded width {w + 2 * p.padding} < kernel width {kw}")


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, p: ConvParams, backend: str | None = None) -> Tensor:
    """Direct 2-D convolution with symmetric zero padding, stride and groups."""
    x = as_tensor(x)
    _check_conv_input(x, p)
    k = _backend.get_kernels(backend)
    w = np.ascontiguousarray(p.weight, dtype=x.dtype)
    b = np.ascontiguousarray(p.bias, dtype=x.dtype)
    return k.conv2d_valid(np.ascontiguousarray(_pad(x, p.padding)), w, b, p.stride, p.groups)


def batchnorm_apply(x: Tensor, p: BNParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] != p.channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, BN has {p.channels}")
    dt = x.dtype
    scale = (p.gamma / np.sqrt(p.running_var + p.eps)).astype(dt)[None, :, None, None]
    return (x - p.running_mean.astype(dt)[None, :, None, None]) * scale + p.beta.astype(dt)[None, :, None, None]


def activation(x: Tensor, kind: str) -> Tensor:
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, x.dtype.type(0))
    if kind == "gelu":
        # exact erf form
        return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0).astype(x.dtype)))).astype(x.dtype)
    if kind == "sigmoid":
        return expit(x)
    raise ValueError(f"unknown activation {kind!r}; expected relu, gelu or sigmoid")


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True)


def resize_nearest(x: Tensor, factor: int, *, downsample: bool = False) -> Tensor:
    """Nearest-neighbour resize by an integer factor.

    Upsampling replicates each pixel into a ``factor x factor`` block;
    downsampling keeps the top-left pixel of each block.
    """
    x = as_tensor(x)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"resize factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x.copy()
    if downsample:
        h, w = x.shape[2:]
        if h % factor or w % factor:
            raise ValueError(f"cannot downsample {h}x{w} by non-divisor factor {factor}")
        return np.ascontiguousarray(x[:, :, ::factor, ::factor])
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
