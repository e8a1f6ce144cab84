"""Toy-scale RepViT backbone with structural reparameterization.

Train form: every token mixer is a set of parallel depthwise branches
(3x3 conv+BN, 1x1 conv+BN and, for stride 1, an identity BN).  Deploy form:
each branch set is folded into a single 3x3 depthwise convolution.  All other
parameters (stem, SE, FFN, downsample projections) are copied unchanged.

Forward passes take an ``ops`` object providing ``conv`` and ``post``; the
default is dense.  ``spark.SparseOps`` plugs masked convolution into the same
code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .tensor_core import (
    BNParams,
    ConvParams,
    Tensor,
    activation,
    as_tensor,
    batchnorm_apply,
    conv2d,
    global_avg_pool,
    resize_nearest,
)

FORMS = ("train", "deploy")


class DenseOps:
    """Plain dense execution; ``post`` is the identity."""

    def conv(self, x: Tensor, p: ConvParams) -> Tensor:
        return conv2d(x, p)

    def post(self, x: Tensor) -> Tensor:
        return x


DENSE = DenseOps()


@dataclass(frozen=True)
class ConvBN:
    conv: ConvParams
    bn: BNParams

    def __post_init__(self):
        if self.conv.out_channels != self.bn.channels:
            raise ValueError(f"conv out_ch={self.conv.out_channels} does not match BN channels={self.bn.channels}")

    def num_params(self) -> int:
        return self.conv.num_params() + self.bn.num_params()


@dataclass(frozen=True)
class RepBranchSet:
    dw3x3: ConvBN
    dw1x1: ConvBN
    identity_bn: BNParams | None = None

    def __post_init__(self):
        c3, c1 = self.dw3x3.conv, self.dw1x1.conv
        if not (c3.is_depthwise and c1.is_depthwise):
            raise ValueError("rep branches must be depthwise convolutions")
        if c3.kernel_size != (3, 3) or c3.padding != 1:
            raise ValueError("dw3x3 branch must be a 3x3 kernel with padding 1")
        if c1.kernel_size != (1, 1) or c1.padding != 0:
            raise ValueError("dw1x1 branch must be a 1x1 kernel with padding 0")
        if c3.stride != c1.stride:
            raise ValueError(f"inconsistent strides across branches: {c3.stride} vs {c1.stride}")
        if c3.out_channels != c1.out_channels:
            raise ValueError(f"inconsistent channels across branches: {c3.out_channels} vs {c1.out_channels}")
        if (self.identity_bn is not None) != (c3.stride == 1):
            raise ValueError("identity branch must be present exactly when stride == 1")
        if self.identity_bn is not None and self.identity_bn.channels != c3.out_channels:
            raise ValueError("identity BN channel count does not match the conv branches")

    @property
    def stride(self) -> int:
        return self.dw3x3.conv.stride

    @property
    def channels(self) -> int:
        return self.dw3x3.conv.out_channels

    def num_params(self) -> int:
        n = self.dw3x3.num_params() + self.dw1x1.num_params()
        return n + (self.identity_bn.num_params() if self.identity_bn is not None else 0)


TokenMixer = Union[RepBranchSet, ConvParams]


@dataclass(frozen=True)
class SEParams:
    reduce: ConvParams
    expand: ConvParams
    reduction_ratio: int = 4

    def __post_init__(self):
        c = self.reduce.in_channels
        if c % self.reduction_ratio:
            raise ValueError(f"SE channels {c} not divisible by reduction ratio {self.reduction_ratio}")
        if self.reduce.out_channels != c // self.reduction_ratio or self.expand.in_channels != self.reduce.out_channels:
            raise ValueError("SE reduce/expand channel counts are inconsistent")
        if self.expand.out_channels != c:
            raise ValueError("SE expand must restore the input channel count")

    def num_params(self) -> int:
        return self.reduce.num_params() + self.expand.num_params()


@dataclass(frozen=True)
class RepViTBlock:
    token: TokenMixer
    se: SEParams | None
    ffn_expand: ConvBN
    ffn_project: ConvBN

    @property
    def form(self) -> str:
        return "train" if isinstance(self.token, RepBranchSet) else "deploy"

    def num_params(self) -> int:
        n = self.token.num_params() + self.ffn_expand.num_params() + self.ffn_project.num_params()
        return n + (self.se.num_params() if self.se is not None else 0)


@dataclass(frozen=True)
class Downsample:
    token: TokenMixer  # stride-2 depthwise
    proj: ConvBN  # 1x1 pointwise, c_in -> c_out

    @property
    def form(self) -> str:
        return "train" if isinstance(self.token, RepBranchSet) else "deploy"

    def num_params(self) -> int:
        return self.token.num_params() + self.proj.num_params()


@dataclass(frozen=True)
class Stem:
    conv1: ConvBN  # 3x3 stride 2, then GELU
    conv2: ConvBN  # 3x3 stride 2

    def num_params(self) -> int:
        return self.conv1.num_params() + self.conv2.num_params()


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (2, 2, 4, 2)
    ffn_expansion: int = 2
    input_channels: int = 3
    se_ratio: int = 4
    se_phase: int = 0  # blocks with index % 2 == se_phase carry SE

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("backbone needs exactly four stages")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage channels must be non-decreasing, got {self.stage_channels}")
        if min(self.stage_depths) < 1:
            raise ValueError("stage depths must be >= 1")
        if any(c % self.se_ratio for c in self.stage_channels):
            raise ValueError(f"stage channels must be divisible by se_ratio={self.se_ratio}")
        if self.se_phase not in (0, 1):
            raise ValueError("se_phase must be 0 or 1")

    @property
    def stem_channels(self) -> int:
        return max(self.stage_channels[0] // 2, 1)

    def has_se(self, block_index: int) -> bool:
        return block_index % 2 == self.se_phase


@dataclass(frozen=True)
class BackboneWeights:
    config: BackboneConfig
    stem: Stem
    downsamples: tuple[Downsample, ...]  # between stages 1-2, 2-3, 3-4
    stages: tuple[tuple[RepViTBlock, ...], ...]

    @property
    def form(self) -> str:
        forms = {b.form for stage in self.stages for b in stage} | {d.form for d in self.downsamples}
        if len(forms) != 1:
            raise ValueError(f"mixed train/deploy container: {sorted(forms)}")
        return forms.pop()

    def num_params(self) -> int:
        return (
            self.stem.num_params()
            + sum(d.num_params() for d in self.downsamples)
            + sum(b.num_params() for stage in self.stages for b in stage)
        )


@dataclass
class FeaturePyramid:
    levels: list[Tensor] = field(default_factory=list)
    strides: tuple[int, ...] = (4, 8, 16, 32)


# -- reparameterization ------------------------------------------------------


def fuse_conv_bn(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Fold inference BN into the preceding convolution."""
    if conv.out_channels != bn.channels:
        raise ValueError(f"channel mismatch: conv out_ch={conv.out_channels}, BN channels={bn.channels}")
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    weight = conv.weight * scale[:, None, None, None]
    bias = bn.beta + (conv.bias - bn.running_mean) * scale
    return ConvParams(weight, bias, conv.stride, conv.padding, conv.groups)


def fuse_rep_branches(branches: RepBranchSet) -> ConvParams:
    """Collapse the parallel depthwise branches into one 3x3 depthwise conv."""
    c = branches.channels
    k3 = fuse_conv_bn(branches.dw3x3.conv, branches.dw3x3.bn)
    k1 = fuse_conv_bn(branches.dw1x1.conv, branches.dw1x1.bn)
    weight = k3.weight.copy()
    weight[:, :, 1, 1] += k1.weight[:, :, 0, 0]
    bias = k3.bias + k1.bias
    if branches.identity_bn is not None:
        ident = np.zeros_like(weight)
        ident[:, :, 1, 1] = 1.0
        kid = fuse_conv_bn(ConvParams(ident, np.zeros(c, dtype=weight.dtype), 1, 1, c), branches.identity_bn)
        weight = weight + kid.weight
        bias = bias + kid.bias
    return ConvParams(weight, bias, branches.stride, 1, c)


def _reparam_token(token: TokenMixer) -> ConvParams:
    if not isinstance(token, RepBranchSet):
        raise ValueError("container is already in deploy form; refusing to fuse twice")
    return fuse_rep_branches(token)


def reparam_block(block: RepViTBlock) -> RepViTBlock:
    return RepViTBlock(_reparam_token(block.token), block.se, block.ffn_expand, block.ffn_project)


def reparam_backbone(weights: BackboneWeights) -> BackboneWeights:
    if weights.form != "train":
        raise ValueError("container is already in deploy form; refusing to fuse twice")
    return BackboneWeights(
        weights.config,
        weights.stem,
        tuple(Downsample(_reparam_token(d.token), d.proj) for d in weights.downsamples),
        tuple(tuple(reparam_block(b) for b in stage) for stage in weights.stages),
    )


# -- forward -----------------------------------------------------------------


def conv_bn_forward(x: Tensor, cb: ConvBN, ops=DENSE) -> Tensor:
    return ops.post(batchnorm_apply(ops.conv(x, cb.conv), cb.bn))


def rep_branches_forward(x: Tensor, branches: RepBranchSet, ops=DENSE) -> Tensor:
    """Multi-branch sum (the train-form token mixer)."""
    y = batchnorm_apply(ops.conv(x, branches.dw3x3.conv), branches.dw3x3.bn)
    y = y + batchnorm_apply(ops.conv(x, branches.dw1x1.conv), branches.dw1x1.bn)
    if branches.identity_bn is not None:
        y = y + batchnorm_apply(x, branches.identity_bn)
    return ops.post(y)


def token_forward(x: Tensor, token: TokenMixer, ops=DENSE) -> Tensor:
    if isinstance(token, RepBranchSet):
        return rep_branches_forward(x, token, ops)
    return ops.post(ops.conv(x, token))


def se_gate(x: Tensor, se: SEParams) -> np.ndarray:
    """Per-(sample, channel) scale factors in (0, 1), shape (n, c, 1, 1)."""
    s = global_avg_pool(x)
    s = activation(conv2d(s, se.reduce), "relu")
    return activation(conv2d(s, se.expand), "sigmoid")


def se_forward(x: Tensor, se: SEParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] != se.reduce.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, SE expects {se.reduce.in_channels}")
    return x * se_gate(x, se)


def _check_mode(form: str, mode: str | None) -> None:
    if mode is None:
        return
    mode = {"train_form": "train", "deploy_form": "deploy"}.get(mode, mode)
    if mode not in FORMS:
        raise ValueError(f"unknown mode {mode!r}; expected 'train' or 'deploy'")
    if mode == "deploy" and form != "deploy":
        raise ValueError("deploy mode requested but fused weights are missing; run reparam first")
    if mode == "train" and form != "train":
        raise ValueError("train mode requested but the weights are already fused")


def repvit_block_forward(x: Tensor, block: RepViTBlock, mode: str | None = None, ops=DENSE) -> Tensor:
    """Token mixer (+ optional SE) followed by the residual FFN channel mixer.

    The stride-1 residual of the token mixer is the identity branch of the
    rep set (folded into the 3x3 kernel in deploy form).
    """
    _check_mode(block.form, mode)
    y = token_forward(x, block.token, ops)
    if block.se is not None:
        y = ops.post(se_forward(y, block.se))
    h = activation(conv_bn_forward(y, block.ffn_expand, ops), "gelu")
    h = conv_bn_forward(h, block.ffn_project, ops)
    return y + h


def downsample_forward(x: Tensor, ds: Downsample, ops=DENSE) -> Tensor:
    return conv_bn_forward(token_forward(x, ds.token, ops), ds.proj, ops)


def stem_forward(x: Tensor, stem: Stem, ops=DENSE) -> Tensor:
    x = activation(conv_bn_forward(x, stem.conv1, ops), "gelu")
    return conv_bn_forward(x, stem.conv2, ops)


def backbone_forward(x: Tensor, weights: BackboneWeights, mode: str | None = None, ops=DENSE) -> FeaturePyramid:
    x = as_tensor(x)
    cfg = weights.config
    _check_mode(weights.form, mode)
    if x.shape[1] != cfg.input_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, backbone expects {cfg.input_channels}")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ValueError(f"input spatial size {x.shape[2]}x{x.shape[3]} is not divisible by 32")
    x = ops.post(x)
    x = stem_forward(x, weights.stem, ops)
    levels = []
    for i, stage in enumerate(weights.stages):
        if i > 0:
            x = downsample_forward(x, weights.downsamples[i - 1], ops)
        for block in stage:
            x = repvit_block_forward(x, block, ops=ops)
        levels.append(x)
    return FeaturePyramid(levels)


# -- fusion primitives -------------------------------------------------------


def cb_linear(feature: Tensor, proj: ConvParams, split_sizes: Sequence[int]) -> list[Tensor]:
    """1x1 projection followed by a channel-wise split."""
    if proj.kernel_size != (1, 1):
        raise ValueError(f"cb_linear projection must be 1x1, got {proj.kernel_size}")
    if sum(split_sizes) != proj.out_channels:
        raise ValueError(f"split sizes {list(split_sizes)} sum to {sum(split_sizes)}, projection has {proj.out_channels} channels")
    y = conv2d(feature, proj)
    bounds = np.cumsum(split_sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(y, bounds, axis=1)]


def cb_fuse(features: Sequence[Tensor], target_index: int) -> Tensor:
    """Resize every feature (nearest) to ``features[target_index]`` and sum."""
    if not features:
        raise ValueError("cb_fuse needs at least one feature")
    feats = [as_tensor(f) for f in features]
    target = feats[target_index]
    th, tw = target.shape[2:]
    out = np.zeros_like(target)
    for i, f in enumerate(feats):
        if f.shape[:2] != target.shape[:2]:
            raise ValueError(f"channel mismatch: feature {i} has shape {f.shape[:2]}, target {target.shape[:2]}")
        h, w = f.shape[2:]
        if (h, w) == (th, tw):
            r = f
        elif h > th:
            if h % th or w % tw or h // th != w // tw:
                raise ValueError(f"feature {i} size {h}x{w} is not an integral multiple of target {th}x{tw}")
            r = resize_nearest(f, h // th, downsample=True)
        else:
            if th % h or tw % w or th // h != tw // w:
                raise ValueError(f"target size {th}x{tw} is not an integral multiple of feature {i} size {h}x{w}")
            r = resize_nearest(f, th // h)
        out = out + r
    return out


# -- initialisation & counting -----------------------------------------------


def _uniform_conv(rng, out_ch, in_per_group, k, stride, padding, groups, dtype) -> ConvParams:
    fan_in = in_per_group * k * k
    scale = 1.0 / np.sqrt(fan_in)
    w = (rng.uniform(-0.5, 0.5, size=(out_ch, in_per_group, k, k)) * scale).astype(dtype)
    b = (rng.uniform(-0.5, 0.5, size=out_ch) * scale).astype(dtype)
    return ConvParams(w, b, stride, padding, groups)


def _random_bn(rng, c, dtype) -> BNParams:
    return BNParams(
        rng.uniform(0.5, 1.5, c).astype(dtype),
        rng.uniform(-0.1, 0.1, c).astype(dtype),
        rng.uniform(-0.1, 0.1, c).astype(dtype),
        rng.uniform(0.5, 1.5, c).astype(dtype),
        1e-5,
    )


def random_rep_branches(rng, channels: int, stride: int = 1, dtype=np.float64) -> RepBranchSet:
    return RepBranchSet(
        ConvBN(_uniform_conv(rng, channels, 1, 3, stride, 1, channels, dtype), _random_bn(rng, channels, dtype)),
        ConvBN(_uniform_conv(rng, channels, 1, 1, stride, 0, channels, dtype), _random_bn(rng, channels, dtype)),
        _random_bn(rng, channels, dtype) if stride == 1 else None,
    )


def random_conv_bn(rng, c_in, c_out, k=1, stride=1, dtype=np.float64) -> ConvBN:
    return ConvBN(_uniform_conv(rng, c_out, c_in, k, stride, k // 2, 1, dtype), _random_bn(rng, c_out, dtype))


def random_se(rng, c, ratio=4, dtype=np.float64) -> SEParams:
    return SEParams(
        _uniform_conv(rng, c // ratio, c, 1, 1, 0, 1, dtype),
        _uniform_conv(rng, c, c // ratio, 1, 1, 0, 1, dtype),
        ratio,
    )


def random_block(rng, channels: int, *, se: bool = True, expansion: int = 2, ratio: int = 4,
                 dtype=np.float64) -> RepViTBlock:
    return RepViTBlock(
        random_rep_branches(rng, channels, 1, dtype),
        random_se(rng, channels, ratio, dtype) if se else None,
        random_conv_bn(rng, channels, channels * expansion, dtype=dtype),
        random_conv_bn(rng, channels * expansion, channels, dtype=dtype),
    )


def init_backbone(cfg: BackboneConfig | None = None, seed: int = 0, dtype=np.float64) -> BackboneWeights:
    """Seeded train-form weights: uniform in [-0.5, 0.5] / sqrt(fan_in), randomised BN."""
    cfg = cfg or BackboneConfig()
    rng = np.random.default_rng(seed)
    cs = cfg.stage_channels
    stem = Stem(
        random_conv_bn(rng, cfg.input_channels, cfg.stem_channels, k=3, stride=2, dtype=dtype),
        random_conv_bn(rng, cfg.stem_channels, cs[0], k=3, stride=2, dtype=dtype),
    )
    downsamples = tuple(
        Downsample(random_rep_branches(rng, cs[i], 2, dtype), random_conv_bn(rng, cs[i], cs[i + 1], dtype=dtype))
        for i in range(3)
    )
    stages = tuple(
        tuple(
            random_block(rng, cs[s], se=cfg.has_se(b), expansion=cfg.ffn_expansion, ratio=cfg.se_ratio, dtype=dtype)
            for b in range(cfg.stage_depths[s])
        )
        for s in range(4)
    )
    return BackboneWeights(cfg, stem, downsamples, stages)


def backbone_astype(weights: BackboneWeights, dtype) -> BackboneWeights:
    from . import io_formats

    return io_formats.backbone_from_tensors(io_formats.backbone_to_tensors(weights, dtype=dtype))
