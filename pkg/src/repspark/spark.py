"""Sparse masked image modelling on the toy RepViT encoder.

A ``MaskGrid`` marks each square patch as kept (True) or masked.  Sparse
convolution is defined as: zero-fill masked inputs, dense convolution, zero
the masked outputs.  The compiled kernel skips masked work but returns the
same values.  Masks follow the feature maps down the encoder by OR-pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import _backend, io_formats, repvit
from .tensor_core import ConvParams, Tensor, activation, as_tensor, conv2d, resize_nearest

DEFAULT_MASK_RATIO = 0.6
DEFAULT_PATCH_SIZE = 32
PARAM_BUDGET = 2048
DECODER_LEVELS = 2


@dataclass(frozen=True)
class MaskGrid:
    patch_size: int
    grid: np.ndarray  # (h_patches, w_patches) bool, True = kept
    mask_ratio: float = DEFAULT_MASK_RATIO
    seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        if g.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {g.shape}")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def kept_fraction(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 1.0

    @property
    def masked_count(self) -> int:
        return int((~self.grid).sum())

    @classmethod
    def all_kept(cls, h, w, patch_size) -> MaskGrid:
        return cls(patch_size, np.ones((h // patch_size, w // patch_size), dtype=bool), 0.0)

    def to_bitmap(self) -> str:
        """One text row per patch row: '#' masked, '.' kept."""
        return "\n".join("".join("." if k else "#" for k in row) for row in self.grid)

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "mask_ratio": self.mask_ratio,
            "seed": self.seed,
            "grid": [[bool(k) for k in row] for row in self.grid],
            "masked_fraction": 1.0 - self.kept_fraction,
        }


@dataclass(frozen=True)
class MaskEmbedding:
    values: np.ndarray  # (c,)


def generate_mask(h: int, w: int, patch_size: int = DEFAULT_PATCH_SIZE,
                  mask_ratio: float = DEFAULT_MASK_RATIO, seed: int = 0) -> MaskGrid:
    """Mask every patch independently with probability ``mask_ratio``."""
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    rng = np.random.default_rng(seed)
    masked = rng.random((h // patch_size, w // patch_size)) < mask_ratio
    return MaskGrid(patch_size, ~masked, mask_ratio, seed)


def _or_pool(grid: np.ndarray, factor: int) -> np.ndarray:
    gh, gw = grid.shape
    if gh % factor or gw % factor:
        raise ValueError(f"mask grid {gh}x{gw} is not divisible by factor {factor}")
    return grid.reshape(gh // factor, factor, gw // factor, factor).any(axis=(1, 3))


def mask_downsample(mask: MaskGrid, factor: int) -> MaskGrid:
    """A coarse cell is kept iff any of the cells it covers is kept."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return replace(mask, grid=_or_pool(mask.grid, factor), patch_size=mask.patch_size * factor)


def keep_map(mask: MaskGrid, h: int, w: int) -> np.ndarray:
    """Pixel-level keep map of the mask at feature resolution h x w."""
    gh, gw = mask.shape
    if h % gh == 0 and w % gw == 0 and h // gh == w // gw:
        f = h // gh
        return np.repeat(np.repeat(mask.grid, f, axis=0), f, axis=1)
    if gh % h == 0 and gw % w == 0 and gh // h == gw // w:
        return _or_pool(mask.grid, gh // h)
    raise ValueError(f"mask grid {gh}x{gw} does not align with feature size {h}x{w}")


def sparse_conv2d_reference(x: Tensor, p: ConvParams, mask: MaskGrid) -> Tensor:
    """Zero-fill masked inputs, dense conv, zero masked outputs."""
    x = as_tensor(x)
    keep_in = keep_map(mask, *x.shape[2:])
    y = conv2d(np.where(keep_in, x, x.dtype.type(0)), p)
    keep_out = keep_map(mask, *y.shape[2:])
    return np.where(keep_out, y, y.dtype.type(0))


def sparse_conv2d(x: Tensor, p: ConvParams, mask: MaskGrid, backend: str | None = None) -> Tensor:
    x = as_tensor(x)
    if p.stride not in (1, 2):
        raise ValueError(f"sparse conv supports stride 1 or 2, got {p.stride}")
    if x.shape[1] != p.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, conv expects {p.in_channels}")
    keep_in = keep_map(mask, *x.shape[2:])
    kh, kw = p.kernel_size
    oh = (x.shape[2] + 2 * p.padding - kh) // p.stride + 1
    ow = (x.shape[3] + 2 * p.padding - kw) // p.stride + 1
    keep_out = keep_map(mask, oh, ow)
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    kp = np.pad(keep_in, pad) if pad else keep_in
    k = _backend.get_kernels(backend)
    return k.sparse_conv2d_valid(
        np.ascontiguousarray(xp),
        np.ascontiguousarray(p.weight, dtype=x.dtype),
        np.ascontiguousarray(p.bias, dtype=x.dtype),
        np.ascontiguousarray(kp, dtype=np.uint8),
        np.ascontiguousarray(keep_out, dtype=np.uint8),
        p.stride,
        p.groups,
    )


class SparseOps:
    """Runs the backbone with sparse convolutions; re-masks after every op."""

    def __init__(self, mask: MaskGrid, backend: str | None = None):
        self.mask = mask
        self.backend = backend

    def conv(self, x: Tensor, p: ConvParams) -> Tensor:
        return sparse_conv2d(x, p, self.mask, self.backend)

    def post(self, x: Tensor) -> Tensor:
        keep = keep_map(self.mask, *x.shape[2:])
        return np.where(keep, x, x.dtype.type(0))


def densify(features: Tensor, mask: MaskGrid, emb: MaskEmbedding | np.ndarray) -> Tensor:
    """Fill masked positions with the per-channel mask embedding."""
    features = as_tensor(features)
    values = np.asarray(getattr(emb, "values", emb))
    if values.shape != (features.shape[1],):
        raise ValueError(f"embedding length {values.shape} does not match {features.shape[1]} channels")
    keep = keep_map(mask, *features.shape[2:])
    return np.where(keep, features, values.astype(features.dtype)[None, :, None, None])


def masked_recon_loss(pred: Tensor, target: Tensor, mask: MaskGrid, per_patch_norm: bool = True,
                      eps: float = 1e-6) -> float:
    """MSE over masked positions only (0 when nothing is masked).

    With ``per_patch_norm`` each target patch is standardised over its pixels
    and channels first.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    n, c, h, w = target.shape
    gh, gw = mask.shape
    if h % gh or w % gw:
        raise ValueError(f"mask grid {gh}x{gw} does not tile target {h}x{w}")
    masked = ~mask.grid
    if not masked.any():
        return 0.0
    ph, pw = h // gh, w // gw
    if per_patch_norm:
        t = target.reshape(n, c, gh, ph, gw, pw)
        mean = t.mean(axis=(1, 3, 5), keepdims=True)
        var = t.var(axis=(1, 3, 5), keepdims=True)
        target = ((t - mean) / np.sqrt(var + eps)).reshape(n, c, h, w)
    err = (pred - target) ** 2
    sel = np.repeat(np.repeat(masked, ph, axis=0), pw, axis=1)
    return float(err[:, :, sel].mean())


# -- encoder / decoder -------------------------------------------------------


@dataclass(frozen=True)
class DecoderWeights:
    """Two levels of (up x2, 3x3 conv, GELU, + skip) from the deepest map, then up x8 and a 3x3 head."""

    stages: tuple[ConvParams, ...]  # c3 -> c2, c2 -> c1 (0-based stage channels)
    head: ConvParams  # c1 -> image channels


@dataclass(frozen=True)
class SparkModel:
    encoder: repvit.BackboneWeights
    decoder: DecoderWeights
    embeddings: tuple[np.ndarray, ...]  # one per pyramid level

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = dict(io_formats.backbone_to_tensors(self.encoder).tensors)
        for i, conv in enumerate(self.decoder.stages):
            out[f"decoder.stages.{i}.weight"] = conv.weight
            out[f"decoder.stages.{i}.bias"] = conv.bias
        out["decoder.head.weight"] = self.decoder.head.weight
        out["decoder.head.bias"] = self.decoder.head.bias
        for i, e in enumerate(self.embeddings):
            out[f"mask_embedding.{i}"] = e
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> SparkModel:
        enc = {k: v for k, v in tensors.items() if not k.startswith(("decoder.", "mask_embedding."))}
        encoder = io_formats.backbone_from_tensors(io_formats.WeightContainer("train", enc))
        stages = tuple(
            ConvParams(tensors[f"decoder.stages.{i}.weight"], tensors[f"decoder.stages.{i}.bias"], 1, 1)
            for i in range(DECODER_LEVELS)
        )
        head = ConvParams(tensors["decoder.head.weight"], tensors["decoder.head.bias"], 1, 1)
        embeddings = tuple(tensors[f"mask_embedding.{i}"] for i in range(4))
        return cls(encoder, DecoderWeights(stages, head), embeddings)

    def num_params(self) -> int:
        return sum(v.size for v in self.to_tensors().values())


def init_decoder(cfg: repvit.BackboneConfig, seed: int = 0, dtype=np.float64) -> DecoderWeights:
    rng = np.random.default_rng(seed)
    cs = cfg.stage_channels

    def conv(cin, cout):
        s = 1.0 / np.sqrt(cin * 9)
        return ConvParams(
            (rng.uniform(-0.5, 0.5, (cout, cin, 3, 3)) * s).astype(dtype),
            (rng.uniform(-0.5, 0.5, cout) * s).astype(dtype), 1, 1,
        )

    return DecoderWeights((conv(cs[3], cs[2]), conv(cs[2], cs[1])), conv(cs[1], cfg.input_channels))


def init_spark_model(cfg: repvit.BackboneConfig, seed: int = 0, dtype=np.float64) -> SparkModel:
    encoder = repvit.init_backbone(cfg, seed, dtype)
    decoder = init_decoder(cfg, seed + 1, dtype)
    embeddings = tuple(np.zeros(c, dtype=dtype) for c in cfg.stage_channels)
    return SparkModel(encoder, decoder, embeddings)


def spark_encode(image: Tensor, mask: MaskGrid, encoder: repvit.BackboneWeights,
                 backend: str | None = None) -> repvit.FeaturePyramid:
    return repvit.backbone_forward(image, encoder, ops=SparseOps(mask, backend))


def decode(levels: Sequence[Tensor], decoder: DecoderWeights) -> Tensor:
    x = levels[3]
    for conv, skip in zip(decoder.stages, (levels[2], levels[1])):
        x = activation(conv2d(resize_nearest(x, 2), conv), "gelu") + skip
    return conv2d(resize_nearest(x, 8), decoder.head)


def spark_encode_decode(image: Tensor, mask: MaskGrid, model: SparkModel, backend: str | None = None) -> Tensor:
    """Sparse encode, densify each level with its mask embedding, decode to input size."""
    pyramid = spark_encode(image, mask, model.encoder, backend)
    dense = [densify(f, mask, e) for f, e in zip(pyramid.levels, model.embeddings)]
    return decode(dense, model.decoder)


# -- toy pretraining ---------------------------------------------------------

MICRO_CONFIG = repvit.BackboneConfig(
    stage_channels=(4, 4, 4, 8), stage_depths=(1, 1, 1, 1), ffn_expansion=2, input_channels=1,
)

# BN statistics and eps are buffers, not optimised
_BUFFER_SUFFIXES = (".running_mean", ".running_var", ".eps")


def synthetic_images(n: int = 4, size: int = 32, channels: int = 1, seed: int = 0) -> list[Tensor]:
    """Smooth blob images in [0, 1] with a bright compact 'lesion' each."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    images = []
    for _ in range(n):
        cy, cx = rng.uniform(0.3, 0.7, 2)
        body = np.exp(-(((yy - 0.5) / 0.35) ** 2 + ((xx - 0.5) / 0.3) ** 2))
        lesion = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(0.05, 0.12) ** 2)))
        img = 0.6 * body + 0.4 * lesion + 0.05 * np.sin(8 * np.pi * xx * rng.uniform(0.5, 1.5))
        img = (img - img.min()) / (img.max() - img.min())
        images.append(np.repeat(img[None, None], channels, axis=1))
    return images


class PretrainResult(NamedTuple):
    trace: list[float]
    model: SparkModel


def pretrain_toy(images: Sequence[Tensor], steps: int, seed: int = 0, *,
                 config: repvit.BackboneConfig = MICRO_CONFIG, patch_size: int = 8,
                 mask_ratio: float = DEFAULT_MASK_RATIO, per_patch_norm: bool = False,
                 lr: float = 0.05, lr_decay: float = 0.999, perturbation: float = 0.01,
                 budget: int = PARAM_BUDGET) -> PretrainResult:
    """Gradient-free SPSA pretraining of a micro encoder/decoder.

    Each step draws a Rademacher direction, evaluates the masked
    reconstruction loss at theta +/- c * delta and records their mean, which
    is the trace entry for that step.  Targets are raw pixels by default;
    with fixed step sizes, per-patch standardised targets can blow up.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    images = [as_tensor(im, np.float64) for im in images]
    if not images:
        raise ValueError("at least one image is required")
    model = init_spark_model(config, seed)
    tensors = model.to_tensors()
    names = [k for k in tensors if not k.endswith(_BUFFER_SUFFIXES)]
    n_params = sum(tensors[k].size for k in names)
    if n_params > budget:
        raise ValueError(f"toy pretraining is limited to {budget} trainable parameters, model has {n_params}")
    masks = [generate_mask(im.shape[2], im.shape[3], patch_size, mask_ratio, seed + 1000 + i)
             for i, im in enumerate(images)]

    shapes = [(k, tensors[k].shape, tensors[k].size) for k in names]
    theta = np.concatenate([tensors[k].ravel() for k in names])

    def unpack(vec):
        out = dict(tensors)
        pos = 0
        for k, shape, size in shapes:
            out[k] = vec[pos:pos + size].reshape(shape)
            pos += size
        return SparkModel.from_tensors(out)

    def loss(vec):
        m = unpack(vec)
        return float(np.mean([
            masked_recon_loss(spark_encode_decode(im, mk, m), im, mk, per_patch_norm)
            for im, mk in zip(images, masks)
        ]))

    rng = np.random.default_rng(seed)
    trace = []
    for t in range(steps):
        a_t = lr * lr_decay**t
        delta = rng.choice((-1.0, 1.0), size=theta.size)
        l_plus = loss(theta + perturbation * delta)
        l_minus = loss(theta - perturbation * delta)
        ghat = (l_plus - l_minus) / (2 * perturbation) * delta
        theta = theta - a_t * ghat
        trace.append(0.5 * (l_plus + l_minus))
    return PretrainResult(trace, unpack(theta))


def spark_pretrain_toy(images: Sequence[Tensor], steps: int, seed: int = 0, **kwargs) -> list[float]:
    return pretrain_toy(images, steps, seed, **kwargs).trace
