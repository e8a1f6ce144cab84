"""File formats: JSON weight container, COCO-like box files, key = value run config.

Every loader failure raises a ``FormatError`` (a ``ValueError``) carrying the
source name and a position: line/column for syntax errors, a JSON path such
as ``tensors[2].data`` for schema errors.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import repvit
from .det_eval import Detection, EvalResult, GroundTruth
from .loss_zoo import Box, LossConfig, WiouState, parse_variant
from .tensor_core import BNParams, ConvParams

MAGIC = "PKW1"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.float32, "f64": np.float64}
# names that only exist in train-form containers
_TRAIN_ONLY = re.compile(r"\.(dw1x1|identity_bn)\.")


class FormatError(ValueError):
    def __init__(self, message: str, *, source: str | None = None, location: str | None = None,
                 line: int | None = None, column: int | None = None):
        self.message = message
        self.source = source or "<input>"
        self.location = location
        self.line = line
        self.column = column
        super().__init__(str(self))

    def __str__(self) -> str:
        pos = self.source
        if self.line is not None:
            pos += f":{self.line}" + (f":{self.column}" if self.column is not None else "")
        if self.location:
            pos += f" at {self.location}"
        return f"{pos}: {self.message}"


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class SchemaError(FormatError):
    pass


def _parse_json(data: bytes | str, source: str) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"not valid UTF-8 (byte offset {e.start})", source=source) from None
    try:
        return json.loads(data)
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed JSON: {e.msg}", source=source, line=e.lineno, column=e.colno) from None


def _read(path, source=None) -> tuple[bytes, str]:
    source = source or str(path)
    try:
        return Path(path).read_bytes(), source
    except OSError as e:
        raise FileNotFoundError(f"{source}: {e.strerror}") from e


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# -- weight container --------------------------------------------------------


@dataclass
class WeightContainer:
    form: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)  # insertion order is file order
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.form not in repvit.FORMS:
            raise ValueError(f"form must be 'train' or 'deploy', got {self.form!r}")
        for name, arr in self.tensors.items():
            if np.asarray(arr).dtype not in (np.float32, np.float64):
                raise ValueError(f"tensor {name!r} has unsupported dtype {np.asarray(arr).dtype}")
        if self.form == "deploy":
            bad = [n for n in self.tensors if _TRAIN_ONLY.search(n)]
            if bad:
                raise ValueError(f"deploy container holds train-only tensors: {bad[:3]}")

    def num_params(self) -> int:
        return sum(int(np.asarray(a).size) for a in self.tensors.values())


def _dtype_name(arr: np.ndarray) -> str:
    return "f32" if arr.dtype == np.float32 else "f64"


def save_weights(container: WeightContainer) -> bytes:
    tensors = []
    for name, arr in container.tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} holds non-finite values")
        # float32 values are exact in float64, so repr round-trips them
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _dtype_name(arr),
            "data": arr.astype(np.float64).ravel().tolist(),
        })
    doc = {"magic": MAGIC, "format_version": container.format_version, "form": container.form, "tensors": tensors}
    return (json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def load_weights(data: bytes | str, source: str = "<weights>") -> WeightContainer:
    doc = _parse_json(data, source)
    if not isinstance(doc, dict):
        raise SchemaError("top level must be a JSON object", source=source)
    if doc.get("magic") != MAGIC:
        raise BadMagicError(f"bad magic {doc.get('magic')!r}, expected {MAGIC!r}", source=source, location="magic")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}",
            source=source, location="format_version",
        )
    form = doc.get("form")
    if form not in repvit.FORMS:
        raise SchemaError(f"form must be 'train' or 'deploy', got {form!r}", source=source, location="form")
    entries = doc.get("tensors")
    if not isinstance(entries, list):
        raise SchemaError("'tensors' must be a list", source=source, location="tensors")
    tensors: dict[str, np.ndarray] = {}
    for i, t in enumerate(entries):
        loc = f"tensors[{i}]"
        if not isinstance(t, dict):
            raise SchemaError("tensor entry must be an object", source=source, location=loc)
        name = t.get("name")
        if not isinstance(name, str) or not name:
            raise SchemaError("tensor name must be a non-empty string", source=source, location=f"{loc}.name")
        if name in tensors:
            raise SchemaError(f"duplicate tensor name {name!r}", source=source, location=f"{loc}.name")
        shape = t.get("shape")
        if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
            raise SchemaError("shape must be a list of non-negative integers", source=source, location=f"{loc}.shape")
        dtype = t.get("dtype")
        if dtype not in _DTYPES:
            raise SchemaError(f"dtype must be 'f32' or 'f64', got {dtype!r}", source=source, location=f"{loc}.dtype")
        values = t.get("data")
        if not isinstance(values, list) or not all(_is_number(v) for v in values):
            raise SchemaError("data must be a flat list of numbers", source=source, location=f"{loc}.data")
        expected = math.prod(shape)
        if len(values) != expected:
            raise ShapeMismatchError(
                f"tensor {name!r}: data length {len(values)} != product of shape {shape} = {expected}",
                source=source, location=f"{loc}.data",
            )
        arr = np.array(values, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"tensor {name!r} holds non-finite values", source=source, location=f"{loc}.data")
        tensors[name] = arr.astype(_DTYPES[dtype])
    if form == "deploy":
        bad = [n for n in tensors if _TRAIN_ONLY.search(n)]
        if bad:
            raise SchemaError(f"deploy container holds train-only tensor {bad[0]!r}", source=source, location="tensors")
    return WeightContainer(form, tensors)


def write_weights(path, container: WeightContainer) -> None:
    Path(path).write_bytes(save_weights(container))


def read_weights(path) -> WeightContainer:
    data, source = _read(path)
    return load_weights(data, source)


# -- backbone <-> flat tensors ----------------------------------------------


def _put_conv(out, prefix, conv: ConvParams):
    out[f"{prefix}.weight"] = conv.weight
    out[f"{prefix}.bias"] = conv.bias


def _put_bn(out, prefix, bn: BNParams):
    dt = bn.gamma.dtype
    out[f"{prefix}.gamma"] = bn.gamma
    out[f"{prefix}.beta"] = bn.beta
    out[f"{prefix}.running_mean"] = bn.running_mean
    out[f"{prefix}.running_var"] = bn.running_var
    out[f"{prefix}.eps"] = np.array([bn.eps], dtype=dt)


def _put_convbn(out, prefix, cb: repvit.ConvBN):
    _put_conv(out, f"{prefix}.conv", cb.conv)
    _put_bn(out, f"{prefix}.bn", cb.bn)


def _put_token(out, prefix, token):
    if isinstance(token, repvit.RepBranchSet):
        _put_convbn(out, f"{prefix}.dw3x3", token.dw3x3)
        _put_convbn(out, f"{prefix}.dw1x1", token.dw1x1)
        if token.identity_bn is not None:
            _put_bn(out, f"{prefix}.identity_bn", token.identity_bn)
    else:
        _put_conv(out, f"{prefix}.fused", token)


def backbone_to_tensors(weights: repvit.BackboneWeights, dtype=None) -> WeightContainer:
    out: dict[str, np.ndarray] = {}
    _put_convbn(out, "stem.conv1", weights.stem.conv1)
    _put_convbn(out, "stem.conv2", weights.stem.conv2)
    for i, ds in enumerate(weights.downsamples):
        _put_token(out, f"downsamples.{i}.token", ds.token)
        _put_convbn(out, f"downsamples.{i}.proj", ds.proj)
    for s, stage in enumerate(weights.stages):
        for b, block in enumerate(stage):
            p = f"stages.{s}.blocks.{b}"
            _put_token(out, f"{p}.token", block.token)
            if block.se is not None:
                _put_conv(out, f"{p}.se.reduce", block.se.reduce)
                _put_conv(out, f"{p}.se.expand", block.se.expand)
            _put_convbn(out, f"{p}.ffn.expand", block.ffn_expand)
            _put_convbn(out, f"{p}.ffn.project", block.ffn_project)
    if dtype is not None:
        out = {k: v.astype(dtype) for k, v in out.items()}
    return WeightContainer(weights.form, out)


class _Reader:
    def __init__(self, tensors: dict[str, np.ndarray]):
        self.t = tensors
        self.used: set[str] = set()

    def has(self, name) -> bool:
        return name in self.t

    def get(self, name) -> np.ndarray:
        if name not in self.t:
            raise ValueError(f"incomplete container: missing tensor {name!r}")
        self.used.add(name)
        return self.t[name]

    def conv(self, prefix, stride=1, padding=0, groups=1) -> ConvParams:
        return ConvParams(self.get(f"{prefix}.weight"), self.get(f"{prefix}.bias"), stride, padding, groups)

    def bn(self, prefix) -> BNParams:
        return BNParams(
            self.get(f"{prefix}.gamma"), self.get(f"{prefix}.beta"),
            self.get(f"{prefix}.running_mean"), self.get(f"{prefix}.running_var"),
            float(self.get(f"{prefix}.eps")[0]),
        )

    def convbn(self, prefix, stride=1, padding=0, groups=1) -> repvit.ConvBN:
        return repvit.ConvBN(self.conv(f"{prefix}.conv", stride, padding, groups), self.bn(f"{prefix}.bn"))

    def token(self, prefix, channels, stride):
        if self.has(f"{prefix}.fused.weight"):
            return self.conv(f"{prefix}.fused", stride, 1, channels)
        return repvit.RepBranchSet(
            self.convbn(f"{prefix}.dw3x3", stride, 1, channels),
            self.convbn(f"{prefix}.dw1x1", stride, 0, channels),
            self.bn(f"{prefix}.identity_bn") if self.has(f"{prefix}.identity_bn.gamma") else None,
        )


def backbone_from_tensors(container: WeightContainer) -> repvit.BackboneWeights:
    """Rebuild the structured backbone; the architecture is inferred from names and shapes."""
    r = _Reader(container.tensors)
    names = list(container.tensors)
    depths = []
    for s in range(4):
        idx = {int(m.group(1)) for n in names if (m := re.match(rf"stages\.{s}\.blocks\.(\d+)\.", n))}
        if not idx or idx != set(range(len(idx))):
            raise ValueError(f"incomplete container: stage {s} has block indices {sorted(idx)}")
        depths.append(len(idx))
    stem_w = r.get("stem.conv1.conv.weight")
    channels = [r.get(f"stages.{s}.blocks.0.ffn.project.conv.weight").shape[0] for s in range(4)]
    expansion = r.get("stages.0.blocks.0.ffn.expand.conv.weight").shape[0] // channels[0]
    se_phase = 0 if r.has("stages.0.blocks.0.se.reduce.weight") else 1
    ratio = 4
    for n in names:
        if n.endswith(".se.reduce.weight"):
            w = container.tensors[n]
            ratio = w.shape[1] // w.shape[0]
            break
    cfg = repvit.BackboneConfig(tuple(channels), tuple(depths), expansion, stem_w.shape[1], ratio, se_phase)

    stem = repvit.Stem(r.convbn("stem.conv1", 2, 1), r.convbn("stem.conv2", 2, 1))
    downsamples = tuple(
        repvit.Downsample(r.token(f"downsamples.{i}.token", channels[i], 2), r.convbn(f"downsamples.{i}.proj"))
        for i in range(3)
    )
    stages = []
    for s in range(4):
        blocks = []
        for b in range(depths[s]):
            p = f"stages.{s}.blocks.{b}"
            se = None
            if r.has(f"{p}.se.reduce.weight"):
                se = repvit.SEParams(r.conv(f"{p}.se.reduce"), r.conv(f"{p}.se.expand"), ratio)
            blocks.append(repvit.RepViTBlock(
                r.token(f"{p}.token", channels[s], 1), se, r.convbn(f"{p}.ffn.expand"), r.convbn(f"{p}.ffn.project"),
            ))
        stages.append(tuple(blocks))
    leftover = set(names) - r.used
    if leftover:
        raise ValueError(f"unexpected tensors in container: {sorted(leftover)[:3]}")
    weights = repvit.BackboneWeights(cfg, stem, downsamples, tuple(stages))
    if weights.form != container.form:
        raise ValueError(f"container declares form {container.form!r} but holds {weights.form!r} tensors")
    return weights


# -- annotations / detections ------------------------------------------------


@dataclass
class BoxFile:
    images: list[dict]
    categories: list[dict]
    records: list  # GroundTruth or Detection


def _parse_box_file(doc, source: str, kind: str) -> BoxFile:
    key = "annotations" if kind == "annotations" else "detections"
    if not isinstance(doc, dict):
        raise SchemaError("top level must be a JSON object", source=source)
    images = doc.get("images")
    if not isinstance(images, list):
        raise SchemaError("'images' must be a list", source=source, location="images")
    image_ids = set()
    for i, im in enumerate(images):
        if not isinstance(im, dict) or "id" not in im:
            raise SchemaError("image entry needs an 'id'", source=source, location=f"images[{i}]")
        for dim in ("width", "height"):
            if dim in im and (not _is_number(im[dim]) or im[dim] <= 0):
                raise SchemaError(f"image {dim} must be a positive number", source=source, location=f"images[{i}].{dim}")
        image_ids.add(im["id"])
    categories = doc.get("categories", [])
    if not isinstance(categories, list):
        raise SchemaError("'categories' must be a list", source=source, location="categories")
    entries = doc.get(key)
    if not isinstance(entries, list):
        raise SchemaError(f"'{key}' must be a list", source=source, location=key)
    records = []
    for i, a in enumerate(entries):
        loc = f"{key}[{i}]"
        if not isinstance(a, dict):
            raise SchemaError("entry must be an object", source=source, location=loc)
        img = a.get("image_id")
        if img not in image_ids:
            raise SchemaError(f"unknown image_id {img!r}", source=source, location=f"{loc}.image_id")
        cat = a.get("category_id")
        if not isinstance(cat, int) or isinstance(cat, bool):
            raise SchemaError("category_id must be an integer", source=source, location=f"{loc}.category_id")
        bbox = a.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4 or not all(_is_number(v) and math.isfinite(v) for v in bbox):
            raise SchemaError("bbox must be [x, y, w, h] numbers", source=source, location=f"{loc}.bbox")
        x, y, w, h = (float(v) for v in bbox)
        if w < 0 or h < 0:
            raise SchemaError(f"negative bbox size w={w}, h={h}", source=source, location=f"{loc}.bbox")
        box = Box(x, y, x + w, y + h)
        if kind == "annotations":
            records.append(GroundTruth(img, cat, box, (x, y, w, h)))
        else:
            score = a.get("score")
            if not _is_number(score):
                raise SchemaError("detection needs a numeric 'score'", source=source, location=f"{loc}.score")
            if not 0.0 <= score <= 1.0:
                raise SchemaError(f"score {score} outside [0, 1]", source=source, location=f"{loc}.score")
            records.append(Detection(img, cat, box, float(score), (x, y, w, h)))
    return BoxFile(images, categories, records)


def parse_annotations(data: bytes | str, source: str = "<annotations>") -> BoxFile:
    return _parse_box_file(_parse_json(data, source), source, "annotations")


def parse_detections(data: bytes | str, source: str = "<detections>") -> BoxFile:
    return _parse_box_file(_parse_json(data, source), source, "detections")


def load_annotations(path) -> list[GroundTruth]:
    data, source = _read(path)
    return parse_annotations(data, source).records


def load_detections(path) -> list[Detection]:
    data, source = _read(path)
    return parse_detections(data, source).records


def _xywh(r) -> list[float]:
    if r.xywh is not None:
        return list(r.xywh)
    b = r.box
    return [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1]


def dump_box_file(records: Sequence, images: Iterable[dict] | None = None,
                  categories: Iterable[dict] | None = None) -> str:
    """Serialise GroundTruth or Detection records; images default to the ids referenced."""
    is_det = bool(records) and isinstance(records[0], Detection)
    if images is None:
        seen = []
        for r in records:
            if r.image_id not in seen:
                seen.append(r.image_id)
        images = [{"id": i} for i in seen]
    if categories is None:
        categories = [{"id": c, "name": str(c)} for c in sorted({r.class_id for r in records})]
    entries = []
    for r in records:
        e = {"image_id": r.image_id, "category_id": r.class_id, "bbox": _xywh(r)}
        if isinstance(r, Detection):
            e["score"] = r.score
        entries.append(e)
    doc = {"images": list(images), "categories": list(categories), ("detections" if is_det else "annotations"): entries}
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def eval_result_to_json(result: EvalResult) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_eval_result(data: bytes | str, source: str = "<eval>") -> EvalResult:
    doc = _parse_json(data, source)
    try:
        counts = doc["counts"]
        per_class = {
            _maybe_int(c): {float(t): v for t, v in aps.items()} for c, aps in doc["per_class_ap"].items()
        }
        return EvalResult(
            per_class_ap=per_class,
            per_threshold_map={float(t): v for t, v in doc["per_threshold_map"].items()},
            map50=doc["map50"], map50_95=doc["map50_95"],
            precision=doc["precision"], recall=doc["recall"],
            tp=counts["tp"], fp=counts["fp"], fn=counts["fn"],
        )
    except (KeyError, TypeError, AttributeError, ValueError) as e:
        raise SchemaError(f"not an evaluation result: {e!r}", source=source) from None


def _maybe_int(s: str):
    try:
        return int(s)
    except ValueError:
        return s


# -- run config --------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    # loss
    variant: str = "ciou"
    alpha_pow: float = 3.0
    nwd_c: float = 12.8
    siou_theta: float = 4.0
    wiou_alpha: float = 1.9
    wiou_delta: float = 3.0
    wiou_momentum: float = 0.9
    shape_scale: float = 0.0
    piou_lambda: float = 1.3
    piou_v2: bool = False
    focaler_d: float = 0.0
    focaler_u: float = 0.95
    focaler_base: str = "ciou"
    image_w: float | None = None
    image_h: float | None = None
    # masking / pretraining
    mask_ratio: float = 0.6
    patch_size: int = 32
    per_patch_norm: bool = True
    pretrain_per_patch_norm: bool = False  # standardised targets make fixed-step SPSA unstable
    # evaluation
    score_threshold: float = 0.25
    operating_iou: float = 0.5
    interpolation: str = "101pt"
    iou_thresholds: str = "0.5:0.95:0.05"
    # global
    seed: int = 0
    format: str = "table"

    def loss_config(self, **overrides) -> LossConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(LossConfig) if hasattr(self, f.name)}
        kw.update(overrides)
        return LossConfig(**kw)

    def wiou_state(self) -> WiouState:
        return WiouState(momentum=self.wiou_momentum)


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, type_name: str):
    optional = "None" in type_name
    base = type_name.replace(" | None", "")
    if optional and raw.lower() in ("none", ""):
        return None
    if base == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean for {key!r}, got {raw!r}")
    if base == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer for {key!r}, got {raw!r}") from None
    if base == "float":
        try:
            v = float(raw)
        except ValueError:
            raise ValueError(f"expected a number for {key!r}, got {raw!r}") from None
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number for {key!r}, got {raw!r}")
        return v
    return raw


def parse_iou_thresholds(spec: str) -> tuple[float, ...]:
    """``a:b:step`` (inclusive) or a comma list."""
    try:
        if ":" in spec:
            a, b, step = (float(p) for p in spec.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            n = int(round((b - a) / step)) + 1
            return tuple(round(a + i * step, 10) for i in range(n))
        return tuple(float(p) for p in spec.split(","))
    except ValueError:
        raise ValueError(f"bad IoU threshold spec {spec!r}; expected a:b:step or a comma list") from None


def _validate_config(cfg: RunConfig) -> RunConfig:
    parse_variant(cfg.variant)
    cfg.loss_config(variant="iou")  # range checks on the shared loss fields
    if not 0.0 <= cfg.mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    if cfg.patch_size < 1:
        raise ValueError("patch_size must be positive")
    if cfg.interpolation not in ("101pt", "continuous"):
        raise ValueError("interpolation must be '101pt' or 'continuous'")
    if cfg.format not in ("table", "json"):
        raise ValueError("format must be 'table' or 'json'")
    parse_iou_thresholds(cfg.iou_thresholds)
    return cfg


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"expected 'key = value', got {body!r}", source=source, line=lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise FormatError(f"unknown key {key!r}", source=source, line=lineno)
        if key in values:
            raise FormatError(f"duplicate key {key!r}", source=source, line=lineno)
        try:
            values[key] = _convert(key, raw, str(_CONFIG_TYPES[key]))
        except ValueError as e:
            raise FormatError(f"type mismatch: {e}", source=source, line=lineno) from None
    for key, v in (overrides or {}).items():
        if key not in _CONFIG_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        if v is not None:
            values[key] = v
    try:
        return _validate_config(RunConfig(**values))
    except ValueError as e:
        raise FormatError(str(e), source=source) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or none) and apply ``overrides`` (e.g. CLI flags) on top."""
    if path is None:
        return parse_config("", "<defaults>", overrides)
    data, source = _read(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"not valid UTF-8 (byte offset {e.start})", source=source) from None
    return parse_config(text, source, overrides)
