"""Detection metrics: greedy matching, AP, mAP50 / mAP50:95, precision/recall, NMS."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .loss_zoo import Box

DEFAULT_IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
INTERPOLATIONS = ("101pt", "continuous")
RECALL_POINTS = np.arange(101) / 100.0  # exact k/100; linspace drifts by an ulp (e.g. 0.30000000000000004)


@dataclass(frozen=True)
class GroundTruth:
    image_id: Hashable
    class_id: int
    box: Box
    # on-disk [x, y, w, h], kept so files round-trip without re-deriving widths
    xywh: tuple | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    class_id: int
    box: Box
    score: float
    xywh: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass
class EvalResult:
    per_class_ap: dict  # class -> {iou_threshold -> AP or None (excluded)}
    per_threshold_map: dict  # iou_threshold -> mAP
    map50: float
    map50_95: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "map50": self.map50,
            "map50_95": self.map50_95,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "per_threshold_map": {f"{t:.2f}": v for t, v in self.per_threshold_map.items()},
            "per_class_ap": {
                str(c): {f"{t:.2f}": v for t, v in aps.items()} for c, aps in self.per_class_ap.items()
            },
        }


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _boxes(records) -> np.ndarray:
    return np.array([[r.box.x1, r.box.y1, r.box.x2, r.box.y2] for r in records], dtype=np.float64).reshape(-1, 4)


def score_order(dets: Sequence[Detection]) -> list[int]:
    """Indices sorted by descending score; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float) -> list[bool]:
    """Greedy score-ordered matching within one (image, class) partition.

    Returns TP flags aligned with the input order of ``dets``.
    """
    keys = {(r.image_id, r.class_id) for r in list(dets) + list(gts)}
    if len(keys) > 1:
        raise ValueError(f"match_detections needs a single (image, class) partition, got {sorted(map(str, keys))}")
    flags = [False] * len(dets)
    if not dets or not gts:
        return flags
    ious = iou_matrix(_boxes(dets), _boxes(gts))
    taken = np.zeros(len(gts), dtype=bool)
    for i in score_order(dets):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))  # first index wins ties
        if cand[j] >= iou_thr:
            taken[j] = True
            flags[i] = True
    return flags


def average_precision(tp_flags: Sequence[bool], n_gt: int, interpolation: str = "101pt") -> float | None:
    """AP of a score-ranked TP/FP list.

    Returns None when there is nothing to score (no GT and no detections);
    a class with detections but no GT scores 0.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation!r}; expected one of {INTERPOLATIONS}")
    tp = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        return 0.0 if tp.size else None
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope, right to left
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "continuous":
        prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev) * envelope))
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def _partition(records):
    out = defaultdict(list)
    for i, r in enumerate(records):
        out[(r.image_id, r.class_id)].append(i)
    return out


def _ranked_flags(dets, gts, cls, thr, det_parts, gt_parts):
    """Pooled (score, input index, TP) triples for one class at one threshold."""
    ranked = []
    n_gt = 0
    images = {k[0] for k in det_parts if k[1] == cls} | {k[0] for k in gt_parts if k[1] == cls}
    for img in images:
        di = det_parts.get((img, cls), [])
        gi = gt_parts.get((img, cls), [])
        n_gt += len(gi)
        flags = match_detections([dets[i] for i in di], [gts[j] for j in gi], thr)
        ranked.extend((dets[i].score, i, f) for i, f in zip(di, flags))
    ranked.sort(key=lambda t: (-t[0], t[1]))
    return [f for _, _, f in ranked], n_gt


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] | None = None,
    classes: Sequence[int] | None = None,
    *,
    score_threshold: float = 0.25,
    operating_iou: float = 0.5,
    interpolation: str = "101pt",
) -> EvalResult:
    thresholds = tuple(float(t) for t in (DEFAULT_IOU_THRESHOLDS if iou_thresholds is None else iou_thresholds))
    if not thresholds:
        raise ValueError("at least one IoU threshold is required")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"IoU thresholds must be strictly ascending, got {list(thresholds)}")
    if classes is None:
        classes = sorted({r.class_id for r in gts} | {r.class_id for r in dets})
    classes = list(classes)
    if not classes:
        raise ValueError("class list is empty (no ground truth, no detections and no explicit classes)")

    det_parts = _partition(dets)
    gt_parts = _partition(gts)

    per_class = {}
    for cls in classes:
        per_class[cls] = {}
        for thr in thresholds:
            flags, n_gt = _ranked_flags(dets, gts, cls, thr, det_parts, gt_parts)
            per_class[cls][thr] = average_precision(flags, n_gt, interpolation)

    per_thr = {}
    for thr in thresholds:
        vals = [per_class[c][thr] for c in classes if per_class[c][thr] is not None]
        per_thr[thr] = float(np.mean(vals)) if vals else 0.0

    if any(math.isclose(t, 0.5) for t in thresholds):
        map50 = next(v for t, v in per_thr.items() if math.isclose(t, 0.5))
    else:
        vals = []
        for cls in classes:
            flags, n_gt = _ranked_flags(dets, gts, cls, 0.5, det_parts, gt_parts)
            ap = average_precision(flags, n_gt, interpolation)
            if ap is not None:
                vals.append(ap)
        map50 = float(np.mean(vals)) if vals else 0.0
    map50_95 = float(np.mean(list(per_thr.values())))

    # operating point
    kept = [d for d in dets if d.score >= score_threshold]
    kept_parts = _partition(kept)
    tp = fp = fn = 0
    for cls in classes:
        images = {k[0] for k in kept_parts if k[1] == cls} | {k[0] for k in gt_parts if k[1] == cls}
        for img in images:
            di = kept_parts.get((img, cls), [])
            gi = gt_parts.get((img, cls), [])
            flags = match_detections([kept[i] for i in di], [gts[j] for j in gi], operating_iou)
            n_tp = sum(flags)
            tp += n_tp
            fp += len(flags) - n_tp
            fn += len(gi) - n_tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalResult(per_class, per_thr, float(map50), map50_95, precision, recall, tp, fp, fn)


def nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    """Greedy NMS for a single-class partition; output sorted by descending score."""
    if len({d.class_id for d in dets}) > 1:
        raise ValueError("nms expects a single class partition")
    order = score_order(dets)
    if not order:
        return []
    ious = iou_matrix(_boxes(dets), _boxes(dets))
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(dets[i])
        suppressed |= ious[i] > iou_thr
    return keep
