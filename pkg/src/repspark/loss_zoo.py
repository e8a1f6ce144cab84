"""Bounding-box regression losses.

All losses are evaluated on (N, 4) arrays of ``x1, y1, x2, y2`` boxes by
``loss_batch``; ``loss_value`` is the scalar convenience wrapper.  Analytic
gradients exist for IoU, GIoU, DIoU, CIoU and Focaler over those bases; every
variant can be differentiated numerically with ``loss_grad_fd``.

Quantities that are gradient-detached in training (CIoU's trade-off weight
``alpha`` and the WIoU exponent denominator) can be pinned through the
``detached`` argument.  The finite-difference routine pins them at the
unperturbed point so it differentiates the same function the analytic
gradient does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

# guard for ratios whose denominator can reach zero on degenerate boxes
EPS = 1e-9

_K_V = 4.0 / math.pi**2


class Variant(str, Enum):
    IOU = "iou"
    GIOU = "giou"
    DIOU = "diou"
    CIOU = "ciou"
    NWD = "nwd"
    ALPHA = "alpha"
    EIOU = "eiou"
    SIOU = "siou"
    WIOU = "wiou"
    MPDIOU = "mpdiou"
    SHAPEIOU = "shapeiou"
    PIOU = "piou"
    FOCALER = "focaler"


VARIANTS = tuple(v.value for v in Variant)
ANALYTIC_VARIANTS = ("iou", "giou", "diou", "ciou", "focaler")
# losses whose value does not change when pred and gt are swapped
SYMMETRIC_VARIANTS = ("iou", "giou", "diou", "ciou", "nwd", "alpha", "eiou", "siou", "mpdiou", "focaler")


def parse_variant(name) -> Variant:
    try:
        return Variant(str(getattr(name, "value", name)).lower())
    except ValueError:
        raise ValueError(f"unknown loss variant {name!r}; valid names: {', '.join(VARIANTS)}") from None


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box with negative extent: {self}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> Box:
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def translate(self, dx, dy) -> Box:
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scale(self, s) -> Box:
        return Box(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)


def as_boxes(a) -> np.ndarray:
    """Coerce a Box, a 4-sequence or an (N, 4) array into a validated (N, 4) float64 array."""
    if isinstance(a, Box):
        return a.as_array()[None]
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"boxes must have shape (N, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("box coordinates must be finite")
    bad = (arr[:, 2] < arr[:, 0]) | (arr[:, 3] < arr[:, 1])
    if bad.any():
        raise ValueError(f"invalid box with negative extent at row {int(np.argmax(bad))}: {arr[np.argmax(bad)].tolist()}")
    return arr


@dataclass
class BoxGeometry:
    """Shared decomposition of a (pred, gt) pair; fields are floats or arrays."""

    iou: float
    inter_area: float
    union_area: float
    area_p: float
    area_g: float
    enclose: Box | np.ndarray
    enclose_diag_sq: float
    center_dist_sq: float
    dx: float  # pred centre minus gt centre
    dy: float
    w_p: float
    h_p: float
    w_g: float
    h_g: float
    cw: float
    ch: float


def geometry(pred, gt) -> BoxGeometry:
    """Vectorised ``box_geometry`` over (N, 4) arrays."""
    p = as_boxes(pred)
    g = as_boxes(gt)
    w_p, h_p = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    w_g, h_g = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    iw = np.maximum(np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0]), 0.0)
    ih = np.maximum(np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1]), 0.0)
    inter = iw * ih
    area_p, area_g = w_p * h_p, w_g * h_g
    union = area_p + area_g - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    enclose = np.stack(
        [np.minimum(p[:, 0], g[:, 0]), np.minimum(p[:, 1], g[:, 1]),
         np.maximum(p[:, 2], g[:, 2]), np.maximum(p[:, 3], g[:, 3])], axis=1,
    )
    cw = enclose[:, 2] - enclose[:, 0]
    ch = enclose[:, 3] - enclose[:, 1]
    dx = (p[:, 0] + p[:, 2]) / 2 - (g[:, 0] + g[:, 2]) / 2
    dy = (p[:, 1] + p[:, 3]) / 2 - (g[:, 1] + g[:, 3]) / 2
    return BoxGeometry(
        iou=iou, inter_area=inter, union_area=union, area_p=area_p, area_g=area_g,
        enclose=enclose, enclose_diag_sq=cw**2 + ch**2, center_dist_sq=dx**2 + dy**2,
        dx=dx, dy=dy, w_p=w_p, h_p=h_p, w_g=w_g, h_g=h_g, cw=cw, ch=ch,
    )


def box_geometry(pred: Box, gt: Box) -> BoxGeometry:
    g = geometry(pred, gt)
    values = {k: float(v[0]) for k, v in vars(g).items() if k != "enclose"}
    return BoxGeometry(enclose=Box(*g.enclose[0].tolist()), **values)


@dataclass(frozen=True)
class LossConfig:
    variant: Variant = Variant.CIOU
    alpha_pow: float = 3.0
    nwd_c: float = 12.8
    siou_theta: float = 4.0
    wiou_alpha: float = 1.9
    wiou_delta: float = 3.0
    shape_scale: float = 0.0
    piou_lambda: float = 1.3
    piou_v2: bool = False
    focaler_d: float = 0.0
    focaler_u: float = 0.95
    focaler_base: Variant = Variant.CIOU
    image_w: float | None = None
    image_h: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        object.__setattr__(self, "focaler_base", parse_variant(self.focaler_base))
        if not 0.0 <= self.focaler_d < self.focaler_u <= 1.0:
            raise ValueError(f"focaler interval requires 0 <= d < u <= 1, got d={self.focaler_d}, u={self.focaler_u}")
        if self.focaler_base is Variant.FOCALER:
            raise ValueError("focaler_base cannot be focaler itself")
        if self.nwd_c <= 0:
            raise ValueError("nwd_c must be positive")
        if self.variant is Variant.MPDIOU and not (self.image_w and self.image_h and self.image_w > 0 and self.image_h > 0):
            raise ValueError("mpdiou requires positive image_w and image_h")

    def with_variant(self, variant) -> LossConfig:
        return replace(self, variant=parse_variant(variant))


@dataclass(frozen=True)
class WiouState:
    """Running mean of the IoU loss used by WIoU's dynamic focusing.

    Owned by the caller; loss evaluation only reads it.
    """

    running_mean_liou: float = 1.0
    momentum: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


def wiou_update(state: WiouState, l_iou: float) -> WiouState:
    """Exponential moving average update; the first call adopts ``l_iou`` directly."""
    l_iou = float(l_iou)
    if l_iou < 0:
        raise ValueError(f"l_iou must be non-negative, got {l_iou}")
    if not state.initialized:
        return replace(state, running_mean_liou=l_iou, initialized=True)
    m = state.momentum * state.running_mean_liou + (1.0 - state.momentum) * l_iou
    return replace(state, running_mean_liou=m)


def focaler_map(iou, d: float = 0.0, u: float = 0.95):
    """Piecewise-linear remap of IoU: 0 below ``d``, 1 above ``u``, linear between."""
    return np.clip((np.asarray(iou, dtype=np.float64) - d) / (u - d), 0.0, 1.0)


def _guard(x):
    return np.maximum(x, EPS)


def _ciou_v(g: BoxGeometry):
    return _K_V * (np.arctan(g.w_g / _guard(g.h_g)) - np.arctan(g.w_p / _guard(g.h_p))) ** 2


def _ciou_alpha(g: BoxGeometry):
    v = _ciou_v(g)
    return v / _guard((1.0 - g.iou) + v)


def _loss_iou(p, gt, g, cfg, state, det):
    return 1.0 - g.iou


def _loss_giou(p, gt, g, cfg, state, det):
    c_area = g.cw * g.ch
    return 1.0 - (g.iou - (c_area - g.union_area) / _guard(c_area))


def _loss_diou(p, gt, g, cfg, state, det):
    return 1.0 - g.iou + g.center_dist_sq / _guard(g.enclose_diag_sq)


def _loss_ciou(p, gt, g, cfg, state, det):
    alpha = det["ciou_alpha"] if "ciou_alpha" in det else _ciou_alpha(g)
    return _loss_diou(p, gt, g, cfg, state, det) + alpha * _ciou_v(g)


def _loss_nwd(p, gt, g, cfg, state, det):
    w2 = g.dx**2 + g.dy**2 + ((g.w_p - g.w_g) / 2) ** 2 + ((g.h_p - g.h_g) / 2) ** 2
    return 1.0 - np.exp(-np.sqrt(w2) / cfg.nwd_c)


def _loss_alpha(p, gt, g, cfg, state, det):
    return 1.0 - g.iou**cfg.alpha_pow


def _loss_eiou(p, gt, g, cfg, state, det):
    return (
        1.0 - g.iou
        + g.center_dist_sq / _guard(g.enclose_diag_sq)
        + (g.w_p - g.w_g) ** 2 / _guard(g.cw**2)
        + (g.h_p - g.h_g) ** 2 / _guard(g.ch**2)
    )


def _loss_siou(p, gt, g, cfg, state, det):
    sigma = np.sqrt(g.center_dist_sq)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    sin_a = np.minimum(np.abs(g.dy), sigma) / safe_sigma
    angle = np.where(sigma > 0, 1.0 - 2.0 * np.sin(np.arcsin(sin_a) - math.pi / 4) ** 2, 0.0)
    gamma = 2.0 - angle
    rho_x = (g.dx / _guard(g.cw)) ** 2
    rho_y = (g.dy / _guard(g.ch)) ** 2
    dist = (1.0 - np.exp(-gamma * rho_x)) + (1.0 - np.exp(-gamma * rho_y))
    omega_w = np.abs(g.w_p - g.w_g) / _guard(np.maximum(g.w_p, g.w_g))
    omega_h = np.abs(g.h_p - g.h_g) / _guard(np.maximum(g.h_p, g.h_g))
    shape = (1.0 - np.exp(-omega_w)) ** cfg.siou_theta + (1.0 - np.exp(-omega_h)) ** cfg.siou_theta
    return 1.0 - g.iou + (dist + shape) / 2.0


def _loss_wiou(p, gt, g, cfg, state, det):
    if state is None:
        raise ValueError("the wiou variant requires a WiouState")
    l_iou = 1.0 - g.iou
    denom = det["wiou_denom"] if "wiou_denom" in det else g.cw**2 + g.ch**2
    r_wiou = np.exp(g.center_dist_sq / _guard(denom))
    if state.initialized:
        beta = l_iou / max(state.running_mean_liou, EPS)
    else:
        # no statistic yet: the batch is its own reference, beta = 1
        beta = np.ones_like(l_iou)
    focus = beta / (cfg.wiou_delta * cfg.wiou_alpha ** (beta - cfg.wiou_delta))
    return focus * r_wiou * l_iou


def _loss_mpdiou(p, gt, g, cfg, state, det):
    if not (cfg.image_w and cfg.image_h):
        raise ValueError("mpdiou requires image_w and image_h")
    norm = cfg.image_w**2 + cfg.image_h**2
    d1 = (p[:, 0] - gt[:, 0]) ** 2 + (p[:, 1] - gt[:, 1]) ** 2
    d2 = (p[:, 2] - gt[:, 2]) ** 2 + (p[:, 3] - gt[:, 3]) ** 2
    return 1.0 - g.iou + d1 / norm + d2 / norm


def _loss_shapeiou(p, gt, g, cfg, state, det):
    s = cfg.shape_scale
    wg_s, hg_s = g.w_g**s, g.h_g**s
    ww = 2.0 * wg_s / _guard(wg_s + hg_s)
    hh = 2.0 * hg_s / _guard(wg_s + hg_s)
    c2 = _guard(g.enclose_diag_sq)
    dist = hh * g.dx**2 / c2 + ww * g.dy**2 / c2
    omega_w = hh * np.abs(g.w_p - g.w_g) / _guard(np.maximum(g.w_p, g.w_g))
    omega_h = ww * np.abs(g.h_p - g.h_g) / _guard(np.maximum(g.h_p, g.h_g))
    shape = (1.0 - np.exp(-omega_w)) ** 4 + (1.0 - np.exp(-omega_h)) ** 4
    return 1.0 - g.iou + dist + 0.5 * shape


def _loss_piou(p, gt, g, cfg, state, det):
    spread = (
        (np.abs(p[:, 0] - gt[:, 0]) + np.abs(p[:, 2] - gt[:, 2])) / _guard(g.w_g)
        + (np.abs(p[:, 1] - gt[:, 1]) + np.abs(p[:, 3] - gt[:, 3])) / _guard(g.h_g)
    ) / 4.0
    l_v1 = (1.0 - g.iou) + (1.0 - np.exp(-(spread**2)))
    if not cfg.piou_v2:
        return l_v1
    q = cfg.piou_lambda * np.exp(-spread)
    return 3.0 * q * np.exp(-(q**2)) * l_v1


def _loss_focaler(p, gt, g, cfg, state, det):
    base = _LOSSES[cfg.focaler_base](p, gt, g, cfg, state, det)
    return base + g.iou - focaler_map(g.iou, cfg.focaler_d, cfg.focaler_u)


_LOSSES: dict[Variant, Callable] = {
    Variant.IOU: _loss_iou,
    Variant.GIOU: _loss_giou,
    Variant.DIOU: _loss_diou,
    Variant.CIOU: _loss_ciou,
    Variant.NWD: _loss_nwd,
    Variant.ALPHA: _loss_alpha,
    Variant.EIOU: _loss_eiou,
    Variant.SIOU: _loss_siou,
    Variant.WIOU: _loss_wiou,
    Variant.MPDIOU: _loss_mpdiou,
    Variant.SHAPEIOU: _loss_shapeiou,
    Variant.PIOU: _loss_piou,
    Variant.FOCALER: _loss_focaler,
}


def detached_terms(pred, gt, cfg: LossConfig) -> dict[str, np.ndarray]:
    """Values of the gradient-detached sub-expressions at (pred, gt)."""
    g = geometry(pred, gt)
    return {"ciou_alpha": _ciou_alpha(g), "wiou_denom": g.cw**2 + g.ch**2}


def loss_batch(pred, gt, cfg: LossConfig | None = None, state: WiouState | None = None,
               detached: dict | None = None) -> np.ndarray:
    """Per-row loss for (N, 4) pred and gt arrays (broadcasting a single gt row is allowed)."""
    cfg = cfg or LossConfig()
    p = as_boxes(pred)
    t = as_boxes(gt)
    if t.shape[0] == 1 and p.shape[0] > 1:
        t = np.repeat(t, p.shape[0], axis=0)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} and gt {t.shape} row counts differ")
    if cfg.variant is Variant.WIOU or (cfg.variant is Variant.FOCALER and cfg.focaler_base is Variant.WIOU):
        if state is None:
            raise ValueError("the wiou variant requires a WiouState")
    elif state is not None and cfg.variant is not Variant.WIOU:
        raise ValueError(f"WiouState given for non-wiou variant {cfg.variant.value!r}")
    g = geometry(p, t)
    return _LOSSES[cfg.variant](p, t, g, cfg, state, detached or {})


def loss_value(pred: Box, gt: Box, cfg: LossConfig | None = None, state: WiouState | None = None) -> float:
    return float(loss_batch(pred, gt, cfg, state)[0])


def losses_all(pred: Box, gt: Box, cfg: LossConfig | None = None,
               state: WiouState | None = None) -> dict[str, float]:
    """Every variant on one pair; MPDIoU is skipped when the config carries no image size."""
    cfg = cfg or LossConfig()
    out = {}
    for name in VARIANTS:
        if name == "mpdiou" and not (cfg.image_w and cfg.image_h):
            continue
        c = replace(cfg, variant=parse_variant(name))
        out[name] = loss_value(pred, gt, c, state or WiouState() if name == "wiou" else None)
    return out


# -- gradients ---------------------------------------------------------------


class LossGradient(NamedTuple):
    grad: np.ndarray  # d loss / d (x1, y1, x2, y2) of pred
    flagged: bool  # analytic: subgradient at a kink; fd: a perturbation was clamped


def _step(cond_gt, tie):
    # indicator with ties resolved to the midpoint of the two one-sided choices
    return np.where(tie, 0.5, cond_gt.astype(np.float64))


def loss_grad_analytic_batch(pred, gt, cfg: LossConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(loss)/d(pred) for each row, plus a per-row kink flag.

    CIoU's ``alpha`` is treated as a constant. At kinks (coincident edges,
    zero-width overlap, Focaler clamp boundaries) the gradient is the average
    of the two one-sided derivatives and the row is flagged.
    """
    cfg = cfg or LossConfig()
    base = cfg.focaler_base if cfg.variant is Variant.FOCALER else cfg.variant
    if base.value not in ANALYTIC_VARIANTS or base is Variant.FOCALER:
        raise ValueError(
            f"no analytic gradient for {cfg.variant.value!r}"
            + (f" over {base.value!r}" if cfg.variant is Variant.FOCALER else "")
            + f"; available: {', '.join(ANALYTIC_VARIANTS)} (focaler over iou/giou/diou/ciou)"
        )
    p = as_boxes(pred)
    t = as_boxes(gt)
    if t.shape[0] == 1 and p.shape[0] > 1:
        t = np.repeat(t, p.shape[0], axis=0)
    g = geometry(p, t)
    zero = np.zeros(p.shape[0])
    one = np.ones(p.shape[0])

    # intersection edges
    iw_raw = np.minimum(p[:, 2], t[:, 2]) - np.maximum(p[:, 0], t[:, 0])
    ih_raw = np.minimum(p[:, 3], t[:, 3]) - np.maximum(p[:, 1], t[:, 1])
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    act_w = _step(iw_raw > 0, iw_raw == 0)
    act_h = _step(ih_raw > 0, ih_raw == 0)
    a1 = _step(p[:, 0] > t[:, 0], p[:, 0] == t[:, 0]) * act_w
    a2 = _step(p[:, 2] < t[:, 2], p[:, 2] == t[:, 2]) * act_w
    b1 = _step(p[:, 1] > t[:, 1], p[:, 1] == t[:, 1]) * act_h
    b2 = _step(p[:, 3] < t[:, 3], p[:, 3] == t[:, 3]) * act_h
    d_inter = np.stack([-ih * a1, -iw * b1, ih * a2, iw * b2], axis=1)
    d_area_p = np.stack([-g.h_p, -g.w_p, g.h_p, g.w_p], axis=1)
    d_union = d_area_p - d_inter
    union = g.union_area[:, None]
    d_iou = np.where(union > 0, (d_inter - g.iou[:, None] * d_union) / np.where(union > 0, union, 1.0), 0.0)

    flagged = (
        (p[:, 0] == t[:, 0]) | (p[:, 1] == t[:, 1]) | (p[:, 2] == t[:, 2]) | (p[:, 3] == t[:, 3])
        | (iw_raw == 0) | (ih_raw == 0)
    )

    if base is Variant.IOU:
        grad = -d_iou
    else:
        # enclosing box edges
        e1 = _step(p[:, 0] < t[:, 0], p[:, 0] == t[:, 0])
        e2 = _step(p[:, 2] > t[:, 2], p[:, 2] == t[:, 2])
        f1 = _step(p[:, 1] < t[:, 1], p[:, 1] == t[:, 1])
        f2 = _step(p[:, 3] > t[:, 3], p[:, 3] == t[:, 3])
        d_cw = np.stack([-e1, zero, e2, zero], axis=1)
        d_ch = np.stack([zero, -f1, zero, f2], axis=1)
        cw, ch = g.cw[:, None], g.ch[:, None]
        if base is Variant.GIOU:
            c_area = cw * ch
            d_c = d_cw * ch + cw * d_ch
            # loss = 2 - iou - union / C
            grad = -d_iou - (d_union * c_area - union * d_c) / np.maximum(c_area, EPS) ** 2
        else:
            c2 = g.enclose_diag_sq[:, None]
            rho2 = g.center_dist_sq[:, None]
            d_rho2 = np.stack([g.dx, g.dy, g.dx, g.dy], axis=1)
            d_c2 = 2 * cw * d_cw + 2 * ch * d_ch
            grad = -d_iou + (d_rho2 * c2 - rho2 * d_c2) / np.maximum(c2, EPS) ** 2
            if base is Variant.CIOU:
                alpha = _ciou_alpha(g)[:, None]
                hp = _guard(g.h_p)
                at_p = np.arctan(g.w_p / hp)
                at_g = np.arctan(g.w_g / _guard(g.h_g))
                denom = g.w_p**2 + hp**2
                d_at_dw = hp / denom
                d_at_dh = -g.w_p / denom
                dv_dat = 2 * _K_V * (at_p - at_g)
                d_at = np.stack([-d_at_dw, -d_at_dh, d_at_dw, d_at_dh], axis=1)
                grad = grad + alpha * (dv_dat[:, None] * d_at)

    if cfg.variant is Variant.FOCALER:
        d, u = cfg.focaler_d, cfg.focaler_u
        inside = _step((g.iou > d) & (g.iou < u), (g.iou == d) | (g.iou == u))
        grad = grad + d_iou - (inside / (u - d))[:, None] * d_iou
        flagged = flagged | (g.iou == d) | (g.iou == u)
    return grad, flagged


def loss_grad_analytic(pred: Box, gt: Box, cfg: LossConfig | None = None) -> LossGradient:
    grad, flagged = loss_grad_analytic_batch(pred, gt, cfg)
    return LossGradient(grad[0], bool(flagged[0]))


def central_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def loss_grad_fd_batch(pred, gt, cfg: LossConfig | None = None, h: float = 1e-5,
                       state: WiouState | None = None, detach: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Central differences for every row, all 8 perturbations evaluated in one batch.

    A perturbation that would give a negative extent is clamped to the
    opposite edge (the row is flagged) and the actual step length is used.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    cfg = cfg or LossConfig()
    p = as_boxes(pred)
    t = as_boxes(gt)
    if t.shape[0] == 1 and p.shape[0] > 1:
        t = np.repeat(t, p.shape[0], axis=0)
    n = p.shape[0]
    # (n, 4 coords, 2 signs, 4)
    pert = np.repeat(np.repeat(p[:, None, None, :], 4, axis=1), 2, axis=2)
    idx = np.arange(4)
    pert[:, idx, 0, idx] += h
    pert[:, idx, 1, idx] -= h
    flagged = np.zeros(n, dtype=bool)
    for i in range(4):
        lo_i, hi_i = (i, i + 2) if i < 2 else (i - 2, i)
        if i < 2:  # x1 / y1 must stay <= x2 / y2
            over = pert[:, i, 0, i] > p[:, hi_i]
            pert[over, i, 0, i] = p[over, hi_i]
        else:  # x2 / y2 must stay >= x1 / y1
            over = pert[:, i, 1, i] < p[:, lo_i]
            pert[over, i, 1, i] = p[over, lo_i]
        flagged |= over
    steps = pert[:, idx, 0, idx] - pert[:, idx, 1, idx]  # (n, 4)

    rows = pert.reshape(-1, 4)
    gt_rows = np.repeat(t, 8, axis=0)
    det = None
    if detach:
        det = {k: np.repeat(v, 8) for k, v in detached_terms(p, t, cfg).items()}
    vals = loss_batch(rows, gt_rows, cfg, state, det).reshape(n, 4, 2)
    return (vals[:, :, 0] - vals[:, :, 1]) / steps, flagged


def loss_grad_fd(pred: Box, gt: Box, cfg: LossConfig | None = None, h: float = 1e-5,
                 state: WiouState | None = None, detach: bool = True) -> LossGradient:
    grad, flagged = loss_grad_fd_batch(pred, gt, cfg, h, state, detach)
    return LossGradient(grad[0], bool(flagged[0]))


def grad_rel_error(a, b, floor: float = 1e-10) -> float:
    """``||a - b|| / max(||a||, ||b||)`` with a small floor on the denominator."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def random_box_pairs(n: int, rng: np.random.Generator, *, span: float = 100.0,
                     min_size: float = 1.0, max_size: float = 50.0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random (pred, gt) pairs with positive extent, biased towards overlap."""
    def boxes(centers):
        wh = rng.uniform(min_size, max_size, size=(n, 2))
        return np.concatenate([centers - wh / 2, centers + wh / 2], axis=1)

    c_gt = rng.uniform(0, span, size=(n, 2))
    c_pred = c_gt + rng.normal(0, max_size / 3, size=(n, 2))
    return boxes(c_pred), boxes(c_gt)


def non_degenerate_pairs(n: int, rng: np.random.Generator, cfg: LossConfig | None = None,
                         margin: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Random pairs kept away from every kink of the analytic gradients."""
    cfg = cfg or LossConfig()
    out_p, out_g = [], []
    while sum(len(a) for a in out_p) < n:
        p, g = random_box_pairs(max(2 * n, 16), rng)
        geo = geometry(p, g)
        iw = np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0])
        ih = np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1])
        ok = (
            (np.abs(p - g).min(axis=1) > margin)
            & (np.abs(iw) > margin) & (np.abs(ih) > margin)
            & (np.abs(geo.iou - cfg.focaler_d) > margin)
            & (np.abs(geo.iou - cfg.focaler_u) > margin)
        )
        out_p.append(p[ok])
        out_g.append(g[ok])
    return np.concatenate(out_p)[:n], np.concatenate(out_g)[:n]
