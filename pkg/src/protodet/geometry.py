"""Box algebra: conversions, IoU/GIoU, GT jittering, RoIAlign and GAP.

Boxes are normalised ``(cx, cy, w, h)`` with the image spanning [0, 1]^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateRoiError
from .rng import Rng
from .tensor import Tensor

GIOU_MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> Box:
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


def box_convert(b: Box | Sequence[float], to: str) -> tuple[float, float, float, float]:
    """Coordinates of ``b`` in ``cxcywh`` or ``xyxy``.

    A plain 4-sequence is read as xyxy when converting to cxcywh and as
    cxcywh when converting to xyxy.
    """
    if to == "xyxy":
        box = b if isinstance(b, Box) else Box(*b)
        return box.xyxy()
    if to == "cxcywh":
        if isinstance(b, Box):
            return (b.cx, b.cy, b.w, b.h)
        x1, y1, x2, y2 = b
        return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)
    raise ValueError(f"unknown box format {to!r}")


def _xyxy(b) -> tuple[float, float, float, float]:
    return b.xyxy() if isinstance(b, Box) else tuple(b)


def _overlap_terms(a, b):
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclosure = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclosure


def iou(a: Box | Sequence[float], b: Box | Sequence[float]) -> float:
    """IoU of two boxes (Box objects, or raw xyxy 4-sequences)."""
    inter, union, _ = _overlap_terms(a, b)
    return inter / union if union > 0 else 0.0


def giou(a: Box | Sequence[float], b: Box | Sequence[float]) -> float:
    inter, union, enclosure = _overlap_terms(a, b)
    if enclosure <= 0:
        return 0.0
    return inter / union - (enclosure - union) / enclosure


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate(
        [(boxes[..., :2] + boxes[..., 2:]) / 2, boxes[..., 2:] - boxes[..., :2]], axis=-1
    )


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between cxcywh arrays of shape (n, 4) and (m, 4)."""
    iou_m, _ = _pairwise(a, b)
    return iou_m


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, giou_m = _pairwise(a, b)
    return giou_m


def _pairwise(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4).copy()
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a[:, 2:] = np.maximum(a[:, 2:], GIOU_MIN_EXTENT)
    ax = cxcywh_to_xyxy(a)[:, None, :]
    bx = cxcywh_to_xyxy(b)[None, :, :]
    lt = np.maximum(ax[..., :2], bx[..., :2])
    rb = np.minimum(ax[..., 2:], bx[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    union = area_a + area_b - inter
    enc_wh = np.maximum(ax[..., 2:], bx[..., 2:]) - np.minimum(ax[..., :2], bx[..., :2])
    enclosure = enc_wh[..., 0] * enc_wh[..., 1]
    iou_m = inter / union
    return iou_m, iou_m - (enclosure - union) / enclosure


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted cxcywh boxes (n x 4, differentiable) and targets.

    Predicted extents are floored at 1e-6 so degenerate boxes stay finite.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    c = pred[:, 0:2]
    half = T.clamp(pred[:, 2:4], GIOU_MIN_EXTENT) * 0.5
    p_lo, p_hi = c - half, c + half
    t_xyxy = cxcywh_to_xyxy(target)
    t_lo, t_hi = Tensor(t_xyxy[:, :2]), Tensor(t_xyxy[:, 2:])
    inter_wh = T.clamp(T.minimum(p_hi, t_hi) - T.maximum(p_lo, t_lo), 0.0)
    inter = inter_wh[:, 0] * inter_wh[:, 1]
    p_wh = p_hi - p_lo
    area_p = p_wh[:, 0] * p_wh[:, 1]
    area_t = Tensor(target[:, 2] * target[:, 3])
    union = area_p + area_t - inter
    enc_wh = T.maximum(p_hi, t_hi) - T.minimum(p_lo, t_lo)
    enclosure = enc_wh[:, 0] * enc_wh[:, 1]
    return inter / union - (enclosure - union) / enclosure


# -- hard-negative jittering -----------------------------------------------
@dataclass(frozen=True)
class JitterParams:
    scale_lo: float = 0.6
    scale_hi: float = 1.0
    offset_frac: float = 0.2
    iou_lo: float = 0.1
    iou_hi: float = 0.5
    n_neg: int = 3
    max_attempts: int = 50

    def __post_init__(self):
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError("need 0 < scale_lo <= scale_hi")
        if not 0 <= self.iou_lo < self.iou_hi <= 1:
            raise ValueError("need 0 <= iou_lo < iou_hi <= 1")
        if self.n_neg < 0 or self.max_attempts < 1:
            raise ValueError("n_neg must be >= 0 and max_attempts >= 1")


def jitter_candidate(b: Box, scale: float, dx: float, dy: float) -> Box | None:
    """Scale the extent about the centre, shift the centre, clip to the image.

    Returns None when clipping leaves nothing inside the image.
    """
    cx, cy = b.cx + dx, b.cy + dy
    w, h = scale * b.w, scale * b.h
    x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
    x2, y2 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return Box.from_xyxy(x1, y1, x2, y2)


def jitter_box(b: Box, p: JitterParams, rng: Rng) -> list[Box]:
    """Up to ``p.n_neg`` perturbed copies of ``b`` whose IoU with it lies in the window.

    Each slot is rejection-sampled at most ``p.max_attempts`` times; slots that
    never hit the window are dropped.
    """
    out: list[Box] = []
    for _ in range(p.n_neg):
        for _ in range(p.max_attempts):
            s = rng.uniform(p.scale_lo, p.scale_hi)
            dx = rng.uniform(-p.offset_frac * b.w, p.offset_frac * b.w)
            dy = rng.uniform(-p.offset_frac * b.h, p.offset_frac * b.h)
            cand = jitter_candidate(b, s, dx, dy)
            if cand is not None and p.iou_lo <= iou(cand, b) <= p.iou_hi:
                out.append(cand)
                break
    return out


# -- RoIAlign / GAP --------------------------------------------------------
def _axis_weights(lo: float, size: float, n_bins: int, sampling: int, extent: int) -> np.ndarray:
    """Bilinear weights (n_bins, extent) averaged over ``sampling`` points per bin."""
    bin_size = size / n_bins
    offsets = (np.arange(sampling) + 0.5) / sampling
    pts = lo + (np.arange(n_bins)[:, None] + offsets[None, :]) * bin_size  # (n_bins, S)
    u = pts - 0.5  # pixel k has its centre at k + 0.5
    valid = (u >= -1.0) & (u <= extent)
    u = np.clip(u, 0.0, extent - 1)
    low = np.floor(u).astype(int)
    low = np.minimum(low, extent - 1)
    high = np.minimum(low + 1, extent - 1)
    frac = u - low
    w = np.zeros((n_bins, extent))
    rows = np.repeat(np.arange(n_bins), sampling)
    np.add.at(w, (rows, low.ravel()), ((1 - frac) * valid).ravel())
    np.add.at(w, (rows, high.ravel()), (frac * valid).ravel())
    return w / sampling


def roi_align_weights(
    roi: Box | Sequence[float], height: int, width: int, out: int = 7, sampling: int = 2
) -> np.ndarray:
    """Linear map (out*out, height*width) taking a flattened map to pooled bins."""
    cx, cy, w, h = (roi.cx, roi.cy, roi.w, roi.h) if isinstance(roi, Box) else roi
    roi_w, roi_h = w * width, h * height
    if roi_w < 1e-6 or roi_h < 1e-6:
        raise DegenerateRoiError(f"roi extent ({roi_w:g}, {roi_h:g}) px is degenerate")
    if out < 1 or sampling < 1:
        raise ValueError("out and sampling must be >= 1")
    wy = _axis_weights((cy - h / 2) * height, roi_h, out, sampling, height)
    wx = _axis_weights((cx - w / 2) * width, roi_w, out, sampling, width)
    # separable bilinear: weight[(py,px),(y,x)] = wy[py,y] * wx[px,x]
    return np.einsum("ay,bx->abyx", wy, wx).reshape(out * out, height * width)


def roi_align(fmap: Tensor, roi: Box | Sequence[float], out: int = 7, sampling: int = 2) -> Tensor:
    """Average-pooled bilinear RoIAlign of a C x H x W map into C x out x out."""
    c, height, width = fmap.shape
    weights = roi_align_weights(roi, height, width, out, sampling)
    pooled = T.reshape(fmap, (c, height * width)) @ Tensor(weights.T)
    return T.reshape(pooled, (c, out, out))


def gap(t: Tensor) -> Tensor:
    """Per-channel mean of a C x P x P tensor."""
    return T.mean(t, axis=(1, 2))


def roi_gap_batch(fmap: Tensor, rois: Sequence[Box], out: int = 7, sampling: int = 2) -> Tensor:
    """``gap(roi_align(fmap, r))`` for every roi, stacked as rows (R x C).

    Pooling is linear, so the bin weights are averaged first and applied once.
    """
    c, height, width = fmap.shape
    cols = np.stack(
        [roi_align_weights(r, height, width, out, sampling).mean(axis=0) for r in rois], axis=1
    )
    flat = T.reshape(fmap, (c, height * width))
    return T.transpose(flat @ Tensor(cols))
