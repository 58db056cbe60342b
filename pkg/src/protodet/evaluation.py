"""COCO-style mAP, class-wise NMS and text/visual branch ensembling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, pairwise_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    branch: str = "visual"


def nms(dets: Sequence[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Class-wise greedy NMS; output ordered by descending score (stable)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    by_class: dict[int, list[np.ndarray]] = {}
    for i in order:
        d = dets[i]
        prior = by_class.setdefault(d.class_id, [])
        arr = d.box.as_array()
        if prior and (pairwise_iou(arr[None], np.stack(prior)) > iou_thr).any():
            continue
        prior.append(arr)
        kept.append(d)
    return kept


def ensemble_detections(
    text_dets: Sequence[Detection],
    visual_dets: Sequence[Detection],
    nms_iou: float = 0.5,
    mode: str = "union",
) -> list[Detection]:
    """Merge both branches' detections for one image.

    ``union`` pools both lists and runs class-wise NMS. ``score_avg`` first
    averages the scores of cross-branch same-class pairs overlapping above
    ``nms_iou`` (unpaired detections keep their score), then runs NMS.
    """
    if mode == "union":
        pooled = list(text_dets) + list(visual_dets)
    elif mode == "score_avg":
        pooled = _average_pairs(list(text_dets), list(visual_dets), nms_iou)
    else:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    return [Detection(d.box, d.class_id, d.score, "ensemble") for d in nms(pooled, nms_iou)]


def _average_pairs(a: list[Detection], b: list[Detection], thr: float) -> list[Detection]:
    out, used_b = [], set()
    for d in a:
        best, best_iou = None, thr
        for k, e in enumerate(b):
            if k in used_b or e.class_id != d.class_id:
                continue
            ov = float(pairwise_iou(d.box.as_array()[None], e.box.as_array()[None])[0, 0])
            if ov > best_iou:
                best, best_iou = k, ov
        if best is None:
            out.append(d)
        else:
            used_b.add(best)
            out.append(Detection(d.box, d.class_id, (d.score + b[best].score) / 2, d.branch))
    out.extend(e for k, e in enumerate(b) if k not in used_b)
    return out


def _class_ap(
    dets: list[tuple[int, float, np.ndarray]], gts: dict[int, np.ndarray], n_gt: int, thr: float
) -> float:
    """101-point interpolated AP for one class at one IoU threshold."""
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda k: -dets[k][1])
    taken = {img: np.zeros(len(g), dtype=bool) for img, g in gts.items()}
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        img, _, box = dets[k]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou(box[None], g)[0]
        ious[taken[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= thr:
            taken[img][best] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_map(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[tuple[int, Box]]],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    n_classes: int | None = None,
) -> dict:
    """COCO-style mAP over IoU thresholds and classes that have ground truth.

    Returns ``mAP``, ``AP50``, ``AP75`` (when 0.75 is among the thresholds) and
    ``per_class`` AP averaged over thresholds.
    """
    if len(dets) != len(gts):
        raise ValueError("need one detection list per image")
    classes = sorted({c for img in gts for c, _ in img} | set(range(n_classes or 0)))
    per_class: dict[int, float] = {}
    by_thr: dict[float, list[float]] = {t: [] for t in iou_thresholds}
    for c in classes:
        g = {
            i: np.array([b.as_array() for k, b in img if k == c]).reshape(-1, 4)
            for i, img in enumerate(gts)
        }
        n_gt = sum(len(v) for v in g.values())
        if n_gt == 0:
            continue
        d = [(i, det.score, det.box.as_array()) for i, img in enumerate(dets) for det in img if det.class_id == c]
        aps = [_class_ap(d, g, n_gt, t) for t in iou_thresholds]
        for t, ap in zip(iou_thresholds, aps):
            by_thr[t].append(ap)
        per_class[c] = float(np.mean(aps))
    if not per_class:
        return {"mAP": 0.0, "AP50": 0.0, "AP75": 0.0, "per_class": {}}
    out = {
        "mAP": float(np.mean(list(per_class.values()))),
        "per_class": per_class,
    }
    for key, t in (("AP50", 0.5), ("AP75", 0.75)):
        match = [thr for thr in iou_thresholds if abs(thr - t) < 1e-9]
        out[key] = float(np.mean(by_thr[match[0]])) if match else None
    return out
