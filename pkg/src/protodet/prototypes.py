"""Class prototypes from support instances, hard negatives from jittered GTs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .errors import EmptyClassError
from .geometry import Box, JitterParams, jitter_box, roi_gap_batch
from .rng import Rng
from .tensor import Tensor

Annotation = tuple[int, Box]


@dataclass
class PrototypeSet:
    class_protos: Tensor  # C x D, unit rows
    neg_protos: Tensor  # M x D, unit rows
    neg_parent: np.ndarray  # (M,) GT index per negative

    @property
    def class_ids(self) -> list[int]:
        return list(range(self.class_protos.shape[0]))


@dataclass
class VisualTokens:
    V: Tensor
    n_class: int
    n_neg: int

    @property
    def n_tokens(self) -> int:
        return self.n_class + self.n_neg


def class_means(descriptors: Tensor, class_ids: Sequence[int], n_classes: int) -> Tensor:
    """Mean descriptor per class, l2-normalised; rows follow class order."""
    class_ids = np.asarray(class_ids)
    rows = []
    for c in range(n_classes):
        members = np.flatnonzero(class_ids == c)
        if members.size == 0:
            raise EmptyClassError(c)
        rows.append(T.mean(descriptors[members], axis=0))
    return T.l2_normalize(T.stack(rows))


def build_class_prototypes(
    supports: Sequence[tuple[FeaturePyramid, Sequence[Annotation]]],
    n_classes: int,
    level: int = 0,
    roi_out: int = 7,
    sampling: int = 2,
) -> Tensor:
    descs, ids = [], []
    for pyramid, annotations in supports:
        if not annotations:
            continue
        fmap = pyramid.level(level)
        descs.append(roi_gap_batch(fmap, [box for _, box in annotations], roi_out, sampling))
        ids.extend(cls for cls, _ in annotations)
    if not descs:
        raise EmptyClassError(0)
    return class_means(T.concat(descs, axis=0), ids, n_classes)


def build_negative_prototypes(
    query: FeaturePyramid,
    gts: Sequence[Box],
    params: JitterParams,
    rng: Rng,
    level: int = 0,
    roi_out: int = 7,
    sampling: int = 2,
) -> tuple[Tensor, np.ndarray]:
    """Jitter every GT, pool each accepted box from the query map, normalise.

    Returns an M x D tensor (M may be 0) and the parent GT index of each row.
    """
    boxes: list[Box] = []
    parents: list[int] = []
    for j, gt in enumerate(gts):
        accepted = jitter_box(gt, params, rng)
        boxes.extend(accepted)
        parents.extend([j] * len(accepted))
    if not boxes:
        return Tensor(np.zeros((0, query.d_model))), np.zeros(0, dtype=int)
    pooled = roi_gap_batch(query.level(level), boxes, roi_out, sampling)
    return T.l2_normalize(pooled), np.asarray(parents, dtype=int)


def assemble_visual_tokens(class_p: Tensor, neg_p: Tensor | None) -> VisualTokens:
    if neg_p is None or neg_p.shape[0] == 0:
        return VisualTokens(class_p, class_p.shape[0], 0)
    if neg_p.shape[1] != class_p.shape[1]:
        raise ValueError(f"width mismatch: {class_p.shape[1]} vs {neg_p.shape[1]}")
    return VisualTokens(T.concat([class_p, neg_p], axis=0), class_p.shape[0], neg_p.shape[0])
