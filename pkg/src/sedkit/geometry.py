"""Axis-aligned box algebra.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates with no +1
convention, so ``area = (x2 - x1) * (y2 - y1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from sedkit.backend import kernels


class InvalidBoxError(ValueError):
    pass


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


def as_box(b: Sequence[float]) -> Box:
    """Coerce to :class:`Box`, rejecting degenerate or non-finite boxes."""
    if len(b) != 4:
        raise InvalidBoxError(f"box needs 4 coordinates, got {len(b)}")
    box = Box(*(float(v) for v in b))
    if not all(np.isfinite(box)):
        raise InvalidBoxError(f"non-finite box {tuple(box)}")
    if not (box.x2 > box.x1 and box.y2 > box.y1):
        raise InvalidBoxError(f"degenerate box {tuple(box)}")
    return box


def check_boxes(arr) -> np.ndarray:
    """Validate an (N, 4) array of boxes and return it as contiguous float64."""
    arr = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise InvalidBoxError("non-finite box coordinates")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise InvalidBoxError("degenerate box in array")
    return arr


def iou(a, b) -> float:
    a, b = as_box(a), as_box(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def giou(a, b) -> float:
    """Generalized IoU: ``iou - |E minus (a U b)| / |E|`` with E the enclosing box."""
    a, b = as_box(a), as_box(b)
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (hull - union) / hull


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a, b = check_boxes(a), check_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return kernels.box_iou_matrix(a, b)


def giou_matrix(a, b) -> np.ndarray:
    a, b = check_boxes(a), check_boxes(b)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    hull = ((np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0]))
            * (np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])))
    return inter / union - (hull - union) / hull


def nms_indices(boxes, scores, labels, thr: float) -> np.ndarray:
    """Class-wise greedy NMS over arrays; returns kept indices by score.

    Ties in score are visited in original index order.
    """
    if not 0.0 <= thr <= 1.0:
        raise ValueError(f"nms threshold must be in [0, 1], got {thr}")
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite detection scores")
    boxes = check_boxes(boxes)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return kernels.nms_sorted(boxes, labels, order, float(thr))


def nms(dets: Sequence[Detection], thr: float) -> list[Detection]:
    if len(dets) == 0:
        return []
    keep = nms_indices([d.box for d in dets], [d.score for d in dets],
                       [d.class_id for d in dets], thr)
    return [dets[i] for i in keep]


def encode_boxes(gt, anchors) -> np.ndarray:
    """Anchor-relative deltas ``(dx, dy, log dw, log dh)`` for (N, 4) arrays."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    gw, gh = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise InvalidBoxError("encode needs positive gt width and height")
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    dx = ((gt[..., 0] + gt[..., 2]) - (anchors[..., 0] + anchors[..., 2])) / (2 * aw)
    dy = ((gt[..., 1] + gt[..., 3]) - (anchors[..., 1] + anchors[..., 3])) / (2 * ah)
    return np.stack([dx, dy, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(deltas, anchors) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite regression deltas")
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    cx = (anchors[..., 0] + anchors[..., 2]) / 2 + deltas[..., 0] * aw
    cy = (anchors[..., 1] + anchors[..., 3]) / 2 + deltas[..., 1] * ah
    w = aw * np.exp(deltas[..., 2])
    h = ah * np.exp(deltas[..., 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def encode_box(gt, anchor) -> tuple[float, float, float, float]:
    return tuple(encode_boxes(as_box(gt), as_box(anchor)).tolist())


def decode_box(delta, anchor) -> Box:
    return Box(*decode_boxes(delta, as_box(anchor)).tolist())


def rescale_box(b, factor: float) -> Box:
    if not factor > 0:
        raise ValueError(f"rescale factor must be positive, got {factor}")
    b = as_box(b)
    return Box(b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor)
