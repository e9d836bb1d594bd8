"""Box geometry: IoU, per-class NMS, delta coding, outer-box sampling, box EMA.

Boxes use the center/size parameterization ``[x, y, w, h]``. Array helpers
take ``(N, 4)`` arrays in that layout; :class:`Box` is the scalar form used
at module boundaries.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SQRT3 = math.sqrt(3.0)
OUTER_SCALE_RANGE = (SQRT3, 2.0)
# Largest log-scale delta applied when decoding (log(1000 / 16)).
DELTA_CLIP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.x - self.w / 2,
            self.y - self.h / 2,
            self.x + self.w / 2,
            self.y + self.h / 2,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> Box:
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, row: Sequence[float]) -> Box:
        return cls(float(row[0]), float(row[1]), float(row[2]), float(row[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def contains(self, other: Box) -> bool:
        ax1, ay1, ax2, ay2 = self.corners
        bx1, by1, bx2, by2 = other.corners
        return ax1 <= bx1 and ay1 <= by1 and bx2 <= ax2 and by2 <= ay2


@dataclass(frozen=True)
class BoxDelta:
    """Offsets ``(tx, ty)`` in anchor units and log scale factors ``(tw, th)``.

    Decoding clips ``tw`` and ``th`` to ``[-DELTA_CLIP, DELTA_CLIP]``, so
    ``decode(encode(b, a), a) == b`` only while each side ratio ``b/a`` lies in
    ``[16/1000, 1000/16]``; beyond that the decoded side saturates.
    """

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass(frozen=True)
class OuterBoxSample:
    delta_x: float
    delta_y: float
    delta_w: float
    delta_h: float
    result: Box


class Detection(NamedTuple):
    box: Box
    label: int
    score: float


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box.from_array(row) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4)]


def to_corners(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    half = arr[..., 2:4] / 2
    return np.concatenate([arr[..., 0:2] - half, arr[..., 0:2] + half], axis=-1)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    """Intersection over union; touching boxes have IoU 0.

    Areas come from the same corner differences as the intersection, so
    ``iou(a, a) == 1.0`` exactly.
    """
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` center-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    ka, kb = to_corners(a), to_corners(b)
    area_a = (ka[:, 2] - ka[:, 0]) * (ka[:, 3] - ka[:, 1])
    area_b = (kb[:, 2] - kb[:, 0]) * (kb[:, 3] - kb[:, 1])
    ca, cb = ka[:, None, :], kb[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms(dets: Sequence[tuple[Box, int, float]], t_nms: float) -> list[Detection]:
    """Per-class greedy suppression.

    Keeps the highest-scoring box, drops same-class boxes with IoU > t_nms,
    repeats. Equal scores keep the lower input index first. Output is grouped
    by ascending class, descending score within a class.
    """
    dets = [Detection(*d) for d in dets]
    kept: list[Detection] = []
    for label in sorted({d.label for d in dets}):
        idx = [i for i, d in enumerate(dets) if d.label == label]
        order = sorted(idx, key=lambda i: (-dets[i].score, i))
        boxes = boxes_to_array([dets[i].box for i in order])
        overlaps = iou_matrix(boxes, boxes)
        alive = np.ones(len(order), dtype=bool)
        for j in range(len(order)):
            if not alive[j]:
                continue
            kept.append(dets[order[j]])
            alive[j + 1:] &= overlaps[j, j + 1:] <= t_nms
    return kept


# ---------------------------------------------------------------------------
# Delta coding
# ---------------------------------------------------------------------------

def encode_deltas(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Normalized center offsets and log scale factors of ``boxes`` w.r.t. ``anchors``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    tx = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    ty = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    tw = np.log(boxes[..., 2] / anchors[..., 2])
    th = np.log(boxes[..., 3] / anchors[..., 3])
    return np.stack([tx, ty, tw, th], axis=-1)


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    x = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    y = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    w = anchors[..., 2] * np.exp(np.clip(deltas[..., 2], -DELTA_CLIP, DELTA_CLIP))
    h = anchors[..., 3] * np.exp(np.clip(deltas[..., 3], -DELTA_CLIP, DELTA_CLIP))
    return np.stack([x, y, w, h], axis=-1)


def encode(box: Box, anchor: Box) -> BoxDelta:
    t = encode_deltas(box.as_array(), anchor.as_array())
    return BoxDelta(float(t[0]), float(t[1]), float(t[2]), float(t[3]))


def decode(delta: BoxDelta, anchor: Box) -> Box:
    return Box.from_array(decode_deltas(delta.as_array(), anchor.as_array()))


# ---------------------------------------------------------------------------
# Outer boxes and box EMA
# ---------------------------------------------------------------------------

def outer_box(b: Box, delta_x: float, delta_y: float, delta_w: float, delta_h: float) -> Box:
    """``[x + dx*w, y + dy*h, w*dw, h*dh]`` for a fixed transformation."""
    return Box(b.x + delta_x * b.w, b.y + delta_y * b.h, b.w * delta_w, b.h * delta_h)


def sample_outer_boxes(
    boxes: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = OUTER_SCALE_RANGE,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one transformed box per row of ``boxes``.

    Returns ``(result, deltas)`` where ``deltas`` rows are
    ``(delta_x, delta_y, delta_w, delta_h)``. Shifts come from
    ``U(-alpha, alpha)`` and scales from ``U(*scale_range)``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    shifts = rng.uniform(-alpha, alpha, size=(n, 2))
    scales = rng.uniform(scale_range[0], scale_range[1], size=(n, 2))
    result = np.empty_like(boxes)
    result[:, 0] = boxes[:, 0] + shifts[:, 0] * boxes[:, 2]
    result[:, 1] = boxes[:, 1] + shifts[:, 1] * boxes[:, 3]
    result[:, 2] = boxes[:, 2] * scales[:, 0]
    result[:, 3] = boxes[:, 3] * scales[:, 1]
    return result, np.concatenate([shifts, scales], axis=1)


def sample_outer_box(
    b: Box,
    alpha: float,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = OUTER_SCALE_RANGE,
) -> OuterBoxSample:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    result, deltas = sample_outer_boxes(b.as_array(), alpha, rng, scale_range)
    dx, dy, dw, dh = (float(v) for v in deltas[0])
    return OuterBoxSample(dx, dy, dw, dh, Box.from_array(result[0]))


def box_ema(prev: Box, current: Box, beta: float) -> Box:
    """Componentwise ``beta * prev + (1 - beta) * current``."""
    keep = 1.0 - beta
    return Box(
        beta * prev.x + keep * current.x,
        beta * prev.y + keep * current.y,
        beta * prev.w + keep * current.w,
        beta * prev.h + keep * current.h,
    )
