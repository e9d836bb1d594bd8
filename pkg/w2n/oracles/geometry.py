"""Pure-Python references for IoU and NMS."""
from __future__ import annotations

from collections.abc import Iterator
from typing import Any

import numpy as np

from w2n.geometry import Box, iou, nms
from w2n.oracles.base import Oracle

NMS_THRESHOLDS = (0.3, 0.5, 0.7)


def reference_iou(a: list[float], b: list[float]) -> float:
    """IoU of two ``[x, y, w, h]`` lists, computed from corners."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def reference_nms(boxes: list[list[float]], labels: list[int], scores: list[float], t_nms: float) -> list[int]:
    """Indices kept by greedy per-class suppression, O(n^2) per pick."""
    kept = []
    alive = set(range(len(boxes)))
    while alive:
        top = min(alive, key=lambda i: (-scores[i], i))
        kept.append(top)
        alive.discard(top)
        alive = {
            i for i in alive
            if labels[i] != labels[top] or reference_iou(boxes[i], boxes[top]) <= t_nms
        }
    return kept


def _as_rows(kept: list[tuple[list[float], int, float]]) -> list[tuple]:
    return sorted((tuple(b), label, score) for b, label, score in kept)


class NmsOracle(Oracle):
    name = "nms"

    def __init__(self, num_cases: int = 10_000, max_boxes: int = 8):
        self.num_cases = num_cases
        self.max_boxes = max_boxes

    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        for _ in range(self.num_cases):
            n = int(rng.integers(1, self.max_boxes + 1))
            centers = rng.uniform(10.0, 30.0, size=(n, 2))
            sizes = rng.uniform(4.0, 16.0, size=(n, 2))
            yield {
                "boxes": np.hstack([centers, sizes]).tolist(),
                "labels": rng.integers(0, 2, size=n).tolist(),
                # one decimal so equal scores occur
                "scores": np.round(rng.uniform(0.0, 1.0, size=n), 1).tolist(),
                "t_nms": float(rng.choice(NMS_THRESHOLDS)),
            }

    def reference(self, case: dict[str, Any]) -> Any:
        kept = reference_nms(case["boxes"], case["labels"], case["scores"], case["t_nms"])
        return _as_rows([(case["boxes"][i], case["labels"][i], case["scores"][i]) for i in kept])

    def implementation(self, case: dict[str, Any]) -> Any:
        dets = [
            (Box(*b), label, score) for b, label, score in zip(case["boxes"], case["labels"], case["scores"])
        ]
        kept = nms(dets, case["t_nms"])
        return _as_rows([([d.box.x, d.box.y, d.box.w, d.box.h], d.label, d.score) for d in kept])


class IouOracle(Oracle):
    name = "iou"
    tolerance = 1e-9

    def __init__(self, num_cases: int = 1_000):
        self.num_cases = num_cases

    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        for _ in range(self.num_cases):
            pair = np.hstack([rng.uniform(0.0, 20.0, size=(2, 2)), rng.uniform(1.0, 10.0, size=(2, 2))])
            yield {"a": pair[0].tolist(), "b": pair[1].tolist()}

    def reference(self, case: dict[str, Any]) -> Any:
        return [reference_iou(case["a"], case["b"]), reference_iou(case["b"], case["a"])]

    def implementation(self, case: dict[str, Any]) -> Any:
        a, b = Box(*case["a"]), Box(*case["b"])
        return [iou(a, b), iou(b, a)]
