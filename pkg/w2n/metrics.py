"""Detection metrics: VOC-style mAP (all-points interpolation) and CorLoc."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from w2n.config import EvalConfig
from w2n.detector import DetectorParams, detections
from w2n.errors import GroundTruthUnavailableError
from w2n.geometry import Detection, boxes_to_array, iou_matrix, nms
from w2n.synthworld import LabeledBox, World
from w2n.workers import parallel_map

logger = logging.getLogger(__name__)


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope, summed where recall changes."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def class_ap(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[LabeledBox]],
    label: int,
    iou_threshold: float = 0.5,
) -> float | None:
    """AP for one class, or None when the class has no ground truth."""
    gt_boxes = [boxes_to_array([g.box for g in per_image if g.label == label]) for per_image in gts]
    n_gt = sum(len(b) for b in gt_boxes)
    if n_gt == 0:
        return None
    ranked = sorted(
        ((d.score, i, d.box) for i, per_image in enumerate(dets) for d in per_image if d.label == label),
        # equal scores order by image index, then box
        key=lambda item: (-item[0], item[1], item[2].x, item[2].y, item[2].w, item[2].h),
    )
    matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(ranked))
    for rank, (_, i, box) in enumerate(ranked):
        if len(gt_boxes[i]) == 0:
            continue
        overlaps = iou_matrix(box.as_array(), gt_boxes[i])[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not matched[i][best]:
            matched[i][best] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return voc_ap(recall, precision)


def class_aps(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[LabeledBox]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """AP of every class that has at least one ground truth."""
    aps = {c: class_ap(dets, gts, c, iou_threshold) for c in range(num_classes)}
    return {c: ap for c, ap in aps.items() if ap is not None}


def toy_map(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[LabeledBox]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> float:
    """Mean AP over classes with at least one ground truth."""
    aps = class_aps(dets, gts, num_classes, iou_threshold)
    if not aps:
        raise GroundTruthUnavailableError("mAP needs at least one ground-truth box")
    return float(np.mean(list(aps.values())))


@dataclass
class MapBreakdown:
    """Per-class AP with means over part classes and over the other classes.

    A group mean is None when none of its classes has ground truth.
    """

    class_ap: dict[int, float]
    part_class_map: float | None
    other_class_map: float | None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.class_ap.values())))


def map_breakdown(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[LabeledBox]],
    num_classes: int,
    part_classes: Sequence[int],
    iou_threshold: float = 0.5,
) -> MapBreakdown:
    aps = class_aps(dets, gts, num_classes, iou_threshold)
    if not aps:
        raise GroundTruthUnavailableError("mAP needs at least one ground-truth box")
    parts = set(part_classes)

    def group_mean(values: list[float]) -> float | None:
        return float(np.mean(values)) if values else None

    return MapBreakdown(
        class_ap=aps,
        part_class_map=group_mean([ap for c, ap in aps.items() if c in parts]),
        other_class_map=group_mean([ap for c, ap in aps.items() if c not in parts]),
    )


def corloc(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[LabeledBox]],
    iou_threshold: float = 0.5,
) -> float:
    """Share of (image, present class) pairs whose top detection of that class
    hits a ground truth of the class."""
    hits, pairs = 0, 0
    for per_image, objects in zip(dets, gts):
        for label in sorted({o.label for o in objects}):
            pairs += 1
            own = [d for d in per_image if d.label == label]
            if not own:
                continue
            top = max(own, key=lambda d: d.score)
            gt = boxes_to_array([o.box for o in objects if o.label == label])
            if iou_matrix(top.box.as_array(), gt).max() >= iou_threshold:
                hits += 1
    return hits / pairs if pairs else 0.0


def detect_world(
    params: DetectorParams,
    world: World,
    cfg: EvalConfig,
    threads: int = 1,
) -> list[list[Detection]]:
    """Per-class NMS on every (proposal, class) prediction, best ``max_detections`` kept."""

    def detect(image) -> list[Detection]:
        kept = nms(detections(params, image.proposals.features, image.proposals.boxes), cfg.nms_threshold)
        kept.sort(key=lambda d: -d.score)
        return kept[: cfg.max_detections]

    return parallel_map(detect, world.images, threads)


def ground_truth(world: World) -> list[list[LabeledBox]]:
    return [image.scene.objects for image in world.images]


def evaluate(
    params: DetectorParams,
    world: World,
    cfg: EvalConfig,
    threads: int = 1,
) -> tuple[MapBreakdown, float]:
    """``(map breakdown, corloc)`` of ``params`` on ``world``."""
    dets = detect_world(params, world, cfg, threads)
    gts = ground_truth(world)
    return (
        map_breakdown(dets, gts, world.config.classes, world.config.part_classes, cfg.iou_threshold),
        corloc(dets, gts, cfg.iou_threshold),
    )
