"""Pseudo ground-truth excavation (PGE).

Turns raw detector predictions into pseudo ground truths: class filter by
the image label, per-class NMS, score threshold, reinstatement of missing
present classes, then fusion of overlapping same-class boxes to a fixpoint.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from w2n.config import PgeConfig
from w2n.geometry import Box, Detection, iou, nms
from w2n.models import BoxRecord, ImageRecord, InstanceRecord

logger = logging.getLogger(__name__)

InstanceKey = tuple[int, int]


@dataclass(frozen=True)
class Instance:
    box: Box
    label: int
    lambda_cls: int = 1
    lambda_reg: int = 1

    def __post_init__(self) -> None:
        if self.lambda_cls not in (0, 1) or self.lambda_reg not in (0, 1):
            raise ValueError("task tags must be 0 or 1")
        if self.lambda_cls + self.lambda_reg < 1:
            raise ValueError("an instance needs at least one active task tag")

    def with_tags(self, lambda_cls: int, lambda_reg: int) -> Instance:
        return Instance(self.box, self.label, lambda_cls, lambda_reg)


@dataclass
class PseudoDataset:
    """Current pseudo ground truths, one list per image (same order as the world)."""

    instances: list[list[Instance]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def keys(self) -> list[InstanceKey]:
        return [(i, k) for i, per_image in enumerate(self.instances) for k in range(len(per_image))]

    def get(self, key: InstanceKey) -> Instance:
        return self.instances[key[0]][key[1]]

    @property
    def num_instances(self) -> int:
        return sum(len(per_image) for per_image in self.instances)


def _enclosing(a: Box, b: Box) -> Box:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    return Box.from_corners(min(ax1, bx1), min(ay1, by1), max(ax2, bx2), max(ay2, by2))


def fuse(dets: Sequence[Detection], t_fusion: float) -> list[Detection]:
    """Merge same-class pairs with IoU >= t_fusion into their enclosing box
    (score = max), highest-IoU pair first, until no such pair remains."""
    dets = list(dets)
    while True:
        best: tuple[float, int, int] | None = None
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                if dets[i].label != dets[j].label:
                    continue
                overlap = iou(dets[i].box, dets[j].box)
                if overlap >= t_fusion and (best is None or overlap > best[0]):
                    best = (overlap, i, j)
        if best is None:
            return dets
        _, i, j = best
        merged = Detection(
            _enclosing(dets[i].box, dets[j].box), dets[i].label, max(dets[i].score, dets[j].score)
        )
        dets[i] = merged
        del dets[j]


def excavate(
    preds: Sequence[tuple[Box, int, float]],
    image_label: np.ndarray | Sequence[int],
    cfg: PgeConfig,
) -> list[Instance]:
    present = {int(c) for c in np.flatnonzero(np.asarray(image_label))}
    preds = [Detection(*p) for p in preds]
    if not preds:
        if present:
            logger.warning("PGE got no predictions for an image with classes %s", sorted(present))
        return []

    candidates = [d for d in preds if d.label in present]
    kept = [d for d in nms(candidates, cfg.t_nms) if d.score >= cfg.t_score]
    for label in sorted(present):
        if any(d.label == label for d in kept):
            continue
        own = [d for d in candidates if d.label == label]
        if own:
            # max() keeps the first of equal scores
            kept.append(max(own, key=lambda d: d.score))
    fused = fuse(kept, cfg.t_fusion)
    fused.sort(key=lambda d: (d.label, -d.score))
    return [Instance(d.box, d.label) for d in fused]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def instance_to_record(inst: Instance) -> InstanceRecord:
    return InstanceRecord(
        box=BoxRecord.from_box(inst.box),
        label=inst.label,
        lambda_cls=inst.lambda_cls,
        lambda_reg=inst.lambda_reg,
    )


def instance_from_record(record: InstanceRecord) -> Instance:
    return Instance(record.box.to_box(), record.label, record.lambda_cls, record.lambda_reg)


def save_pseudo(records: Sequence[ImageRecord], pseudo: PseudoDataset, path: str | Path) -> Path:
    """Write world records with their pseudo instances attached."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record, per_image in zip(records, pseudo.instances):
            out = record.model_copy(update={"instances": [instance_to_record(i) for i in per_image]})
            f.write(out.model_dump_json() + "\n")
    return path


def load_pseudo(path: str | Path) -> tuple[list[ImageRecord], PseudoDataset]:
    records: list[ImageRecord] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(ImageRecord.model_validate_json(line))
    pseudo = PseudoDataset([[instance_from_record(r) for r in (rec.instances or [])] for rec in records])
    return records, pseudo
