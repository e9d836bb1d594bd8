"""Small-loss dataset splitting.

Pseudo instances (or whole images) are ranked by the loss the adapted
detector still assigns to them; the low-loss share becomes the labeled set.
The two-tasks variant ranks classification and regression separately and
tags each instance with the tasks it is trusted for.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from w2n.config import SplitConfig
from w2n.detector import DetectorParams, build_targets, proposal_losses
from w2n.errors import GroundTruthUnavailableError
from w2n.geometry import Box, iou
from w2n.labelgen import InstanceKey, PseudoDataset
from w2n.synthworld import World
from w2n.workers import parallel_map

logger = logging.getLogger(__name__)

AUDIT_COLUMNS = ["key", "mode", "total", "cls_loss", "reg_loss", "lambda_cls", "lambda_reg", "labeled"]
IDEAL_MIN_IOU = 0.5
_EPS = 1e-9

RecordKey = tuple[int, ...]


@dataclass
class LossRecord:
    """Mean loss components over the foreground proposals assigned to ``key``.

    ``key`` is ``(image, instance)`` for instance records and ``(image,)``
    for image records. Keys without a foreground proposal carry ``inf``.
    """

    key: RecordKey
    members: list[InstanceKey]
    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float

    @property
    def cls_loss(self) -> float:
        return self.rpn_cls + self.roi_cls

    @property
    def reg_loss(self) -> float:
        return self.rpn_reg + self.roi_reg

    @property
    def total(self) -> float:
        return self.cls_loss + self.reg_loss


@dataclass
class SplitResult:
    mode: str
    p: float
    labeled: dict[InstanceKey, tuple[int, int]] = field(default_factory=dict)
    unlabeled: list[int] = field(default_factory=list)
    excluded: set[InstanceKey] = field(default_factory=set)

    def labeled_dataset(self, pseudo: PseudoDataset) -> PseudoDataset:
        """Labeled instances with their task tags, per image."""
        return PseudoDataset([
            [inst.with_tags(*self.labeled[(i, k)]) for k, inst in enumerate(per_image) if (i, k) in self.labeled]
            for i, per_image in enumerate(pseudo.instances)
        ])

    def unlabeled_boxes(self, pseudo: PseudoDataset) -> list[list[Box]]:
        """Boxes of instances left out of the labeled set, per image."""
        return [
            [inst.box for k, inst in enumerate(per_image) if (i, k) not in self.labeled]
            for i, per_image in enumerate(pseudo.instances)
        ]

    def labeled_fraction(self, pseudo: PseudoDataset) -> float:
        total = pseudo.num_instances
        return len(self.labeled) / total if total else 0.0


# ---------------------------------------------------------------------------
# Loss accumulation
# ---------------------------------------------------------------------------

def _mean_components(losses: np.ndarray) -> tuple[float, float, float, float]:
    if len(losses) == 0:
        return (math.inf,) * 4
    mean = losses[:, :4].mean(axis=0)
    return float(mean[0]), float(mean[1]), float(mean[2]), float(mean[3])


def accumulate_losses(
    params: DetectorParams,
    world: World,
    pseudo: PseudoDataset,
    tau_assign: float,
    *,
    by_image: bool = False,
    threads: int = 1,
) -> list[LossRecord]:
    """Forward-only loss records per instance (or per image with ``by_image``)."""

    def per_image(i: int) -> list[LossRecord]:
        image, instances = world.images[i], pseudo.instances[i]
        if not instances:
            return []
        targets = build_targets(image.proposals.boxes, instances, tau_assign)
        losses = proposal_losses(params, image.proposals.features, targets)
        members = [(i, k) for k in range(len(instances))]
        if by_image:
            return [LossRecord((i,), members, *_mean_components(losses[targets.fg]))]
        return [
            LossRecord((i, k), [(i, k)], *_mean_components(losses[targets.fg & (targets.instance == k)]))
            for k in range(len(instances))
        ]

    records = [r for chunk in parallel_map(per_image, list(range(len(world))), threads) for r in chunk]
    missing = [r.key for r in records if not math.isfinite(r.total)]
    if missing:
        logger.warning("%d of %d records have no foreground proposal and cannot be labeled", len(missing), len(records))
    return records


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def top_count(p: float, n: int) -> int:
    return max(1, math.floor(p * n + _EPS))


def select_small_loss(keys: Sequence[RecordKey], values: Sequence[float], p: float) -> list[RecordKey]:
    """The ``max(1, floor(p * N))`` smallest finite values, ties by key order."""
    finite = [(v, key) for key, v in zip(keys, values) if math.isfinite(v)]
    return [key for _, key in sorted(finite)][: top_count(p, len(keys))]


def split(records: Sequence[LossRecord], mode: str, p: float) -> SplitResult:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if not records:
        raise ValueError("cannot split an empty record list")
    keys = [r.key for r in records]
    by_key = {r.key: r for r in records}
    result = SplitResult(mode=mode, p=p)
    images = {key[0] for r in records for key in r.members}

    if mode in ("image", "instance"):
        for key in select_small_loss(keys, [r.total for r in records], p):
            for member in by_key[key].members:
                result.labeled[member] = (1, 1)
    elif mode == "two_tasks":
        cls_top = set(select_small_loss(keys, [r.cls_loss for r in records], p))
        reg_top = set(select_small_loss(keys, [r.reg_loss for r in records], p))
        for key in keys:
            if key in cls_top or key in reg_top:
                result.labeled[key] = (int(key in cls_top), int(key in reg_top))
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    result.labeled = dict(sorted(result.labeled.items()))
    result.unlabeled = sorted(images)
    return result


def ideal_split(world: World, pseudo: PseudoDataset) -> SplitResult:
    """Keep instances that match a same-class ground truth at IoU > 0.5; drop the rest."""
    if not any(image.scene.objects for image in world.images):
        raise GroundTruthUnavailableError("ideal split needs ground-truth objects")
    result = SplitResult(mode="ideal", p=1.0)
    for key in pseudo.keys():
        inst = pseudo.get(key)
        gt = [o.box for o in world.images[key[0]].scene.objects if o.label == inst.label]
        if any(iou(inst.box, b) > IDEAL_MIN_IOU for b in gt):
            result.labeled[key] = (1, 1)
        else:
            result.excluded.add(key)
    result.unlabeled = list(range(len(world)))
    return result


def split_dataset(
    params: DetectorParams,
    world: World,
    pseudo: PseudoDataset,
    cfg: SplitConfig,
    threads: int = 1,
) -> tuple[SplitResult, list[LossRecord]]:
    """Split ``pseudo`` with the configured mode; records are per instance except in image mode."""
    records = accumulate_losses(
        params, world, pseudo, cfg.tau_assign, by_image=cfg.mode == "image", threads=threads
    )
    if cfg.mode == "ideal":
        result = ideal_split(world, pseudo)
    elif records:
        result = split(records, cfg.mode, cfg.p)
    else:
        logger.warning("no pseudo instances to split")
        result = SplitResult(mode=cfg.mode, p=cfg.p, unlabeled=list(range(len(world))))
    logger.info(
        "Split (%s, p=%g): %d/%d instances labeled, %d cls-only, %d reg-only",
        cfg.mode, cfg.p, len(result.labeled), pseudo.num_instances,
        sum(1 for t in result.labeled.values() if t == (1, 0)),
        sum(1 for t in result.labeled.values() if t == (0, 1)),
    )
    return result, records


def _format_key(key: RecordKey) -> str:
    return ":".join(str(k) for k in key)


def split_audit(records: Sequence[LossRecord], result: SplitResult) -> pd.DataFrame:
    rows = []
    for r in records:
        tags = [result.labeled.get(m, (0, 0)) for m in r.members]
        lambda_cls = max((t[0] for t in tags), default=0)
        lambda_reg = max((t[1] for t in tags), default=0)
        rows.append({
            "key": _format_key(r.key),
            "mode": result.mode,
            "total": r.total,
            "cls_loss": r.cls_loss,
            "reg_loss": r.reg_loss,
            "lambda_cls": lambda_cls,
            "lambda_reg": lambda_reg,
            "labeled": int(lambda_cls + lambda_reg > 0),
        })
    return pd.DataFrame(rows, columns=AUDIT_COLUMNS)
