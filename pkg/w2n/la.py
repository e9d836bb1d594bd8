"""Localization adaptation.

A fresh detector is trained on the current pseudo ground truths. Every step
each pseudo box gets one outer box; the detector regresses it, and decoded
boxes that are confident for the pseudo box's class but still far from the
pseudo box feed an EMA regularization target. Those targets join the loss
with weight ``lambda_re``, pulling the regressor away from boxes that only
cover a discriminative part.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from w2n.config import LaConfig, PgeConfig
from w2n.detector import (
    DetectorParams,
    ImageBatch,
    LossBreakdown,
    build_targets,
    detections,
    gradient_step,
    predict,
)
from w2n.errors import GroundTruthUnavailableError
from w2n.geometry import Box, box_ema, boxes_to_array, iou, iou_matrix, sample_outer_boxes
from w2n.labelgen import Instance, InstanceKey, PseudoDataset, excavate
from w2n.synthworld import World, featurize
from w2n.workers import parallel_map

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["iter", "iou_gt", "iou_pgt", "regularized"]
# Curves follow pseudo boxes with a discriminative-part problem when there are any.
PART_PROBLEM_IOU = 0.5


@dataclass
class RegTarget:
    key: InstanceKey
    ema_box: Box | None = None

    @property
    def initialized(self) -> bool:
        return self.ema_box is not None

    def update(self, decoded: Box, beta: float) -> None:
        # first acceptance seeds the average
        self.ema_box = decoded if self.ema_box is None else box_ema(self.ema_box, decoded, beta)


@dataclass(frozen=True)
class AcceptedBox:
    step: int
    key: InstanceKey
    box: Box
    score: float
    iou_to_pseudo: float


@dataclass
class OuterRegression:
    """Decoded outer boxes of one step, one row per pseudo instance."""

    keys: list[InstanceKey]
    decoded: np.ndarray
    scores: np.ndarray
    accepted: np.ndarray


@dataclass
class CurvePoint:
    iter: int
    iou_gt: float
    iou_pgt: float


@dataclass
class LaResult:
    params: DetectorParams
    reg_targets: dict[InstanceKey, RegTarget]
    accepted: list[AcceptedBox] = field(default_factory=list)
    history: list[LossBreakdown] = field(default_factory=list)
    curve: list[CurvePoint] = field(default_factory=list)


def new_reg_targets(pseudo: PseudoDataset) -> dict[InstanceKey, RegTarget]:
    return {key: RegTarget(key) for key in pseudo.keys()}


def primary_batch(world: World, pseudo: PseudoDataset, tau_assign: float) -> list[ImageBatch]:
    return [
        ImageBatch(image.proposals.features, build_targets(image.proposals.boxes, instances, tau_assign))
        for image, instances in zip(world.images, pseudo.instances)
    ]


def regularization_batch(
    world: World,
    pseudo: PseudoDataset,
    reg_targets: dict[InstanceKey, RegTarget],
    tau_assign: float,
) -> list[ImageBatch]:
    """Initialized targets as full (1, 1) instances carrying their pseudo box's class."""
    batch = []
    for i, (image, instances) in enumerate(zip(world.images, pseudo.instances)):
        targets = [
            Instance(reg_targets[(i, k)].ema_box, inst.label)
            for k, inst in enumerate(instances)
            if reg_targets[(i, k)].initialized
        ]
        batch.append(ImageBatch(image.proposals.features, build_targets(image.proposals.boxes, targets, tau_assign)))
    return batch


def regress_outer_boxes(
    params: DetectorParams,
    world: World,
    pseudo: PseudoDataset,
    cfg: LaConfig,
    rng: np.random.Generator,
) -> OuterRegression:
    """Sample one outer box per pseudo box and regress it for the box's class."""
    keys: list[InstanceKey] = []
    decoded_rows: list[np.ndarray] = []
    score_rows: list[np.ndarray] = []
    for i, (image, instances) in enumerate(zip(world.images, pseudo.instances)):
        if not instances:
            continue
        boxes = boxes_to_array([inst.box for inst in instances])
        labels = np.array([inst.label for inst in instances])
        outer, _ = sample_outer_boxes(boxes, cfg.alpha, rng)
        features = featurize(image.scene, outer, world.config, rng)
        scores, decoded = predict(params, features, outer)
        rows = np.arange(len(instances))
        keys.extend((i, k) for k in range(len(instances)))
        decoded_rows.append(decoded[rows, labels])
        score_rows.append(scores[rows, labels])
    decoded = np.vstack(decoded_rows) if decoded_rows else np.zeros((0, 4))
    scores = np.concatenate(score_rows) if score_rows else np.zeros(0)
    pseudo_boxes = boxes_to_array([pseudo.get(key).box for key in keys])
    overlaps = np.array([iou_matrix(decoded[j], pseudo_boxes[j]).item() for j in range(len(keys))])
    accepted = (scores > cfg.tau_score) & (overlaps < cfg.tau_assign) if keys else np.zeros(0, dtype=bool)
    return OuterRegression(keys=keys, decoded=decoded, scores=scores, accepted=accepted)


def la_step(
    params: DetectorParams,
    world: World,
    pseudo: PseudoDataset,
    reg_targets: dict[InstanceKey, RegTarget],
    cfg: LaConfig,
    rng: np.random.Generator,
    *,
    step: int = 0,
    lambda_re: float | None = None,
    batch: list[ImageBatch] | None = None,
) -> tuple[DetectorParams, OuterRegression, LossBreakdown]:
    """One adaptation step over the whole training world.

    Updates ``reg_targets`` in place from accepted regressions (none before
    ``cfg.warmup_steps``), then takes one gradient step on ``L_fsod`` with
    the initialized targets as regularization instances.
    """
    lambda_re = cfg.lambda_re if lambda_re is None else lambda_re
    outer = regress_outer_boxes(params, world, pseudo, cfg, rng)
    if step < cfg.warmup_steps:
        outer.accepted[:] = False
    for j in np.flatnonzero(outer.accepted):
        reg_targets[outer.keys[j]].update(Box.from_array(outer.decoded[j]), cfg.beta)
    if batch is None:
        batch = primary_batch(world, pseudo, cfg.tau_assign)
    reg_batch = regularization_batch(world, pseudo, reg_targets, cfg.tau_assign) if lambda_re > 0 else None
    params, loss = gradient_step(
        params, batch, cfg.lr, reg_batch=reg_batch, lambda_re=lambda_re, step=step, phase="la"
    )
    return params, outer, loss


def _matched_ground_truth(world: World, pseudo: PseudoDataset) -> dict[InstanceKey, Box | None]:
    """Same-class ground truth with the highest IoU to each pseudo box."""
    if not any(image.scene.objects for image in world.images):
        raise GroundTruthUnavailableError("world carries no ground-truth objects")
    matched: dict[InstanceKey, Box | None] = {}
    for key in pseudo.keys():
        inst = pseudo.get(key)
        own = [o.box for o in world.images[key[0]].scene.objects if o.label == inst.label]
        matched[key] = max(own, key=lambda b: iou(b, inst.box)) if own else None
    return matched


def part_problem_keys(pseudo: PseudoDataset, matched: dict[InstanceKey, Box | None]) -> set[InstanceKey]:
    """Pseudo boxes lying inside their matched ground truth with IoU below ``PART_PROBLEM_IOU``."""
    keys = set()
    for key, gt in matched.items():
        box = pseudo.get(key).box
        if gt is not None and gt.contains(box) and iou(box, gt) < PART_PROBLEM_IOU:
            keys.add(key)
    return keys


def _curve_point(
    step: int,
    outer: OuterRegression,
    pseudo: PseudoDataset,
    matched: dict[InstanceKey, Box | None],
    tracked: set[InstanceKey],
) -> CurvePoint:
    to_gt, to_pgt = [], []
    for j, key in enumerate(outer.keys):
        if tracked and key not in tracked:
            continue
        decoded = Box.from_array(outer.decoded[j])
        gt = matched[key]
        to_gt.append(iou(decoded, gt) if gt is not None else 0.0)
        to_pgt.append(iou(decoded, pseudo.get(key).box))
    return CurvePoint(
        iter=step,
        iou_gt=float(np.mean(to_gt)) if to_gt else 0.0,
        iou_pgt=float(np.mean(to_pgt)) if to_pgt else 0.0,
    )


def localization_adaptation(
    world: World,
    pseudo: PseudoDataset,
    cfg: LaConfig,
    rng: np.random.Generator,
    *,
    lambda_re: float | None = None,
    track_curve: bool = False,
) -> LaResult:
    """Train a freshly initialized detector on ``pseudo`` with EMA regularization."""
    lambda_re = cfg.lambda_re if lambda_re is None else lambda_re
    params = DetectorParams.zeros(world.config.feature_dim, world.config.classes)
    reg_targets = new_reg_targets(pseudo)
    result = LaResult(params=params, reg_targets=reg_targets)
    matched = _matched_ground_truth(world, pseudo) if track_curve else {}
    tracked = part_problem_keys(pseudo, matched)
    batch = primary_batch(world, pseudo, cfg.tau_assign)

    for step in range(cfg.steps):
        params, outer, loss = la_step(
            params, world, pseudo, reg_targets, cfg, rng, step=step, lambda_re=lambda_re, batch=batch
        )
        for j in np.flatnonzero(outer.accepted):
            key = outer.keys[j]
            box = Box.from_array(outer.decoded[j])
            result.accepted.append(
                AcceptedBox(step, key, box, float(outer.scores[j]), iou(box, pseudo.get(key).box))
            )
        result.history.append(loss)
        if track_curve and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            result.curve.append(_curve_point(step, outer, pseudo, matched, tracked))
        logger.debug("la step %d: loss=%.6f accepted=%d", step, loss.total, int(outer.accepted.sum()))

    result.params = params
    n_init = sum(1 for t in reg_targets.values() if t.initialized)
    logger.info(
        "LA finished: %d steps, %d/%d regularization targets initialized, lambda_re=%g",
        cfg.steps, n_init, len(reg_targets), lambda_re,
    )
    return result


def refine_labels(
    params: DetectorParams,
    world: World,
    pge_cfg: PgeConfig,
    threads: int = 1,
) -> PseudoDataset:
    """Regenerate pseudo ground truths from the detector's per-class predictions."""

    def refine(image) -> list[Instance]:
        preds = detections(params, image.proposals.features, image.proposals.boxes)
        return excavate(preds, image.scene.image_label, pge_cfg)

    return PseudoDataset(parallel_map(refine, world.images, threads))


def emit_iou_curves(
    world: World,
    pseudo: PseudoDataset,
    cfg: LaConfig,
    seed: int,
) -> pd.DataFrame:
    """IoU of decoded outer boxes to ground truth and to pseudo ground truth,
    for a run without and a run with the regularization loss.

    Only pseudo boxes with a discriminative-part problem (see
    :func:`part_problem_keys`) are averaged; without any, all pseudo boxes are.
    """
    frames = []
    for regularized, lambda_re in ((0, 0.0), (1, cfg.lambda_re)):
        result = localization_adaptation(
            world, pseudo, cfg, np.random.default_rng(seed), lambda_re=lambda_re, track_curve=True
        )
        frames.append(
            pd.DataFrame(
                {
                    "iter": [p.iter for p in result.curve],
                    "iou_gt": [p.iou_gt for p in result.curve],
                    "iou_pgt": [p.iou_pgt for p in result.curve],
                    "regularized": regularized,
                },
                columns=CURVE_COLUMNS,
            )
        )
    return pd.concat(frames, ignore_index=True)
