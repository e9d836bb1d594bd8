"""Teacher-student semi-supervised training on a split pseudo dataset.

The student learns from the labeled instances with their task tags and from
teacher pseudo labels on unlabeled images. Pseudo boxes always supervise
classification; they supervise regression only when the teacher's
regression is stable under small box jitter. The teacher follows the
student by EMA after every step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from w2n.config import SsodConfig, WorldConfig
from w2n.detector import (
    DetectorParams,
    ImageBatch,
    LossBreakdown,
    build_targets,
    loss_and_grad,
    predict,
    sample_indices,
)
from w2n.errors import TrainingDivergedError
from w2n.geometry import Box, Detection, nms, sample_outer_boxes
from w2n.labelgen import Instance, PseudoDataset
from w2n.split import SplitResult
from w2n.synthworld import SceneImage, World, featurize

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "l_sup", "l_unsup", "l_total", "n_pseudo", "n_reg_ok"]


class PseudoLabel(NamedTuple):
    instance: Instance
    reg_ok: bool
    deviation: float


@dataclass
class SsodResult:
    student: DetectorParams
    teacher: DetectorParams
    log: pd.DataFrame
    # student parameters after every step, kept only on request
    trajectory: list[DetectorParams] = field(default_factory=list)


def ema_update(teacher: DetectorParams, student: DetectorParams, momentum: float) -> DetectorParams:
    """``momentum * teacher + (1 - momentum) * student``, weight by weight."""
    return teacher.combine(student, momentum, 1.0 - momentum)


# ---------------------------------------------------------------------------
# Supervised branch
# ---------------------------------------------------------------------------

def supervised_batch(
    world: World,
    labeled: PseudoDataset,
    ignore: list[list[Box]],
    tau_assign: float,
) -> list[ImageBatch]:
    """One entry per image holding at least one labeled instance.

    Proposals matching an instance left out of the labeled set are ignored.
    """
    batch = []
    for image, instances, skip in zip(world.images, labeled.instances, ignore):
        if instances:
            targets = build_targets(image.proposals.boxes, instances, tau_assign, ignore=skip)
            batch.append(ImageBatch(image.proposals.features, targets))
    return batch


def supervised_loss(student: DetectorParams, batch: list[ImageBatch]) -> tuple[LossBreakdown, DetectorParams]:
    """Tag-gated loss averaged over the labeled images; zero for an empty batch."""
    return loss_and_grad(student, batch)


# ---------------------------------------------------------------------------
# Unsupervised branch
# ---------------------------------------------------------------------------

def jitter_deviation(
    teacher: DetectorParams,
    image: SceneImage,
    world_cfg: WorldConfig,
    det: Detection,
    cfg: SsodConfig,
    rng: np.random.Generator,
) -> float:
    """Mean over coordinates of the std of decoded jittered boxes, over box size."""
    anchor = det.box.as_array()
    jittered, _ = sample_outer_boxes(
        np.repeat(anchor[None, :], cfg.jitter_samples, axis=0), cfg.jitter_shift, rng, cfg.jitter_scale
    )
    features = featurize(image.scene, jittered, world_cfg, rng)
    _, decoded = predict(teacher, features, jittered)
    spread = decoded[:, det.label, :].std(axis=0)
    return float(np.mean(spread / np.array([det.box.w, det.box.h, det.box.w, det.box.h])))


def pseudo_label(
    teacher: DetectorParams,
    image: SceneImage,
    world_cfg: WorldConfig,
    cfg: SsodConfig,
    rng: np.random.Generator,
) -> list[PseudoLabel]:
    scores, decoded = predict(teacher, image.proposals.features, image.proposals.boxes)
    rows, cols = np.nonzero(scores >= cfg.pseudo_score_threshold)
    dets = [Detection(Box.from_array(decoded[i, c]), int(c), float(scores[i, c])) for i, c in zip(rows, cols)]
    labels = []
    for det in nms(dets, cfg.nms_threshold):
        deviation = jitter_deviation(teacher, image, world_cfg, det, cfg, rng)
        reg_ok = deviation < cfg.jitter_variance_threshold
        labels.append(PseudoLabel(Instance(det.box, det.label, 1, int(reg_ok)), reg_ok, deviation))
    return labels


def unsupervised_batch(
    teacher: DetectorParams,
    world: World,
    indices: np.ndarray,
    cfg: SsodConfig,
    rng: np.random.Generator,
) -> tuple[list[ImageBatch], int, int]:
    """Student inputs (noised features) against teacher pseudo labels."""
    batch, n_pseudo, n_reg_ok = [], 0, 0
    for i in indices:
        image = world.images[i]
        labels = pseudo_label(teacher, image, world.config, cfg, rng)
        n_pseudo += len(labels)
        n_reg_ok += sum(1 for lab in labels if lab.reg_ok)
        features = image.proposals.features
        noisy = features + rng.uniform(-cfg.feature_noise, cfg.feature_noise, size=features.shape)
        targets = build_targets(image.proposals.boxes, [lab.instance for lab in labels], cfg.tau_assign)
        batch.append(ImageBatch(noisy, targets))
    return batch, n_pseudo, n_reg_ok


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def ssod_train(
    student: DetectorParams,
    world: World,
    pseudo: PseudoDataset,
    split_result: SplitResult,
    cfg: SsodConfig,
    rng: np.random.Generator,
    *,
    keep_trajectory: bool = False,
) -> SsodResult:
    """``L_sup + lambda_u * L_unsup`` with an EMA teacher started from ``student``.

    The supervised and unsupervised branches draw from separate child
    streams of ``rng``; the unsupervised branch is skipped entirely when
    ``lambda_u`` is 0.
    """
    sup_rng, unsup_rng = rng.spawn(2)
    teacher = student.copy()
    labeled = split_result.labeled_dataset(pseudo)
    sup_all = supervised_batch(world, labeled, split_result.unlabeled_boxes(pseudo), cfg.tau_assign)
    pool = np.array(split_result.unlabeled, dtype=np.int64)
    rows = []
    trajectory: list[DetectorParams] = []
    if not sup_all:
        logger.warning("no labeled images: supervised loss is zero")

    for step in range(cfg.steps):
        pick = sample_indices(len(sup_all), cfg.labeled_batch, sup_rng)
        sup_loss, grad = supervised_loss(student, [sup_all[i] for i in pick])
        l_unsup, n_pseudo, n_reg_ok = 0.0, 0, 0
        if cfg.lambda_u > 0 and len(pool):
            chosen = pool[sample_indices(len(pool), cfg.unlabeled_batch, unsup_rng)]
            unsup, n_pseudo, n_reg_ok = unsupervised_batch(teacher, world, chosen, cfg, unsup_rng)
            unsup_loss, unsup_grad = loss_and_grad(student, unsup)
            l_unsup = unsup_loss.total
            grad = grad.combine(unsup_grad, 1.0, cfg.lambda_u)
        total = sup_loss.total + cfg.lambda_u * l_unsup
        if not np.isfinite(total):
            raise TrainingDivergedError("ssod", step, total)
        student = student.sgd_step(grad, cfg.lr)
        if not student.all_finite():
            raise TrainingDivergedError("ssod", step, float("nan"))
        teacher = ema_update(teacher, student, cfg.teacher_momentum)
        if keep_trajectory:
            trajectory.append(student.copy())
        rows.append({
            "step": step,
            "l_sup": sup_loss.total,
            "l_unsup": l_unsup,
            "l_total": total,
            "n_pseudo": n_pseudo,
            "n_reg_ok": n_reg_ok,
        })
        logger.debug("ssod step %d: l_sup=%.6f l_unsup=%.6f pseudo=%d", step, sup_loss.total, l_unsup, n_pseudo)

    logger.info(
        "SSOD finished: %d steps, %d labeled images, %d unlabeled images",
        cfg.steps, len(sup_all), len(pool),
    )
    return SsodResult(
        student=student,
        teacher=teacher,
        log=pd.DataFrame(rows, columns=LOG_COLUMNS),
        trajectory=trajectory,
    )
