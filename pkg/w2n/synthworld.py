"""Synthetic detection worlds.

Each image holds ground-truth objects, optional discriminative parts (for
``part_classes``), an image-level label, proposals and proposal features.
Proposals are jittered copies of objects, jittered copies of parts, and
uniform random boxes. Features are a deterministic function of a box's
overlap with every object body and every part plus its geometry, with
bounded noise; the layout is::

    [ov_0 .. ov_{C-1}] * k    max IoU with objects of each class, k = overlap_feature_scale
    [pv_0 .. pv_{C-1}] * k    max IoU with parts of objects of each class
    [4 deltas * so]           encode(best-overlapping object, box), so = object_delta_scale
    [4 deltas * sp]           encode(best-overlapping part, box), sp = part_feature_scale
    [4 geometry]              normalized center and log size
    [distractors]             pure noise up to feature_dim

Class and box-delta targets are therefore linear in the features. Object
deltas are zero for boxes whose best object overlap is below
``object_delta_min_iou``, so part-sized boxes carry part deltas only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import ValidationError

from w2n.config import NoiseModel, WorldConfig
from w2n.errors import ConfigError, InfeasibleWorldError
from w2n.geometry import Box, Detection, boxes_to_array, encode_deltas, iou_matrix
from w2n.models import BoxRecord, ImageRecord, ObjectRecord
from w2n.workers import parallel_map

logger = logging.getLogger(__name__)

JITTER_SHIFT = 0.15
JITTER_LOG_SCALE = 0.25
RANDOM_BOX_SIZE = (0.1, 0.6)
COVERAGE_IOU = 0.5
# Part-delta features are only filled in when the best overlap reaches this IoU.
PART_DELTA_MIN_IOU = 0.1
DELTA_FEATURE_CLIP = 2.0
DISTRACTOR_AMPLITUDE = 0.5
MAX_PLACEMENT_TRIES = 200


class LabeledBox(NamedTuple):
    box: Box
    label: int


@dataclass
class GroundTruthScene:
    objects: list[LabeledBox]
    parts: list[Box | None]
    image_label: np.ndarray

    @property
    def object_boxes(self) -> np.ndarray:
        return boxes_to_array([o.box for o in self.objects])

    @property
    def object_labels(self) -> np.ndarray:
        return np.array([o.label for o in self.objects], dtype=np.int64)

    @property
    def present_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.image_label)]


@dataclass
class ProposalSet:
    boxes: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class SceneImage:
    index: int
    scene: GroundTruthScene
    proposals: ProposalSet


@dataclass
class World:
    config: WorldConfig
    images: list[SceneImage]

    def __len__(self) -> int:
        return len(self.images)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one image, whatever the thread count."""
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def _best_deltas(boxes: np.ndarray, targets: np.ndarray, overlaps: np.ndarray, min_iou: float) -> np.ndarray:
    out = np.zeros((len(boxes), 4), dtype=np.float64)
    if targets.shape[0] == 0:
        return out
    best = np.argmax(overlaps, axis=1)
    ok = overlaps[np.arange(len(boxes)), best] >= min_iou
    if ok.any():
        d = encode_deltas(targets[best[ok]], boxes[ok])
        out[ok] = np.clip(d, -DELTA_FEATURE_CLIP, DELTA_FEATURE_CLIP)
    return out


def featurize(
    scene: GroundTruthScene,
    boxes: np.ndarray,
    cfg: WorldConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Feature rows for arbitrary ``(M, 4)`` boxes in ``scene``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    m, c = len(boxes), cfg.classes
    obj = scene.object_boxes
    labels = scene.object_labels
    ov = iou_matrix(boxes, obj)

    has_part = np.array([p is not None for p in scene.parts], dtype=bool)
    part_boxes = boxes_to_array([p for p in scene.parts if p is not None])
    part_labels = labels[has_part] if len(labels) else labels
    pv = iou_matrix(boxes, part_boxes)

    ov_c = np.zeros((m, c))
    pv_c = np.zeros((m, c))
    for k in range(c):
        if (labels == k).any():
            ov_c[:, k] = ov[:, labels == k].max(axis=1)
        if (part_labels == k).any():
            pv_c[:, k] = pv[:, part_labels == k].max(axis=1)

    width, height = cfg.canvas
    geom = np.stack(
        [
            boxes[:, 0] / width - 0.5,
            boxes[:, 1] / height - 0.5,
            np.log(boxes[:, 2] / width) + 1.5,
            np.log(boxes[:, 3] / height) + 1.5,
        ],
        axis=1,
    )
    informative = np.concatenate(
        [
            cfg.overlap_feature_scale * ov_c,
            cfg.overlap_feature_scale * pv_c,
            cfg.object_delta_scale * _best_deltas(boxes, obj, ov, cfg.object_delta_min_iou),
            cfg.part_feature_scale * _best_deltas(boxes, part_boxes, pv, PART_DELTA_MIN_IOU),
            geom,
        ],
        axis=1,
    )
    informative = informative + rng.uniform(-cfg.feature_noise, cfg.feature_noise, size=informative.shape)
    distractors = rng.uniform(
        -DISTRACTOR_AMPLITUDE, DISTRACTOR_AMPLITUDE, size=(m, cfg.feature_dim - informative.shape[1])
    )
    return np.concatenate([informative, distractors], axis=1)


# ---------------------------------------------------------------------------
# Scene and proposal generation
# ---------------------------------------------------------------------------

def _check_feasible(cfg: WorldConfig) -> tuple[int, int]:
    width, height = cfg.canvas
    if cfg.object_size[0] <= 0 or cfg.object_size[1] < cfg.object_size[0]:
        raise InfeasibleWorldError(f"invalid object size range {cfg.object_size}")
    if cfg.object_size[1] > min(width, height):
        raise InfeasibleWorldError(
            f"objects up to {cfg.object_size[1]} do not fit a {width}x{height} canvas"
        )
    n_gt = int(round(cfg.proposals_per_image * cfg.gt_proposal_ratio))
    n_part = int(round(cfg.proposals_per_image * cfg.part_proposal_ratio))
    if n_gt < cfg.objects_per_image[1]:
        raise InfeasibleWorldError(
            f"{n_gt} object proposals cannot cover up to {cfg.objects_per_image[1]} objects"
        )
    return n_gt, n_part


def _jitter(box: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    shift = rng.uniform(-JITTER_SHIFT, JITTER_SHIFT, size=2)
    scale = np.exp(rng.uniform(-JITTER_LOG_SCALE, JITTER_LOG_SCALE, size=2))
    return np.array(
        [box[0] + shift[0] * box[2], box[1] + shift[1] * box[3], box[2] * scale[0], box[3] * scale[1]]
    )


def random_boxes(n: int, cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    width, height = cfg.canvas
    lo, hi = RANDOM_BOX_SIZE
    w = rng.uniform(lo, hi, size=n) * width
    h = rng.uniform(lo, hi, size=n) * height
    x = rng.uniform(0.0, width, size=n)
    y = rng.uniform(0.0, height, size=n)
    return np.stack([x, y, w, h], axis=1)


def generate_scene(cfg: WorldConfig, rng: np.random.Generator) -> GroundTruthScene:
    width, height = cfg.canvas
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    objects: list[LabeledBox] = []
    parts: list[Box | None] = []
    for _ in range(n_obj):
        label = int(rng.integers(cfg.classes))
        for _attempt in range(MAX_PLACEMENT_TRIES):
            w, h = rng.uniform(cfg.object_size[0], cfg.object_size[1], size=2)
            x = rng.uniform(w / 2, width - w / 2)
            y = rng.uniform(h / 2, height - h / 2)
            candidate = np.array([[x, y, w, h]])
            if not objects or iou_matrix(candidate, boxes_to_array([o.box for o in objects])).max() < cfg.max_object_overlap:
                break
        else:
            raise InfeasibleWorldError(
                f"could not place {n_obj} objects with overlap < {cfg.max_object_overlap}"
            )
        box = Box(float(x), float(y), float(w), float(h))
        objects.append(LabeledBox(box, label))
        if label in cfg.part_classes:
            ox, oy = rng.uniform(-cfg.part_offset, cfg.part_offset, size=2)
            f = cfg.part_fraction
            parts.append(Box(box.x + ox * box.w, box.y + oy * box.h, f * box.w, f * box.h))
        else:
            parts.append(None)
    image_label = np.zeros(cfg.classes, dtype=np.int64)
    for o in objects:
        image_label[o.label] = 1
    return GroundTruthScene(objects=objects, parts=parts, image_label=image_label)


def generate_proposals(
    scene: GroundTruthScene,
    cfg: WorldConfig,
    rng: np.random.Generator,
    n_gt: int,
    n_part: int,
) -> np.ndarray:
    obj = scene.object_boxes
    rows: list[np.ndarray] = []
    for j in range(n_gt):
        k = j % len(obj)
        jittered = _jitter(obj[k], rng)
        # first copy of each object guarantees coverage
        if j < len(obj) and iou_matrix(jittered, obj[k]).item() < COVERAGE_IOU:
            jittered = obj[k].copy()
        rows.append(jittered)
    parts = boxes_to_array([p for p in scene.parts if p is not None])
    n_random = cfg.proposals_per_image - n_gt
    if len(parts):
        rows.extend(_jitter(parts[j % len(parts)], rng) for j in range(n_part))
        n_random -= n_part
    proposals = np.vstack(rows + [random_boxes(n_random, cfg, rng)])
    return proposals


def _generate_image(cfg: WorldConfig, index: int, n_gt: int, n_part: int) -> SceneImage:
    rng = image_rng(cfg.seed, index)
    scene = generate_scene(cfg, rng)
    boxes = generate_proposals(scene, cfg, rng, n_gt, n_part)
    features = featurize(scene, boxes, cfg, rng)
    return SceneImage(index=index, scene=scene, proposals=ProposalSet(boxes=boxes, features=features))


def generate_world(cfg: WorldConfig, threads: int = 1) -> World:
    """Deterministic given ``cfg.seed``; each image draws from its own stream."""
    n_gt, n_part = _check_feasible(cfg)
    images = parallel_map(
        lambda i: _generate_image(cfg, i, n_gt, n_part), list(range(cfg.num_images)), threads
    )
    n_objects = sum(len(im.scene.objects) for im in images)
    logger.info("Generated world: %d images, %d objects (seed=%d)", len(images), n_objects, cfg.seed)
    return World(config=cfg, images=images)


# ---------------------------------------------------------------------------
# Simulated WSOD detector
# ---------------------------------------------------------------------------

def corrupt_to_wsod_output(
    scene: GroundTruthScene,
    noise: NoiseModel,
    rng: np.random.Generator,
    cfg: WorldConfig,
) -> list[Detection]:
    """Predictions of a weak detector with its typical failure modes.

    Per object one of: accurate box, part box (objects with a part only),
    accurate box with a wrong class, or nothing. Background false positives
    are added with ``noise.fp_rate`` expected per image.
    """
    preds: list[Detection] = []
    for obj, part in zip(scene.objects, scene.parts):
        p_part = noise.part_rate if part is not None else 0.0
        u = rng.random()
        if u < p_part:
            preds.append(Detection(part, obj.label, float(rng.uniform(*noise.part_score))))
        elif u < p_part + noise.mislabel_rate:
            other = int(rng.integers(cfg.classes - 1))
            if other >= obj.label:
                other += 1
            preds.append(Detection(obj.box, other, float(rng.uniform(*noise.mislabel_score))))
        elif u < p_part + noise.mislabel_rate + noise.drop_rate:
            continue
        else:
            preds.append(Detection(obj.box, obj.label, float(rng.uniform(*noise.accurate_score))))
    n_fp = int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0
    for row in random_boxes(n_fp, cfg, rng):
        label = int(rng.integers(cfg.classes))
        preds.append(Detection(Box.from_array(row), label, float(rng.uniform(*noise.fp_score))))
    return preds


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def image_to_record(image: SceneImage) -> ImageRecord:
    scene = image.scene
    return ImageRecord(
        index=image.index,
        objects=[ObjectRecord(box=BoxRecord.from_box(o.box), label=o.label) for o in scene.objects],
        parts=[BoxRecord.from_box(p) if p is not None else None for p in scene.parts],
        image_label=[int(v) for v in scene.image_label],
        proposals=image.proposals.boxes.tolist(),
        features=image.proposals.features.tolist(),
    )


def image_from_record(record: ImageRecord) -> SceneImage:
    scene = GroundTruthScene(
        objects=[LabeledBox(o.box.to_box(), o.label) for o in record.objects],
        parts=[p.to_box() if p is not None else None for p in record.parts],
        image_label=np.array(record.image_label, dtype=np.int64),
    )
    proposals = ProposalSet(
        boxes=np.array(record.proposals, dtype=np.float64).reshape(-1, 4),
        features=np.array(record.features, dtype=np.float64),
    )
    return SceneImage(index=record.index, scene=scene, proposals=proposals)


def save_world(world: World, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for image in world.images:
            f.write(image_to_record(image).model_dump_json() + "\n")
    logger.info("Saved world (%d images) to %s", len(world), path)
    return path


def load_world(path: str | Path, cfg: WorldConfig) -> World:
    images = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if line.strip():
                    try:
                        record = ImageRecord.model_validate_json(line)
                    except ValidationError as exc:
                        raise ConfigError(
                            f"world file {path} line {lineno} is malformed: {exc.error_count()} validation error(s)"
                        ) from exc
                    images.append(image_from_record(record))
    except OSError as exc:
        raise ConfigError(f"cannot read world file {path}: {exc.strerror or exc}") from exc
    return World(config=cfg, images=images)
