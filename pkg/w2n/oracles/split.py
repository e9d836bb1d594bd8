"""References for small-loss selection, ideal split and loss aggregation."""
from __future__ import annotations

import itertools
import math
from collections.abc import Iterator
from typing import Any

import numpy as np

from w2n.config import WorldConfig
from w2n.detector import DetectorParams
from w2n.geometry import Box
from w2n.labelgen import Instance, PseudoDataset
from w2n.oracles.base import Oracle
from w2n.oracles.geometry import reference_iou
from w2n.split import LossRecord, accumulate_losses, ideal_split, split
from w2n.synthworld import GroundTruthScene, LabeledBox, ProposalSet, SceneImage, World, generate_world

SPLIT_PS = (0.25, 0.5, 0.75, 1.0)


def exhaustive_top_p(losses: list[float], p: float) -> list[int]:
    """Best subset of size max(1, floor(p*N)) over all subsets: smallest
    sorted losses first, then smallest sorted indices."""
    n = len(losses)
    k = max(1, int(p * n + 1e-9))
    best = min(
        itertools.combinations(range(n), k),
        key=lambda subset: (sorted(losses[i] for i in subset), sorted(subset)),
    )
    return sorted(best)


class TopPOracle(Oracle):
    name = "top_p"

    def __init__(self, num_cases: int = 200, max_n: int = 12, ps: tuple[float, ...] = SPLIT_PS):
        self.num_cases = num_cases
        self.max_n = max_n
        self.ps = ps

    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        for _ in range(self.num_cases):
            n = int(rng.integers(1, self.max_n + 1))
            # two decimals so ties occur
            losses = np.round(rng.uniform(0.0, 1.0, size=n), 2).tolist()
            for p in self.ps:
                yield {"losses": losses, "p": p}

    def reference(self, case: dict[str, Any]) -> Any:
        return exhaustive_top_p(case["losses"], case["p"])

    def implementation(self, case: dict[str, Any]) -> Any:
        records = [LossRecord((0, k), [(0, k)], v, 0.0, 0.0, 0.0) for k, v in enumerate(case["losses"])]
        result = split(records, "instance", case["p"])
        return sorted(k for _, k in result.labeled)


def _scene_world(images: list[dict[str, Any]]) -> tuple[World, PseudoDataset]:
    """World of bare scenes (no proposals) plus the pseudo instances of ``images``."""
    scenes, pseudo = [], []
    for i, image in enumerate(images):
        objects = [LabeledBox(Box(*b), c) for b, c in zip(image["gt_boxes"], image["gt_labels"])]
        label = np.zeros(2, dtype=np.int64)
        for o in objects:
            label[o.label] = 1
        scene = GroundTruthScene(objects=objects, parts=[None] * len(objects), image_label=label)
        scenes.append(SceneImage(i, scene, ProposalSet(np.zeros((0, 4)), np.zeros((0, 16)))))
        pseudo.append([Instance(Box(*b), c) for b, c in zip(image["boxes"], image["labels"])])
    return World(WorldConfig(classes=2, feature_dim=16), scenes), PseudoDataset(pseudo)


class IdealSplitOracle(Oracle):
    name = "ideal_split"

    def __init__(self, num_cases: int = 20, instances_per_case: int = 50):
        self.num_cases = num_cases
        self.instances_per_case = instances_per_case

    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        for _ in range(self.num_cases):
            images = []
            remaining = self.instances_per_case
            while remaining > 0:
                n_gt = int(rng.integers(1, 4))
                n = min(remaining, int(rng.integers(1, 6)))
                remaining -= n
                gt = np.hstack([rng.uniform(20.0, 80.0, size=(n_gt, 2)), rng.uniform(10.0, 30.0, size=(n_gt, 2))])
                # pseudo boxes near some ground truth, sometimes far off
                base = gt[rng.integers(0, n_gt, size=n)]
                boxes = base + rng.normal(0.0, 4.0, size=(n, 4))
                boxes[:, 2:] = np.abs(boxes[:, 2:]) + 1.0
                images.append({
                    "gt_boxes": gt.tolist(),
                    "gt_labels": rng.integers(0, 2, size=n_gt).tolist(),
                    "boxes": boxes.tolist(),
                    "labels": rng.integers(0, 2, size=n).tolist(),
                })
            yield {"images": images}

    def reference(self, case: dict[str, Any]) -> Any:
        labeled = []
        for i, image in enumerate(case["images"]):
            for k, (box, label) in enumerate(zip(image["boxes"], image["labels"])):
                hits = [
                    reference_iou(box, gt) > 0.5
                    for gt, gt_label in zip(image["gt_boxes"], image["gt_labels"])
                    if gt_label == label
                ]
                if any(hits):
                    labeled.append([i, k])
        return labeled

    def implementation(self, case: dict[str, Any]) -> Any:
        world, pseudo = _scene_world(case["images"])
        return [list(key) for key in ideal_split(world, pseudo).labeled]


# ---------------------------------------------------------------------------
# Per-instance loss re-aggregation
# ---------------------------------------------------------------------------

def _dot(row: list[float], matrix: np.ndarray, col: int) -> float:
    return sum(row[r] * float(matrix[r, col]) for r in range(len(row)))


def _log_softmax(logits: list[float]) -> list[float]:
    top = max(logits)
    log_z = top + math.log(sum(math.exp(v - top) for v in logits))
    return [v - log_z for v in logits]


def _smooth_l1(d: float) -> float:
    return 0.5 * d * d if abs(d) < 1.0 else abs(d) - 0.5


def _deltas(target: list[float], anchor: list[float]) -> list[float]:
    return [
        (target[0] - anchor[0]) / anchor[2],
        (target[1] - anchor[1]) / anchor[3],
        math.log(target[2] / anchor[2]),
        math.log(target[3] / anchor[3]),
    ]


def reference_instance_losses(
    params: DetectorParams,
    proposals: list[list[float]],
    features: list[list[float]],
    targets: list[tuple[list[float], int]],
    tau_assign: float,
) -> list[list[float]]:
    """Mean ``[rpn_cls, rpn_reg, roi_cls, roi_reg]`` per target, inf when unmatched."""
    c = params.num_classes
    sums = [[0.0] * 4 for _ in targets]
    counts = [0] * len(targets)
    for box, feat in zip(proposals, features):
        overlaps = [reference_iou(box, t[0]) for t in targets]
        if not overlaps or max(overlaps) < tau_assign:
            continue
        k = overlaps.index(max(overlaps))
        target_box, label = targets[k]
        row = list(feat) + [1.0]
        t = _deltas(target_box, box)
        rpn_lp = _log_softmax([_dot(row, params.rpn_cls, j) for j in range(2)])
        roi_lp = _log_softmax([_dot(row, params.roi_cls, j) for j in range(c + 1)])
        rpn_d = [_dot(row, params.rpn_reg, j) for j in range(4)]
        roi_d = [_dot(row, params.roi_reg, 4 * label + j) for j in range(4)]
        parts = [
            -rpn_lp[1],
            sum(_smooth_l1(rpn_d[j] - t[j]) for j in range(4)),
            -roi_lp[label],
            sum(_smooth_l1(roi_d[j] - t[j]) for j in range(4)),
        ]
        counts[k] += 1
        for j in range(4):
            sums[k][j] += parts[j]
    return [[s / n for s in row] if n else [math.inf] * 4 for row, n in zip(sums, counts)]


class AggregationOracle(Oracle):
    name = "loss_aggregation"
    tolerance = 1e-9

    def __init__(self, num_cases: int = 10, tau_assign: float = 0.5):
        self.num_cases = num_cases
        self.tau_assign = tau_assign

    def _world(self, seed: int) -> WorldConfig:
        return WorldConfig(num_images=2, classes=2, feature_dim=16, proposals_per_image=12, seed=seed)

    def _params(self, seed: int) -> DetectorParams:
        rng = np.random.default_rng(seed)
        base = DetectorParams.zeros(16, 2)
        return base.with_flat(rng.normal(0.0, 0.3, size=base.flat().size))

    def cases(self, rng: np.random.Generator) -> Iterator[dict[str, Any]]:
        for _ in range(self.num_cases):
            yield {"seed": int(rng.integers(0, 2**31))}

    def _inputs(self, case: dict[str, Any]) -> tuple[World, PseudoDataset, DetectorParams]:
        world = generate_world(self._world(case["seed"]))
        pseudo = PseudoDataset([[Instance(o.box, o.label) for o in im.scene.objects] for im in world.images])
        return world, pseudo, self._params(case["seed"])

    def reference(self, case: dict[str, Any]) -> Any:
        world, pseudo, params = self._inputs(case)
        out = []
        for image, instances in zip(world.images, pseudo.instances):
            targets = [([i.box.x, i.box.y, i.box.w, i.box.h], i.label) for i in instances]
            out.extend(
                reference_instance_losses(
                    params, image.proposals.boxes.tolist(), image.proposals.features.tolist(), targets, self.tau_assign
                )
            )
        return out

    def implementation(self, case: dict[str, Any]) -> Any:
        world, pseudo, params = self._inputs(case)
        records = accumulate_losses(params, world, pseudo, self.tau_assign)
        return [[r.rpn_cls, r.rpn_reg, r.roi_cls, r.roi_reg] for r in records]
