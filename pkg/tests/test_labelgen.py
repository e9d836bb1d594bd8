from __future__ import annotations

import logging

import numpy as np
import pytest

from w2n.config import PgeConfig, WorldConfig
from w2n.geometry import Box, Detection, iou
from w2n.labelgen import Instance, PseudoDataset, excavate, fuse, load_pseudo, save_pseudo
from w2n.synthworld import generate_world, image_to_record

DEFAULT = PgeConfig()
# NMS looser than fusion, so overlapping survivors reach the fusion step
LOOSE = PgeConfig(t_nms=0.5, t_score=0.2, t_fusion=0.4)


def _label(*present: int, classes: int = 4) -> np.ndarray:
    out = np.zeros(classes, dtype=np.int64)
    out[list(present)] = 1
    return out


def _random_preds(rng: np.random.Generator, n: int, classes: int = 3) -> list[Detection]:
    centers = rng.uniform(20.0, 80.0, size=(n, 2))
    sizes = rng.uniform(8.0, 25.0, size=(n, 2))
    return [
        Detection(Box(*c, *s), int(k), float(p))
        for c, s, k, p in zip(centers, sizes, rng.integers(0, classes, n), rng.random(n))
    ]


# ---------------------------------------------------------------------------
# Instance
# ---------------------------------------------------------------------------

class TestInstance:
    def test_defaults(self):
        inst = Instance(Box(1, 1, 2, 2), 0)
        assert (inst.lambda_cls, inst.lambda_reg) == (1, 1)

    def test_needs_a_task(self):
        with pytest.raises(ValueError, match="task tag"):
            Instance(Box(1, 1, 2, 2), 0, 0, 0)

    def test_with_tags(self):
        inst = Instance(Box(1, 1, 2, 2), 3).with_tags(1, 0)
        assert (inst.label, inst.lambda_cls, inst.lambda_reg) == (3, 1, 0)


# ---------------------------------------------------------------------------
# excavate
# ---------------------------------------------------------------------------

class TestExcavate:
    def test_single_prediction(self):
        box = Box(30, 30, 10, 10)
        out = excavate([(box, 1, 0.9)], _label(1), DEFAULT)
        assert out == [Instance(box, 1)]

    def test_absent_class_dropped(self):
        out = excavate([(Box(30, 30, 10, 10), 2, 0.9), (Box(60, 60, 10, 10), 1, 0.8)], _label(1), DEFAULT)
        assert [i.label for i in out] == [1]

    def test_low_scores_dropped(self):
        preds = [(Box(30, 30, 10, 10), 1, 0.9), (Box(70, 70, 10, 10), 1, 0.1)]
        out = excavate(preds, _label(1), DEFAULT)
        assert out == [Instance(Box(30, 30, 10, 10), 1)]

    def test_missing_class_reinstated(self):
        preds = [
            (Box(30, 30, 10, 10), 0, 0.9),
            (Box(60, 60, 10, 10), 2, 0.05),
            (Box(20, 70, 10, 10), 2, 0.15),
        ]
        out = excavate(preds, _label(0, 2), DEFAULT)
        assert sorted((i.label, i.box) for i in out) == [(0, Box(30, 30, 10, 10)), (2, Box(20, 70, 10, 10))]

    def test_nms_suppresses_duplicates(self):
        preds = [(Box(30, 30, 10, 10), 1, 0.8), (Box(31, 30, 10, 10), 1, 0.9)]
        assert excavate(preds, _label(1), DEFAULT) == [Instance(Box(31, 30, 10, 10), 1)]

    def test_pair_below_fusion_threshold_kept(self):
        # IoU 1/3
        preds = [(Box(5, 5, 10, 10), 0, 0.9), (Box(10, 5, 10, 10), 0, 0.8)]
        out = excavate(preds, _label(0), LOOSE)
        assert len(out) == 2

    def test_overlapping_pair_fused(self):
        a, b = Box(5, 5, 10, 10), Box(9, 5, 10, 10)
        assert 0.4 <= iou(a, b) <= 0.5
        out = excavate([(a, 0, 0.9), (b, 0, 0.8)], _label(0), LOOSE)
        assert out == [Instance(Box.from_corners(0.0, 0.0, 14.0, 10.0), 0)]

    def test_empty_predictions_logged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="w2n.labelgen"):
            assert excavate([], _label(0), DEFAULT) == []
        assert "no predictions" in caplog.text

    def test_output_properties_on_random_predictions(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            label = _label(0, 2, classes=3)
            out = excavate(_random_preds(rng, 15), label, LOOSE)
            assert {i.label for i in out} <= {0, 2}
            for i, a in enumerate(out):
                assert (a.lambda_cls, a.lambda_reg) == (1, 1)
                for b in out[i + 1:]:
                    if a.label == b.label:
                        assert iou(a.box, b.box) < LOOSE.t_fusion

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            label = _label(0, 1, 2, classes=3)
            first = excavate(_random_preds(rng, 12), label, LOOSE)
            again = excavate([(i.box, i.label, 1.0) for i in first], label, LOOSE)
            assert sorted((i.label, i.box.x, i.box.y) for i in again) == sorted(
                (i.label, i.box.x, i.box.y) for i in first
            )


class TestFuse:
    def test_fixpoint_chain(self):
        # a+b fuse first, then the merged box with c
        dets = [
            Detection(Box(10, 10, 10, 10), 0, 0.5),
            Detection(Box(11, 10, 10, 10), 0, 0.9),
            Detection(Box(14, 10, 10, 10), 0, 0.7),
        ]
        out = fuse(dets, 0.4)
        assert len(out) == 1
        assert out[0].score == 0.9
        assert out[0].box.corners == pytest.approx((5.0, 5.0, 19.0, 15.0))

    def test_classes_never_mix(self):
        dets = [Detection(Box(10, 10, 10, 10), 0, 0.5), Detection(Box(10, 10, 10, 10), 1, 0.6)]
        assert fuse(dets, 0.4) == dets


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_save_load_pseudo(tmp_path):
    world = generate_world(WorldConfig(num_images=3, proposals_per_image=20, seed=1))
    records = [image_to_record(image) for image in world.images]
    pseudo = PseudoDataset(
        [[Instance(o.box, o.label, 1, k % 2) for k, o in enumerate(image.scene.objects)] for image in world.images]
    )
    path = save_pseudo(records, pseudo, tmp_path / "pseudo.jsonl")
    loaded_records, loaded = load_pseudo(path)
    assert loaded.instances == pseudo.instances
    assert [r.index for r in loaded_records] == [0, 1, 2]
