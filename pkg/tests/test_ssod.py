from __future__ import annotations

import logging

import numpy as np
import pytest

from w2n.config import SsodConfig, WorldConfig
from w2n.detector import DetectorParams, train
from w2n.geometry import Detection
from w2n.la import primary_batch
from w2n.labelgen import Instance, PseudoDataset
from w2n.split import LossRecord, SplitResult, ideal_split, split
from w2n.ssod import (
    LOG_COLUMNS,
    ema_update,
    jitter_deviation,
    pseudo_label,
    ssod_train,
    supervised_batch,
    supervised_loss,
)
from w2n.synthworld import generate_world


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(num_images=6, proposals_per_image=24, seed=5))


def _gt_pseudo(world) -> PseudoDataset:
    return PseudoDataset([[Instance(o.box, o.label) for o in im.scene.objects] for im in world.images])


def _half_split(pseudo: PseudoDataset) -> SplitResult:
    """Instance split keeping every other instance."""
    records = [LossRecord(key, [key], float(n % 2), 0.0, 0.0, 0.0) for n, key in enumerate(pseudo.keys())]
    return split(records, "instance", 0.5)


def _trained(world, steps: int = 40) -> DetectorParams:
    start = DetectorParams.zeros(world.config.feature_dim, world.config.classes)
    return train(start, primary_batch(world, _gt_pseudo(world), 0.5), steps, 0.2).params


def _cfg(**kw) -> SsodConfig:
    base = dict(steps=6, labeled_batch=2, unlabeled_batch=2, lr=0.2)
    base.update(kw)
    return SsodConfig(**base)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_update_is_exact(world):
    cfg = world.config
    base = DetectorParams.zeros(cfg.feature_dim, cfg.classes)
    rng = np.random.default_rng(0)
    teacher = base.with_flat(rng.normal(size=base.flat().size))
    student = base.with_flat(rng.normal(size=base.flat().size))
    out = ema_update(teacher, student, 0.996)
    assert np.array_equal(out.flat(), 0.996 * teacher.flat() + (1.0 - 0.996) * student.flat())


# ---------------------------------------------------------------------------
# Supervised branch
# ---------------------------------------------------------------------------

class TestSupervised:
    def test_batch_skips_images_without_labels(self, world):
        pseudo = _gt_pseudo(world)
        labeled = PseudoDataset([inst if i == 2 else [] for i, inst in enumerate(pseudo.instances)])
        batch = supervised_batch(world, labeled, [[] for _ in pseudo.instances], 0.5)
        assert len(batch) == 1

    def test_unlabeled_instances_are_ignored(self, world):
        pseudo = _gt_pseudo(world)
        result = _half_split(pseudo)
        batch = supervised_batch(world, result.labeled_dataset(pseudo), result.unlabeled_boxes(pseudo), 0.5)
        plain = supervised_batch(world, result.labeled_dataset(pseudo), [[] for _ in pseudo.instances], 0.5)
        assert sum(b.targets.num_bg for b in batch) < sum(b.targets.num_bg for b in plain)

    def test_all_tags_one_matches_ungated(self, world):
        pseudo = _gt_pseudo(world)
        params = _trained(world, 5)
        ideal = ideal_split(world, pseudo)
        batch = supervised_batch(world, ideal.labeled_dataset(pseudo), ideal.unlabeled_boxes(pseudo), 0.5)
        loss, grad = supervised_loss(params, batch)
        plain_loss, plain_grad = supervised_loss(params, primary_batch(world, pseudo, 0.5))
        assert loss == plain_loss
        assert grad.equals(plain_grad)

    def test_cls_only_tags_zero_regression(self, world):
        pseudo = _gt_pseudo(world)
        tagged = PseudoDataset([[i.with_tags(1, 0) for i in per_image] for per_image in pseudo.instances])
        batch = supervised_batch(world, tagged, [[] for _ in pseudo.instances], 0.5)
        loss, grad = supervised_loss(_trained(world, 5), batch)
        assert loss.rpn_reg == 0.0 and loss.roi_reg == 0.0
        assert not grad.rpn_reg.any() and not grad.roi_reg.any()

    def test_mean_of_per_image_losses(self, world):
        pseudo = _gt_pseudo(world)
        batch = supervised_batch(world, pseudo, [[] for _ in pseudo.instances], 0.5)[:2]
        params = _trained(world, 5)
        both = supervised_loss(params, batch)[0].total
        each = [supervised_loss(params, [b])[0].total for b in batch]
        assert both == pytest.approx(sum(each) / 2, abs=1e-12)


# ---------------------------------------------------------------------------
# Pseudo labels
# ---------------------------------------------------------------------------

class TestPseudoLabel:
    def test_below_threshold_not_emitted(self, world):
        cfg = world.config
        teacher = DetectorParams.zeros(cfg.feature_dim, cfg.classes)
        # uniform scores of 1/(C+1) = 0.2
        assert pseudo_label(teacher, world.images[0], cfg, _cfg(pseudo_score_threshold=0.7), np.random.default_rng(0)) == []

    def test_emitted_labels_pass_threshold(self, world):
        cfg = world.config
        teacher = _trained(world)
        ssod_cfg = _cfg(pseudo_score_threshold=0.3)
        for image in world.images:
            for label in pseudo_label(teacher, image, cfg, ssod_cfg, np.random.default_rng(1)):
                assert label.instance.lambda_cls == 1
                assert label.instance.lambda_reg == int(label.reg_ok)
                assert label.reg_ok == (label.deviation < ssod_cfg.jitter_variance_threshold)

    def test_jitter_deviation_closed_form(self, world):
        cfg = world.config
        teacher = DetectorParams.zeros(cfg.feature_dim, cfg.classes)
        ssod_cfg = _cfg()
        box = world.images[0].scene.objects[0].box
        det = Detection(box, 1, 0.9)
        deviation = jitter_deviation(teacher, world.images[0], cfg, det, ssod_cfg, np.random.default_rng(3))

        # zero deltas decode every jittered box to itself
        rng = np.random.default_rng(3)
        n = ssod_cfg.jitter_samples
        shifts = rng.uniform(-ssod_cfg.jitter_shift, ssod_cfg.jitter_shift, size=(n, 2))
        scales = rng.uniform(*ssod_cfg.jitter_scale, size=(n, 2))
        xs = box.x + shifts[:, 0] * box.w
        ys = box.y + shifts[:, 1] * box.h
        ws = box.w * scales[:, 0]
        hs = box.h * scales[:, 1]
        expected = np.mean([xs.std() / box.w, ys.std() / box.h, ws.std() / box.w, hs.std() / box.h])
        assert deviation == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TestSsodTrain:
    def test_zero_lambda_u_matches_supervised_training(self, world):
        pseudo = _gt_pseudo(world)
        result = _half_split(pseudo)
        student = _trained(world, 5)
        cfg = _cfg(lambda_u=0.0)
        out = ssod_train(student, world, pseudo, result, cfg, np.random.default_rng(11))

        sup_all = supervised_batch(world, result.labeled_dataset(pseudo), result.unlabeled_boxes(pseudo), cfg.tau_assign)
        sup_rng = np.random.default_rng(11).spawn(2)[0]
        reference = train(student, sup_all, cfg.steps, cfg.lr, batch_size=cfg.labeled_batch, rng=sup_rng)
        assert out.student.equals(reference.params)
        assert (out.log["l_unsup"] == 0.0).all()

    def test_momentum_one_freezes_teacher(self, world):
        pseudo = _gt_pseudo(world)
        student = _trained(world, 5)
        out = ssod_train(
            student, world, pseudo, _half_split(pseudo), _cfg(teacher_momentum=1.0, pseudo_score_threshold=0.3),
            np.random.default_rng(12),
        )
        assert out.teacher.equals(student)
        assert not out.student.equals(student)

    def test_teacher_replays_from_trajectory(self, world):
        pseudo = _gt_pseudo(world)
        student = _trained(world, 5)
        cfg = _cfg(teacher_momentum=0.9, pseudo_score_threshold=0.3)
        out = ssod_train(student, world, pseudo, _half_split(pseudo), cfg, np.random.default_rng(13), keep_trajectory=True)
        assert len(out.trajectory) == cfg.steps
        teacher = student.copy()
        for params in out.trajectory:
            teacher = ema_update(teacher, params, cfg.teacher_momentum)
        assert teacher.equals(out.teacher)

    def test_log_format(self, world):
        pseudo = _gt_pseudo(world)
        cfg = _cfg(pseudo_score_threshold=0.3)
        out = ssod_train(_trained(world, 5), world, pseudo, _half_split(pseudo), cfg, np.random.default_rng(14))
        assert list(out.log.columns) == LOG_COLUMNS
        assert out.log["step"].tolist() == list(range(cfg.steps))
        assert np.allclose(out.log["l_total"], out.log["l_sup"] + cfg.lambda_u * out.log["l_unsup"])
        assert (out.log["n_reg_ok"] <= out.log["n_pseudo"]).all()

    def test_deterministic(self, world):
        pseudo = _gt_pseudo(world)
        student = _trained(world, 5)
        cfg = _cfg(pseudo_score_threshold=0.3)
        a = ssod_train(student, world, pseudo, _half_split(pseudo), cfg, np.random.default_rng(15))
        b = ssod_train(student, world, pseudo, _half_split(pseudo), cfg, np.random.default_rng(15))
        assert a.student.equals(b.student)
        assert a.log.equals(b.log)

    def test_no_labeled_images_warns(self, world, caplog):
        pseudo = _gt_pseudo(world)
        empty = SplitResult(mode="instance", p=0.5, unlabeled=list(range(len(world))))
        with caplog.at_level(logging.WARNING, logger="w2n.ssod"):
            out = ssod_train(_trained(world, 5), world, pseudo, empty, _cfg(lambda_u=0.0), np.random.default_rng(16))
        assert "no labeled images" in caplog.text
        assert (out.log["l_sup"] == 0.0).all()
