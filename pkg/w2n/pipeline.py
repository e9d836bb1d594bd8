"""Iterative weak-to-noisy training loop.

Simulated weak-detector output is excavated into the first pseudo dataset.
Each iteration then trains a fresh detector with localization adaptation,
refines the labels with it, splits the refined labels by loss, runs
teacher-student training on the split and regenerates the labels with the
teacher.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from w2n.config import PgeConfig, RunConfig, dump_run_config
from w2n.detector import DetectorParams, save_params, train
from w2n.errors import PipelineError, W2NError
from w2n.geometry import Detection, iou
from w2n.la import localization_adaptation, primary_batch, refine_labels
from w2n.labelgen import PseudoDataset, excavate, save_pseudo
from w2n.metrics import corloc, detect_world, ground_truth, map_breakdown, toy_map
from w2n.models import IterationReport, RunSummary
from w2n.split import split_audit, split_dataset
from w2n.ssod import ssod_train
from w2n.synthworld import World, corrupt_to_wsod_output, generate_world, image_to_record

logger = logging.getLogger(__name__)

__all__ = [
    "RunResult",
    "adaptation_round",
    "corloc",
    "initial_pseudo",
    "mean_iou_to_gt",
    "noisy_start",
    "run",
    "toy_map",
    "train_baseline",
    "write_run",
]

ITERATION_COLUMNS = ["t", "mean_iou", "map", "corloc", "labeled_fraction"]

# stream tags, combined with the run seed and the iteration
_TRAIN_WSOD, _TEST_WSOD, _LA, _SSOD = 0, 1, 2, 3


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


@dataclass
class RunResult:
    reports: list[IterationReport]
    params: DetectorParams | None
    pseudo: PseudoDataset
    world: World
    test_world: World
    # pseudo dataset after each iteration, index t
    datasets: list[PseudoDataset] = field(default_factory=list)
    ssod_logs: dict[int, pd.DataFrame] = field(default_factory=dict)
    split_audits: dict[int, pd.DataFrame] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return reports_frame(self.reports)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def wsod_predictions(world: World, cfg: RunConfig, tag: int) -> list[list[Detection]]:
    """Simulated weak-detector output, one independent stream per image."""
    return [
        corrupt_to_wsod_output(image.scene, cfg.noise, _stream(cfg.seed, tag, image.index), world.config)
        for image in world.images
    ]


def initial_pseudo(world: World, preds: list[list[Detection]], pge: PgeConfig) -> PseudoDataset:
    return PseudoDataset([
        excavate(per_image, image.scene.image_label, pge) for image, per_image in zip(world.images, preds)
    ])


def mean_iou_to_gt(world: World, pseudo: PseudoDataset) -> float:
    """Mean over pseudo instances of the best IoU with a same-class ground truth."""
    values = []
    for image, instances in zip(world.images, pseudo.instances):
        for inst in instances:
            own = [o.box for o in image.scene.objects if o.label == inst.label]
            values.append(max((iou(inst.box, b) for b in own), default=0.0))
    return float(np.mean(values)) if values else 0.0


def noisy_start(cfg: RunConfig, threads: int = 1) -> tuple[World, list[list[Detection]], PseudoDataset]:
    """Training world, its simulated weak-detector output and the excavated first pseudo dataset."""
    world = generate_world(cfg.world, threads)
    preds = wsod_predictions(world, cfg, _TRAIN_WSOD)
    return world, preds, initial_pseudo(world, preds, cfg.pge)


def train_baseline(world: World, pseudo: PseudoDataset, cfg: RunConfig) -> DetectorParams:
    """Plain supervised detector on ``pseudo``, no regularization."""
    params = DetectorParams.zeros(world.config.feature_dim, world.config.classes)
    batch = primary_batch(world, pseudo, cfg.la.tau_assign)
    return train(params, batch, cfg.la.steps, cfg.la.lr).params


def adaptation_round(
    world: World, pseudo: PseudoDataset, cfg: RunConfig, t: int, threads: int = 1
) -> tuple[DetectorParams, PseudoDataset]:
    """Detector of round ``t`` and the labels it leaves behind.

    With ``use_la`` the detector is localization-adapted and the labels are
    refined with it; otherwise it is a plain baseline and the labels pass through.
    """
    if not cfg.use_la:
        return train_baseline(world, pseudo, cfg), pseudo
    la = localization_adaptation(world, pseudo, cfg.la, _stream(cfg.seed, _LA, t))
    return la.params, refine_labels(la.params, world, cfg.pge, threads)


def _report(
    t: int,
    stage: str,
    world: World,
    test_world: World,
    pseudo: PseudoDataset,
    params: DetectorParams,
    cfg: RunConfig,
    labeled_fraction: float,
    threads: int,
) -> IterationReport:
    test_dets = detect_world(params, test_world, cfg.eval, threads)
    train_dets = detect_world(params, world, cfg.eval, threads)
    return _build_report(t, stage, world, test_world, pseudo, test_dets, train_dets, cfg, labeled_fraction)


def _build_report(
    t: int,
    stage: str,
    world: World,
    test_world: World,
    pseudo: PseudoDataset,
    test_dets: list[list[Detection]],
    train_dets: list[list[Detection]],
    cfg: RunConfig,
    labeled_fraction: float,
) -> IterationReport:
    thr = cfg.eval.iou_threshold
    breakdown = map_breakdown(
        test_dets, ground_truth(test_world), test_world.config.classes, test_world.config.part_classes, thr
    )
    return IterationReport(
        t=t,
        stage=stage,
        pseudo_label_mean_iou_to_gt=mean_iou_to_gt(world, pseudo),
        toy_map=breakdown.mean,
        corloc=corloc(train_dets, ground_truth(world), thr),
        labeled_fraction=labeled_fraction,
        class_ap=breakdown.class_ap,
        part_class_map=breakdown.part_class_map,
        other_class_map=breakdown.other_class_map,
    )


def _log_report(report: IterationReport) -> None:
    logger.info(
        "t=%d %s: mean_iou=%.4f map=%.4f corloc=%.4f labeled=%.3f",
        report.t, report.stage, report.pseudo_label_mean_iou_to_gt,
        report.toy_map, report.corloc, report.labeled_fraction,
    )


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

def run(cfg: RunConfig, threads: int = 1) -> RunResult:
    """Run the full loop; ``T = 0`` stops after the first adaptation round."""
    world, train_preds, pseudo = noisy_start(cfg, threads)
    test_cfg = dataclasses.replace(cfg.world, seed=cfg.world.seed + 1, num_images=cfg.eval.test_images)
    test_world = generate_world(test_cfg, threads)
    test_preds = wsod_predictions(test_world, cfg, _TEST_WSOD)
    baseline = _build_report(0, "wsod", world, test_world, pseudo, test_preds, train_preds, cfg, 1.0)
    _log_report(baseline)
    result = RunResult(reports=[baseline], params=None, pseudo=pseudo, world=world, test_world=test_world)
    result.datasets.append(pseudo)

    for t in range(1, max(cfg.T, 1) + 1):
        stage = "la"
        try:
            params, pseudo = adaptation_round(world, pseudo, cfg, t, threads)
            report = _report(t, stage, world, test_world, pseudo, params, cfg, 1.0, threads)

            if cfg.T > 0 and cfg.use_ssl:
                _log_report(report)
                stage = "split"
                split_result, records = split_dataset(params, world, pseudo, cfg.split, threads)
                result.split_audits[t] = split_audit(records, split_result)
                stage = "ssod"
                ssod = ssod_train(params, world, pseudo, split_result, cfg.ssod, _stream(cfg.seed, _SSOD, t))
                result.ssod_logs[t] = ssod.log
                labeled_fraction = split_result.labeled_fraction(pseudo)
                params = ssod.teacher
                pseudo = refine_labels(params, world, cfg.pge, threads)
                report = _report(t, stage, world, test_world, pseudo, params, cfg, labeled_fraction, threads)
        except W2NError as exc:
            raise PipelineError(t, stage, exc) from exc

        _log_report(report)
        result.reports.append(report)
        result.datasets.append(pseudo)
        result.params = params
        result.pseudo = pseudo
    return result


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def reports_frame(reports: list[IterationReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "t": r.t,
                "mean_iou": r.pseudo_label_mean_iou_to_gt,
                "map": r.toy_map,
                "corloc": r.corloc,
                "labeled_fraction": r.labeled_fraction,
            }
            for r in reports
        ],
        columns=ITERATION_COLUMNS,
    )


def write_run(result: RunResult, cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write tables, the summary, final parameters, pseudo datasets and the config echo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.table().to_csv(out / "iterations.csv", index=False)
    summary = RunSummary(
        iou_threshold=cfg.eval.iou_threshold,
        T=cfg.T,
        use_la=cfg.use_la,
        use_ssl=cfg.use_ssl,
        split_mode=cfg.split.mode,
        p=cfg.split.p,
        reports=result.reports,
    )
    (out / "summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    if result.params is not None:
        save_params(result.params, out / "params.json")
    records = [image_to_record(image) for image in result.world.images]
    for t, pseudo in enumerate(result.datasets):
        save_pseudo(records, pseudo, out / "pseudo" / f"t{t}.jsonl")
    for t, frame in result.ssod_logs.items():
        frame.to_csv(out / f"ssod_log_t{t}.csv", index=False)
    for t, frame in result.split_audits.items():
        frame.to_csv(out / f"split_audit_t{t}.csv", index=False)
    dump_run_config(cfg, out / "config.yaml")
    logger.info("Wrote run outputs to %s", out)
    return out
