from __future__ import annotations

import pandas as pd
import pytest

from w2n import pipeline
from w2n.config import RunConfig, load_run_config
from w2n.detector import load_params
from w2n.errors import PipelineError, TrainingDivergedError
from w2n.labelgen import Instance, PseudoDataset, load_pseudo
from w2n.models import RunSummary
from w2n.pipeline import ITERATION_COLUMNS, mean_iou_to_gt, noisy_start, run, write_run

TINY = [
    "world.num_images=4",
    "world.proposals_per_image=24",
    "eval.test_images=3",
    "la.steps=5",
    "la.warmup_steps=2",
    "ssod.steps=4",
    "ssod.labeled_batch=2",
    "ssod.unlabeled_batch=2",
    "ssod.pseudo_score_threshold=0.3",
    "T=1",
]


def _cfg(*extra: str) -> RunConfig:
    return load_run_config("defaults", TINY + list(extra))


@pytest.fixture(scope="module")
def tiny_run():
    cfg = _cfg()
    return cfg, run(cfg)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class TestMeanIou:
    def test_clean_pseudo_is_one(self):
        world, _, _ = noisy_start(_cfg())
        pseudo = PseudoDataset([[Instance(o.box, o.label) for o in im.scene.objects] for im in world.images])
        assert mean_iou_to_gt(world, pseudo) == 1.0

    def test_absent_class_is_zero(self):
        world, _, _ = noisy_start(_cfg())
        instances = []
        for im in world.images:
            absent = [c for c in range(world.config.classes) if c not in im.scene.present_classes]
            instances.append([Instance(o.box, absent[0]) for o in im.scene.objects] if absent else [])
        pseudo = PseudoDataset(instances)
        assert pseudo.num_instances > 0
        assert mean_iou_to_gt(world, pseudo) == 0.0

    def test_empty_pseudo(self):
        world, _, _ = noisy_start(_cfg())
        assert mean_iou_to_gt(world, PseudoDataset([[] for _ in world.images])) == 0.0


def test_noisy_start_follows_image_labels():
    world, preds, pseudo = noisy_start(_cfg())
    assert len(preds) == len(pseudo) == len(world)
    for image, instances in zip(world.images, pseudo.instances):
        assert {i.label for i in instances} <= set(image.scene.present_classes)


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

class TestRun:
    def test_reports(self, tiny_run):
        cfg, result = tiny_run
        assert [r.t for r in result.reports] == [0, 1]
        assert [r.stage for r in result.reports] == ["wsod", "ssod"]
        assert result.reports[0].labeled_fraction == 1.0
        assert 0.0 < result.reports[1].labeled_fraction <= 1.0
        for report in result.reports:
            for value in (report.pseudo_label_mean_iou_to_gt, report.toy_map, report.corloc):
                assert 0.0 <= value <= 1.0
        assert len(result.datasets) == 2
        assert set(result.ssod_logs) == {1} and set(result.split_audits) == {1}

    def test_deterministic(self, tiny_run):
        cfg, first = tiny_run
        again = run(cfg)
        assert again.table().equals(first.table())
        assert again.params.equals(first.params)

    def test_threads_do_not_change_results(self, tiny_run):
        cfg, first = tiny_run
        threaded = run(cfg, threads=4)
        assert threaded.table().equals(first.table())
        assert threaded.params.equals(first.params)

    def test_zero_iterations_runs_one_adaptation_round(self):
        result = run(_cfg("T=0"))
        assert [r.stage for r in result.reports] == ["wsod", "la"]
        assert result.ssod_logs == {}

    def test_without_ssl(self):
        result = run(_cfg("use_ssl=false"))
        assert result.reports[-1].stage == "la"
        assert result.reports[-1].labeled_fraction == 1.0

    def test_without_la_trains_plain_detector(self):
        result = run(_cfg("use_la=false", "use_ssl=false"))
        assert result.params is not None
        assert len(result.reports) == 2

    def test_failures_name_the_iteration(self, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDivergedError("la", 3, float("nan"))

        monkeypatch.setattr(pipeline, "localization_adaptation", diverge)
        with pytest.raises(PipelineError, match="iteration 1 \\(la\\)") as info:
            run(_cfg())
        assert info.value.iteration == 1
        assert info.value.stage == "la"
        assert isinstance(info.value.__cause__, TrainingDivergedError)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

class TestWriteRun:
    def test_files(self, tiny_run, tmp_path):
        cfg, result = tiny_run
        out = write_run(result, cfg, tmp_path / "run")
        for name in ("iterations.csv", "summary.json", "params.json", "config.yaml",
                     "pseudo/t0.jsonl", "pseudo/t1.jsonl", "ssod_log_t1.csv", "split_audit_t1.csv"):
            assert (out / name).exists(), name

    def test_tables_and_summary(self, tiny_run, tmp_path):
        cfg, result = tiny_run
        out = write_run(result, cfg, tmp_path)
        table = pd.read_csv(out / "iterations.csv")
        assert list(table.columns) == ITERATION_COLUMNS
        assert table["t"].tolist() == [0, 1]
        summary = RunSummary.model_validate_json((out / "summary.json").read_text())
        assert summary.reports == result.reports
        assert summary.ap_interpolation == "all-points"
        assert (summary.T, summary.split_mode, summary.p) == (1, cfg.split.mode, cfg.split.p)
        assert load_params(out / "params.json").equals(result.params)

    def test_mean_iou_recomputes_from_written_pseudo(self, tiny_run, tmp_path):
        cfg, result = tiny_run
        out = write_run(result, cfg, tmp_path)
        for t, report in enumerate(result.reports):
            _, pseudo = load_pseudo(out / "pseudo" / f"t{t}.jsonl")
            assert mean_iou_to_gt(result.world, pseudo) == report.pseudo_label_mean_iou_to_gt

    def test_config_echo(self, tiny_run, tmp_path):
        cfg, result = tiny_run
        out = write_run(result, cfg, tmp_path)
        assert load_run_config(out / "config.yaml") == cfg
