from __future__ import annotations

import json
import logging

import pandas as pd
import pytest

from w2n import logging_config
from w2n.cli import main, parse_sweep, split_values, sweep_overrides
from w2n.config import WorldConfig
from w2n.errors import ConfigError
from w2n.synthworld import load_world

TINY = [
    "world.num_images=4",
    "world.proposals_per_image=24",
    "eval.test_images=3",
    "la.steps=5",
    "la.warmup_steps=2",
    "ssod.steps=4",
    "ssod.labeled_batch=2",
    "ssod.unlabeled_batch=2",
    "T=1",
]


@pytest.fixture(autouse=True)
def fresh_logging():
    root = logging.getLogger()
    before = list(root.handlers)
    level = root.level
    logging_config.reset()
    yield
    for handler in root.handlers:
        if handler not in before:
            root.removeHandler(handler)
            handler.close()
    root.setLevel(level)
    logging_config.reset()


def _main(command: str, out, *extra: str) -> int:
    return main([command, "--config", "defaults", "--out-dir", str(out), *extra, *TINY])


# ---------------------------------------------------------------------------
# Sweep parsing
# ---------------------------------------------------------------------------

class TestSweep:
    def test_split_values_respects_brackets(self):
        assert split_values("0.2, 0.4,[1, 2],(3,4)") == ["0.2", "0.4", "[1, 2]", "(3,4)"]

    def test_parse(self):
        assert parse_sweep("p=0.2,0.4") == ("p", ["0.2", "0.4"])
        assert parse_sweep("modules=baseline,la+ssl") == ("modules", ["baseline", "la+ssl"])

    def test_bad_sweeps(self):
        with pytest.raises(ConfigError, match="key=v1"):
            parse_sweep("p")
        with pytest.raises(ConfigError, match="no values"):
            parse_sweep("p=")
        with pytest.raises(ConfigError, match="unknown modules value"):
            parse_sweep("modules=baseline,everything")

    def test_overrides(self):
        assert sweep_overrides("split.p", "0.4") == ["split.p=0.4"]
        assert sweep_overrides("modules", "la") == ["use_la=true", "use_ssl=false", "T=0"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def test_gen_world(tmp_path):
    assert _main("gen-world", tmp_path) == 0
    world = load_world(tmp_path / "world.jsonl", WorldConfig(num_images=4, proposals_per_image=24))
    assert len(world) == 4
    assert (tmp_path / "config.yaml").exists()
    assert (tmp_path / "logs" / "w2n.log").exists()


def test_run_then_eval(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert _main("run", run_dir) == 0
    assert "mean_iou" in capsys.readouterr().out
    table = pd.read_csv(run_dir / "iterations.csv")
    assert table["t"].tolist() == [0, 1]

    eval_dir = tmp_path / "eval"
    assert _main("eval", eval_dir, "--params", str(run_dir / "params.json")) == 0
    summary = json.loads((eval_dir / "eval.json").read_text())
    assert summary["images"] == 3
    assert summary["ap_interpolation"] == "all-points"
    assert 0.0 <= summary["map"] <= 1.0
    assert summary["class_ap"]
    assert summary["map"] == pytest.approx(sum(summary["class_ap"].values()) / len(summary["class_ap"]))
    assert set(summary) >= {"part_class_map", "other_class_map"}

    run_summary = json.loads((run_dir / "summary.json").read_text())
    final = run_summary["reports"][-1]
    assert final["toy_map"] == pytest.approx(sum(final["class_ap"].values()) / len(final["class_ap"]))


def test_iou_curves(tmp_path):
    assert _main("iou-curves", tmp_path) == 0
    curves = pd.read_csv(tmp_path / "curves.csv")
    # steps 0 and 4 for each of the two runs
    assert curves["iter"].tolist() == [0, 4, 0, 4]
    assert curves["regularized"].tolist() == [0, 0, 1, 1]


def test_split_audit(tmp_path, capsys):
    assert _main("split-audit", tmp_path, "split.mode=instance") == 0
    assert (tmp_path / "split_audit.csv").exists()
    assert "instances labeled (instance" in capsys.readouterr().out


def test_split_audit_follows_the_run(tmp_path):
    for use_la in ("true", "false"):
        run_dir, audit_dir = tmp_path / f"run-{use_la}", tmp_path / f"audit-{use_la}"
        assert _main("run", run_dir, f"use_la={use_la}") == 0
        assert _main("split-audit", audit_dir, f"use_la={use_la}") == 0
        pd.testing.assert_frame_equal(
            pd.read_csv(audit_dir / "split_audit.csv"), pd.read_csv(run_dir / "split_audit_t1.csv")
        )


def test_run_outputs_do_not_depend_on_threads(tmp_path):
    single, pooled = tmp_path / "t1", tmp_path / "t4"
    assert _main("run", single, "--threads", "1") == 0
    assert _main("run", pooled, "--threads", "4") == 0
    for name in ("iterations.csv", "summary.json", "params.json", "pseudo/t1.jsonl", "split_audit_t1.csv"):
        assert (single / name).read_bytes() == (pooled / name).read_bytes(), name


def test_ablate(tmp_path):
    assert _main("ablate", tmp_path, "--sweep", "modules=baseline,la", "--seeds", "3,4") == 0
    table = pd.read_csv(tmp_path / "ablation.csv")
    assert len(table) == 4
    assert table["value"].tolist() == ["baseline", "baseline", "la", "la"]
    assert table["seed"].tolist() == [3, 4, 3, 4]
    means = pd.read_csv(tmp_path / "ablation_mean.csv")
    assert means["value"].tolist() == ["baseline", "la"]
    assert (tmp_path / "runs" / "modules-la-s4" / "iterations.csv").exists()
    assert (tmp_path / "logs" / "modules-baseline-s3.log").exists()


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

def test_unknown_key_exits_one(tmp_path, capsys):
    assert _main("run", tmp_path, "world.bogus=1") == 1
    assert "unknown config key: world.bogus" in capsys.readouterr().err


def test_config_is_required(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["run", "--out-dir", str(tmp_path)])
    assert info.value.code == 2


def test_missing_params_file_exits_one(tmp_path, capsys):
    assert _main("eval", tmp_path, "--params", str(tmp_path / "nope.json")) == 1
    err = capsys.readouterr().err
    assert "error: cannot read parameter file" in err
    assert "Traceback" not in err


def test_malformed_params_file_exits_one(tmp_path, capsys):
    bad = tmp_path / "params.json"
    bad.write_text('{"matrices": "nope"}')
    assert _main("eval", tmp_path, "--params", str(bad)) == 1
    assert "is malformed" in capsys.readouterr().err


def test_missing_world_file_exits_one(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert _main("run", run_dir) == 0
    args = ["--params", str(run_dir / "params.json"), "--world", str(tmp_path / "nope.jsonl")]
    assert _main("eval", tmp_path / "eval", *args) == 1
    assert "error: cannot read world file" in capsys.readouterr().err
