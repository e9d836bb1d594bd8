from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from w2n.config import (
    CONFIG_DIR,
    RunConfig,
    dump_run_config,
    load_run_config,
    parse_override,
    resolve_config_path,
    run_config_from_dict,
)
from w2n.errors import ConfigError


def _write_yaml(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.dump(data, f)


def test_load_config(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    _write_yaml(cfg_path, {"T": 1, "world": {"num_images": 5, "seed": 3}, "split": {"mode": "instance"}})

    cfg = load_run_config(cfg_path)
    assert cfg.T == 1
    assert cfg.world.num_images == 5
    assert cfg.world.seed == 3
    assert cfg.split.mode == "instance"
    # untouched keys keep their defaults
    assert cfg.la.beta == 0.8
    assert cfg.ssod.lambda_u == 2.0


def test_defaults_file_matches_dataclass_defaults():
    assert load_run_config("defaults") == RunConfig()


def test_default_constants():
    cfg = RunConfig()
    assert (cfg.la.tau_score, cfg.la.tau_assign, cfg.la.lambda_re, cfg.la.alpha, cfg.la.beta) == (
        0.1, 0.5, 0.1, 0.05, 0.8,
    )
    assert cfg.split.p == 0.6
    assert cfg.T == 2
    assert cfg.ssod.lambda_u == 2.0


def test_part_noise_config():
    cfg = load_run_config("part_noise")
    assert cfg.noise.part_rate == 1.0
    assert cfg.noise.mislabel_rate == 0.0
    assert cfg.seed == 7


def test_resolve_config_path_by_name():
    assert resolve_config_path("defaults") == CONFIG_DIR / "defaults.yaml"


def test_missing_config_file():
    with pytest.raises(ConfigError, match="config not found"):
        resolve_config_path("no-such-config")


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------

class TestOverrides:
    def test_dotted_override(self):
        cfg = load_run_config(None, ["world.seed=11", "la.lambda_re=0", "use_la=false"])
        assert cfg.world.seed == 11
        assert cfg.la.lambda_re == 0.0
        assert cfg.use_la is False

    def test_aliases(self):
        cfg = load_run_config(None, ["split_mode=image", "p=0.4"])
        assert cfg.split.mode == "image"
        assert cfg.split.p == 0.4

    def test_list_value(self):
        cfg = load_run_config(None, ["world.objects_per_image=[2, 4]"])
        assert cfg.world.objects_per_image == (2, 4)

    def test_override_wins_over_file(self, tmp_path):
        cfg_path = tmp_path / "run.yaml"
        _write_yaml(cfg_path, {"world": {"seed": 3}})
        cfg = load_run_config(cfg_path, ["world.seed=4"])
        assert cfg.world.seed == 4

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="world.colour"):
            load_run_config(None, ["world.colour=red"])

    def test_unknown_section_named(self):
        with pytest.raises(ConfigError, match="detector.depth"):
            load_run_config(None, ["detector.depth=3"])

    def test_unknown_key_in_file(self, tmp_path):
        cfg_path = tmp_path / "run.yaml"
        _write_yaml(cfg_path, {"la": {"gamma": 1}})
        with pytest.raises(ConfigError, match="la.gamma"):
            load_run_config(cfg_path)

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_override("world.seed")

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="world.num_images"):
            load_run_config(None, ["world.num_images=many"])


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

class TestValidation:
    def test_negative_T(self):
        with pytest.raises(ConfigError, match="T must be >= 0"):
            run_config_from_dict({"T": -1})

    def test_split_mode(self):
        with pytest.raises(ConfigError, match="split.mode"):
            run_config_from_dict({"split": {"mode": "random"}})

    def test_p_range(self):
        with pytest.raises(ConfigError, match="split.p"):
            run_config_from_dict({"split": {"p": 0.0}})

    def test_feature_dim_too_small(self):
        with pytest.raises(ConfigError, match="feature_dim"):
            run_config_from_dict({"world": {"feature_dim": 10}})

    def test_noise_rates_sum(self):
        with pytest.raises(ConfigError, match="sum to at most 1"):
            run_config_from_dict({"noise": {"part_rate": 0.8, "mislabel_rate": 0.3}})

    def test_negative_feature_scale(self):
        with pytest.raises(ConfigError, match="feature scales"):
            run_config_from_dict({"world": {"object_delta_scale": -1.0}})

    def test_negative_warmup(self):
        with pytest.raises(ConfigError, match="warmup_steps"):
            run_config_from_dict({"la": {"warmup_steps": -1}})


def test_config_echo_reloads_equal(tmp_path):
    cfg = load_run_config("defaults", ["world.seed=5", "split.mode=image", "ssod.jitter_scale=[0.9, 1.1]"])
    echo = dump_run_config(cfg, tmp_path / "config.yaml")
    assert load_run_config(echo) == cfg
