import math

import pytest

from stairlab.config import (
    ExperimentConfig,
    canonical_text,
    config_hash,
    default_config,
    load_config,
    parse_config_text,
)
from stairlab.env import ObsMode, TokenSource
from stairlab.errors import ConfigError


def test_defaults_load():
    cfg = default_config()
    assert cfg.ppo.gamma == 0.99
    assert cfg.run.seeds == (1, 2, 3)
    assert cfg.estimator.riser_threshold == 0.06
    # The generalization sweep covers the six standard heights.
    assert cfg.generalize.eval_heights == (0.12, 0.14, 0.16, 0.18, 0.20, 0.22)
    assert cfg.generalize.train_heights == (0.12, 0.14, 0.16)
    assert cfg.benchmark.n_configs == 1000


def test_overrides_applied(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(
        """
[world]
h_min = 0.10
h_max = 0.20
weight_flat = 0.2
weight_up = 0.8
weight_down = 0.0

[env]
obs_mode = heightscan
token_source = analytic
horizon = 50

[ppo]
gamma = 0.95
n_envs = 4

[run]
seeds = 5,6
out_dir = out
"""
    )
    cfg = load_config(path)
    assert cfg.world.h_step == (0.10, 0.20)
    assert cfg.world.class_weights == (0.2, 0.8, 0.0)
    assert cfg.env.obs_mode == ObsMode.HEIGHTSCAN
    assert cfg.env.token_source == TokenSource.ANALYTIC
    assert cfg.env.horizon == 50
    assert cfg.ppo.gamma == 0.95
    assert cfg.run.seeds == (5, 6)
    assert cfg.base_dir == tmp_path.resolve()


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config section"):
        parse_config_text("[nope]\nx = 1\n", base_dir=None)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("[ppo]\nlearning = 1\n", base_dir=None)


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config_text("[ppo]\ngamma = fast\n", base_dir=None)


def test_invalid_range_propagates():
    with pytest.raises(ConfigError):
        parse_config_text("[world]\nh_min = 0.3\nh_max = 0.1\n", base_dir=None)


def test_yaw_converted_to_radians():
    cfg = parse_config_text("[world]\nyaw_min_deg = -10\nyaw_max_deg = 10\n", base_dir=None)
    assert cfg.world.stair_yaw[0] == pytest.approx(math.radians(-10))
    assert cfg.world.stair_yaw[1] == pytest.approx(math.radians(10))


def test_schedule_parsing():
    cfg = parse_config_text("[track]\nschedule = 0:0.2, 50:0.35\n", base_dir=None)
    assert cfg.track.schedule == ((0, 0.2), (50, 0.35))


def test_height_choices_parsing():
    cfg = parse_config_text("[world]\nh_choices = 0.12,0.14,0.16\n", base_dir=None)
    assert cfg.world.h_choices == (0.12, 0.14, 0.16)


def test_canonical_text_stable_and_hash_sensitive():
    a = default_config()
    b = parse_config_text("[ppo]\ngamma = 0.98\n", base_dir=None)
    assert canonical_text(a) == canonical_text(default_config())
    assert config_hash(a) != config_hash(b)
    assert "ppo.gamma = 0.98" in canonical_text(b)


def test_comments_and_inline_comments():
    cfg = parse_config_text(
        "# top comment\n[ppo]\ngamma = 0.9 # inline\n", base_dir=None
    )
    assert cfg.ppo.gamma == 0.9
