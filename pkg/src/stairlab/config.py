"""Experiment configuration: strict INI-style key-value files.

Every tunable of the pipeline lives in one ``ExperimentConfig``. Files
override defaults section by section; unknown sections or keys are
rejected. Paths in the file resolve relative to the file itself. The
canonical text dump of the effective config is hashed into output
manifests so re-runs are verifiable.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .env import EnvConfig, ObsMode, RewardWeights, TokenSource
from .errors import ConfigError
from .estimator import EstimatorConfig
from .nn import TerrainLossWeights
from .ppo import PpoConfig, TrainConfig
from .sensor import SensorModel
from .world import ParameterRanges


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (1, 2, 3)
    out_dir: str = "runs"


@dataclass(frozen=True)
class BenchmarkConfig:
    """Randomized estimator benchmark protocol."""

    n_configs: int = 1000
    h_range: tuple[float, float] = (0.10, 0.25)
    d_range: tuple[float, float] = (0.25, 0.35)
    yaw_range_deg: tuple[float, float] = (-20.0, 20.0)
    class_weights: tuple[float, float, float] = (0.0, 0.5, 0.5)
    dropout: float = 0.0


@dataclass(frozen=True)
class AblationConfig:
    updates: int = 150
    eval_episodes: int = 100
    terrain_heights: tuple[float, ...] = (0.12, 0.16, 0.20, 0.24)
    terrain_episodes: int = 30
    success_threshold: float = 0.8
    success_window: int = 10


@dataclass(frozen=True)
class GeneralizeConfig:
    updates: int = 150
    train_heights: tuple[float, ...] = (0.12, 0.14, 0.16)
    eval_heights: tuple[float, ...] = (0.12, 0.14, 0.16, 0.18, 0.20, 0.22)
    episodes: int = 100
    modes: tuple[str, ...] = ("token", "blind")


@dataclass(frozen=True)
class TrackConfig:
    updates: int = 150
    schedule: tuple[tuple[int, float], ...] = ((0, 0.20), (60, 0.40), (120, 0.30))
    h_step: float = 0.14
    d_step: float = 0.30
    n_steps: int = 400
    policy_dir: str = ""
    steady_bound: float = 0.15


@dataclass(frozen=True)
class ExperimentConfig:
    world: ParameterRanges = ParameterRanges()
    sensor: SensorModel = SensorModel()
    estimator: EstimatorConfig = EstimatorConfig()
    # Observation noise mirrors the perception stack: height scans carry
    # the depth sensor's sigma, tokens the estimator's error scale. The
    # EnvConfig type itself defaults both to zero.
    env: EnvConfig = EnvConfig(heightscan_noise=0.01, token_noise_h=0.005, token_noise_d=0.005)
    ppo: PpoConfig = PpoConfig(horizon=128, n_envs=16)
    train: TrainConfig = TrainConfig()
    loss: TerrainLossWeights = TerrainLossWeights()
    run: RunConfig = RunConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()
    ablation: AblationConfig = AblationConfig()
    generalize: GeneralizeConfig = GeneralizeConfig()
    track: TrackConfig = TrackConfig()
    base_dir: Path = field(default_factory=Path.cwd)


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {raw!r}")


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.split(",") if tok.strip())


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split(",") if tok.strip())


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in raw.split(",") if tok.strip())


def _parse_schedule(raw: str) -> tuple[tuple[int, float], ...]:
    """Piecewise-constant schedule: "0:0.2,60:0.4" -> ((0, 0.2), (60, 0.4))."""
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ":" not in tok:
            raise ConfigError(f"schedule entry {tok!r} must be time:value")
        t, v = tok.split(":", 1)
        out.append((int(t), float(v)))
    if not out:
        raise ConfigError("empty command schedule")
    return tuple(out)


# section -> key -> (target dataclass field path, converter)
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "world": {
        "h_min": ("world.h_step.0", float),
        "h_max": ("world.h_step.1", float),
        "h_choices": ("world.h_choices", _parse_float_list),
        "d_min": ("world.d_step.0", float),
        "d_max": ("world.d_step.1", float),
        "yaw_min_deg": ("world.stair_yaw.0", lambda s: math.radians(float(s))),
        "yaw_max_deg": ("world.stair_yaw.1", lambda s: math.radians(float(s))),
        "n_steps_min": ("world.n_steps.0", int),
        "n_steps_max": ("world.n_steps.1", int),
        "lead_flat_min": ("world.lead_flat.0", float),
        "lead_flat_max": ("world.lead_flat.1", float),
        "tail_flat_min": ("world.tail_flat.0", float),
        "tail_flat_max": ("world.tail_flat.1", float),
        "origin_x": ("world.origin_x.both", float),
        "origin_y": ("world.origin_y.both", float),
        "weight_flat": ("world.class_weights.0", float),
        "weight_up": ("world.class_weights.1", float),
        "weight_down": ("world.class_weights.2", float),
    },
    "sensor": {
        "window": ("sensor.window", float),
        "pitch": ("sensor.sample_pitch", float),
        "noise_sigma_z": ("sensor.noise_sigma_z", float),
        "dropout": ("sensor.dropout_rate", float),
        "occlusion": ("sensor.occlusion", _parse_bool),
        "sensor_height": ("sensor.sensor_height", float),
    },
    "estimator": {
        "yaw_min_deg": ("estimator.yaw_range_deg.0", float),
        "yaw_max_deg": ("estimator.yaw_range_deg.1", float),
        "yaw_pitch_deg": ("estimator.yaw_pitch_deg", float),
        "profile_bin": ("estimator.profile_bin", float),
        "riser_threshold": ("estimator.riser_threshold", float),
        "min_risers": ("estimator.min_risers_for_stairs", int),
        "min_occupancy": ("estimator.min_occupancy", float),
    },
    "env": {
        "obs_mode": ("env.obs_mode", ObsMode),
        "token_source": ("env.token_source", TokenSource),
        "horizon": ("env.horizon", int),
        "edge_margin": ("env.edge_margin", float),
        "v_cmd_min": ("env.v_cmd_range.0", float),
        "v_cmd_max": ("env.v_cmd_range.1", float),
        "w_velocity": ("env.reward.velocity", float),
        "w_forward": ("env.reward.forward", float),
        "w_clearance": ("env.reward.clearance", float),
        "w_heading": ("env.reward.heading", float),
        "tracking_scale": ("env.reward.tracking_scale", float),
        "terminal_bonus": ("env.reward.terminal_bonus", float),
        "token_noise_h": ("env.token_noise_h", float),
        "token_noise_d": ("env.token_noise_d", float),
        "token_flip_p": ("env.token_flip_p", float),
        "heightscan_noise": ("env.heightscan_noise", float),
        "flat_goal": ("env.flat_goal", float),
        "v_avg_alpha": ("env.v_avg_alpha", float),
        "step_dt": ("env.step_dt", float),
        "token_refresh": ("env.token_refresh", int),
    },
    "ppo": {
        "gamma": ("ppo.gamma", float),
        "gae_lambda": ("ppo.gae_lambda", float),
        "clip": ("ppo.clip", float),
        "epochs": ("ppo.epochs", int),
        "minibatches": ("ppo.minibatches", int),
        "entropy_coef": ("ppo.entropy_coef", float),
        "value_coef": ("ppo.value_coef", float),
        "learning_rate": ("ppo.learning_rate", float),
        "horizon": ("ppo.horizon", int),
        "n_envs": ("ppo.n_envs", int),
        "alpha": ("ppo.alpha", float),
    },
    "train": {
        "stage1_updates": ("train.stage1_updates", int),
        "stage2_updates": ("train.stage2_updates", int),
        "stage3_updates": ("train.stage3_updates", int),
        "stage2_epochs": ("train.stage2_epochs", int),
        "estimator_lr": ("train.estimator_lr", float),
    },
    "loss": {
        "lambda_cls": ("loss.lambda_cls", float),
        "lambda_h": ("loss.lambda_h", float),
        "lambda_d": ("loss.lambda_d", float),
    },
    "run": {
        "seeds": ("run.seeds", _parse_int_list),
        "out_dir": ("run.out_dir", str),
    },
    "benchmark": {
        "n_configs": ("benchmark.n_configs", int),
        "h_min": ("benchmark.h_range.0", float),
        "h_max": ("benchmark.h_range.1", float),
        "d_min": ("benchmark.d_range.0", float),
        "d_max": ("benchmark.d_range.1", float),
        "yaw_min_deg": ("benchmark.yaw_range_deg.0", float),
        "yaw_max_deg": ("benchmark.yaw_range_deg.1", float),
        "weight_flat": ("benchmark.class_weights.0", float),
        "weight_up": ("benchmark.class_weights.1", float),
        "weight_down": ("benchmark.class_weights.2", float),
        "dropout": ("benchmark.dropout", float),
    },
    "ablation": {
        "updates": ("ablation.updates", int),
        "eval_episodes": ("ablation.eval_episodes", int),
        "terrain_heights": ("ablation.terrain_heights", _parse_float_list),
        "terrain_episodes": ("ablation.terrain_episodes", int),
        "success_threshold": ("ablation.success_threshold", float),
        "success_window": ("ablation.success_window", int),
    },
    "generalize": {
        "updates": ("generalize.updates", int),
        "train_heights": ("generalize.train_heights", _parse_float_list),
        "eval_heights": ("generalize.eval_heights", _parse_float_list),
        "episodes": ("generalize.episodes", int),
        "modes": ("generalize.modes", _parse_str_list),
    },
    "track": {
        "updates": ("track.updates", int),
        "schedule": ("track.schedule", _parse_schedule),
        "h_step": ("track.h_step", float),
        "d_step": ("track.d_step", float),
        "n_steps": ("track.n_steps", int),
        "policy_dir": ("track.policy_dir", str),
        "steady_bound": ("track.steady_bound", float),
    },
}


def _set_path(tree: dict, path: str, value) -> None:
    parts = path.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _tuple_update(current: tuple, edits: dict) -> tuple:
    out = list(current)
    for idx, value in edits.items():
        if idx == "both":
            out = [value] * len(out)
        else:
            out[int(idx)] = value
    return tuple(out)


def _rebuild(obj, edits: dict):
    """Apply nested edits to a frozen dataclass."""
    kwargs = {}
    for f in fields(obj):
        if f.name not in edits:
            continue
        sub = edits[f.name]
        current = getattr(obj, f.name)
        if isinstance(sub, dict):
            if isinstance(current, tuple):
                kwargs[f.name] = _tuple_update(current, sub)
            else:
                kwargs[f.name] = _rebuild(current, sub)
        else:
            kwargs[f.name] = sub
    return replace(obj, **kwargs)


def parse_config_text(text: str, base_dir: Path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    edits: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            path, converter = _SCHEMA[section][key]
            try:
                value = converter(raw)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}: {exc}") from exc
            _set_path(edits, path, value)

    cfg = ExperimentConfig(base_dir=base_dir)
    return _rebuild(cfg, edits)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), base_dir=path.parent.resolve())


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (ObsMode, TokenSource)):
        return value.value
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def canonical_text(cfg: ExperimentConfig) -> str:
    """Deterministic dump of every effective setting, for hashing/manifests."""
    lines = []
    for section_field in fields(cfg):
        if section_field.name == "base_dir":
            continue
        section = getattr(cfg, section_field.name)
        for f in sorted(fields(section), key=lambda f: f.name):
            value = getattr(section, f.name)
            if value is None:
                rendered = ""
            elif isinstance(value, tuple) and value and isinstance(value[0], tuple):
                rendered = ",".join(f"{int(t)}:{v!r}" for t, v in value)
            else:
                rendered = _format_value(value)
            lines.append(f"{section_field.name}.{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:16]
