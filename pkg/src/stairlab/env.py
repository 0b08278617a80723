"""Kinematic planar stepper: a desk-scale stair-traversal MDP.

The stepper walks along a staircase's ascent axis choosing stride, swing
clearance, and a heading correction each decision. The swing foot follows
a parabolic arc; scraping the terrain (scuff) or landing within the edge
margin of a riser ends the episode as a failure, crossing the final riser
(or the flat-terrain goal line) ends it as a success.

Observation modes expose increasing amounts of terrain information:
proprioception only (blind), a forward height scan, or the explicit
terrain token (from the privileged teacher or an estimator).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .bev import BevGrid, project
from .errors import ConfigError
from .estimator import EstimatorConfig, estimate_token, estimate_yaw
from .nn import Mlp, pool_bev
from .sensor import SensorModel, scan
from .world import (
    StairClass,
    StairSpec,
    TerrainProfile,
    TerrainToken,
    ground_truth_token,
    wrap_pi,
)

STRIDE_BOUNDS = (0.10, 0.50)
CLEARANCE_BOUNDS = (0.0, 0.30)
DHEADING_BOUNDS = (-math.radians(5.0), math.radians(5.0))

ACTION_LOW = np.array([STRIDE_BOUNDS[0], CLEARANCE_BOUNDS[0], DHEADING_BOUNDS[0]])
ACTION_HIGH = np.array([STRIDE_BOUNDS[1], CLEARANCE_BOUNDS[1], DHEADING_BOUNDS[1]])

ARC_SAMPLE_PITCH = 0.01
_SCUFF_EPS = 1e-9

TRACE_COLUMNS = (
    "time",
    "s",
    "support_height",
    "v_cmd",
    "v_avg",
    "heading_err",
    "stride",
    "clearance",
    "dheading",
    "reward",
    "event",
)


class ObsMode(str, Enum):
    BLIND = "blind"
    HEIGHTSCAN = "heightscan"
    TOKEN = "token"


class TokenSource(str, Enum):
    GROUND_TRUTH = "ground_truth"
    ANALYTIC = "analytic"
    LEARNED = "learned"


OBS_DIM = {ObsMode.BLIND: 6, ObsMode.HEIGHTSCAN: 23, ObsMode.TOKEN: 12}

HEIGHTSCAN_SAMPLES = 17
HEIGHTSCAN_SPACING = 0.10


@dataclass(frozen=True)
class Action:
    stride: float
    clearance: float
    dheading: float

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=float).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def clamped(self) -> "Action":
        return Action(
            min(max(self.stride, STRIDE_BOUNDS[0]), STRIDE_BOUNDS[1]),
            min(max(self.clearance, CLEARANCE_BOUNDS[0]), CLEARANCE_BOUNDS[1]),
            min(max(self.dheading, DHEADING_BOUNDS[0]), DHEADING_BOUNDS[1]),
        )


@dataclass(frozen=True)
class RewardWeights:
    velocity: float = 1.0
    forward: float = 2.0
    clearance: float = 0.5
    heading: float = 0.5
    tracking_scale: float = 0.3
    terminal_bonus: float = 10.0


@dataclass(frozen=True)
class EnvConfig:
    obs_mode: ObsMode = ObsMode.TOKEN
    token_source: TokenSource = TokenSource.GROUND_TRUTH
    horizon: int = 200
    reward: RewardWeights = RewardWeights()
    edge_margin: float = 0.02
    v_cmd_range: tuple[float, float] = (0.2, 0.4)
    command_schedule: tuple[tuple[int, float], ...] | None = None
    token_noise_h: float = 0.0
    token_noise_d: float = 0.0
    token_flip_p: float = 0.0
    heightscan_noise: float = 0.0
    flat_goal: float = 3.0
    v_avg_alpha: float = 0.3
    step_dt: float = 1.0
    token_refresh: int = 5
    sensor: SensorModel = SensorModel()
    estimator: EstimatorConfig = EstimatorConfig()

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.token_refresh < 1:
            raise ConfigError("token_refresh must be >= 1")
        if not 0.0 <= self.token_flip_p <= 1.0:
            raise ConfigError("token_flip_p must lie in [0, 1]")


@dataclass
class EpisodeRecord:
    length: int
    return_: float
    success: bool
    event: str
    stair_class: StairClass
    h_step: float
    d_step: float
    mean_abs_verr: float
    mean_abs_heading: float


@dataclass(frozen=True)
class EvalMetrics:
    e_vel: float
    e_ang: float
    m_terrain: float
    m_reward: float
    success_rate: float


def arc_heights(z0: float, z1: float, clearance: float, u: np.ndarray) -> np.ndarray:
    """Swing-foot height along the arc, parametrized by u in [0, 1].

    The arc is the parabola through (0, z0) and (1, z1) whose maximum is
    max(z0, z1) + clearance. With zero clearance the vertex sits at the
    higher endpoint (a flat segment degenerates to a straight line).
    """
    apex = max(z0, z1) + clearance
    a0 = math.sqrt(max(apex - z0, 0.0))
    a1 = math.sqrt(max(apex - z1, 0.0))
    if a0 + a1 == 0.0:
        return np.full_like(np.asarray(u, dtype=float), apex)
    u_star = a0 / (a0 + a1)
    if u_star > 0.0:
        coeff = (apex - z0) / (u_star * u_star)
    else:
        coeff = apex - z1
    du = np.asarray(u, dtype=float) - u_star
    return apex - coeff * du * du


class StepperEnv:
    """Single stepper instance; owns its RNG, deterministic per seed."""

    def __init__(self, cfg: EnvConfig, seed, estimator_net: Mlp | None = None):
        self.cfg = cfg
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._estimator_net = estimator_net
        self.spec: StairSpec | None = None
        self.done = True

    # -- lifecycle ---------------------------------------------------------

    def reset(self, spec: StairSpec) -> np.ndarray:
        if spec.lead_flat < 0.3:
            raise ConfigError("lead_flat must be >= 0.3 m to place the stepper")
        self.spec = spec
        self.profile = TerrainProfile(spec)
        self._risers = self.profile.riser_positions()
        self._axis_yaw = spec.stair_yaw if spec.stair_class != StairClass.FLAT else 0.0

        self.s = -spec.lead_flat / 2.0
        self.lat = 0.0
        self.support_height = float(self.profile.height_on_axis(self.s))
        if spec.stair_class == StairClass.FLAT:
            self.heading_err = 0.0
        else:
            self.heading_err = wrap_pi(0.0 - spec.stair_yaw)
        self.v_avg = 0.0
        self.last_dh = 0.0
        self.prev_action = Action(0.0, 0.0, 0.0)
        self.t = 0
        self.step_count = 0
        self.done = False
        self._goal_s = (
            self.s + self.cfg.flat_goal
            if spec.stair_class == StairClass.FLAT
            else float(self._risers[-1])
        )
        if self.cfg.command_schedule is None:
            lo, hi = self.cfg.v_cmd_range
            self._episode_cmd = float(self._rng.uniform(lo, hi))
        self.v_cmd = self._command_at(0)
        self._sum_abs_verr = 0.0
        self._sum_abs_heading = 0.0
        self._return = 0.0
        self._token_cache: TerrainToken | None = None
        self._token_cache_t = -1
        self._features_cache: np.ndarray | None = None
        self._features_cache_t = -1
        self.trace_rows: list[dict] = []
        self.last_obs = self.observe()
        return self.last_obs

    def _command_at(self, t: int) -> float:
        sched = self.cfg.command_schedule
        if sched is None:
            return self._episode_cmd
        v = sched[0][1]
        for t_start, value in sched:
            if t >= t_start:
                v = value
        return float(v)

    # -- pose helpers ------------------------------------------------------

    @property
    def world_pose(self) -> tuple[float, float, float]:
        spec = self.spec
        ca, sa = math.cos(self._axis_yaw), math.sin(self._axis_yaw)
        px = spec.origin_x + self.s * ca - self.lat * sa
        py = spec.origin_y + self.s * sa + self.lat * ca
        return px, py, wrap_pi(self._axis_yaw + self.heading_err)

    # -- dynamics ----------------------------------------------------------

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        """Advance one decision; returns (obs, reward, done, info).

        Failure modes: the swing arc sampling below terrain (scuff) and
        landing within the edge margin of a riser line. Both terminate
        with the terminal penalty; crossing the goal line terminates with
        the terminal bonus.
        """
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        act = (action if isinstance(action, Action) else Action.from_array(action)).clamped()

        he_new = wrap_pi(self.heading_err - act.dheading)
        ds = act.stride * math.cos(he_new)
        s_new = self.s + ds
        z0 = self.support_height
        z1 = float(self.profile.height_on_axis(s_new))

        n_samples = max(2, int(math.ceil(abs(ds) / ARC_SAMPLE_PITCH)))
        u = np.linspace(0.0, 1.0, n_samples + 1)
        foot = arc_heights(z0, z1, act.clearance, u)
        terrain = self.profile.height_on_axis(self.s + u * ds)
        scuffed = bool(np.any(foot < terrain - _SCUFF_EPS))

        on_edge = False
        if not scuffed and self._risers.size:
            on_edge = bool(np.min(np.abs(s_new - self._risers)) < self.cfg.edge_margin)

        # State advances even on a terminal step so the trace shows it.
        self.s = s_new
        self.lat += act.stride * math.sin(he_new)
        self.heading_err = he_new
        self.last_dh = z1 - z0
        self.support_height = z1
        v_inst = ds / self.cfg.step_dt
        alpha = self.cfg.v_avg_alpha
        self.v_avg = (1.0 - alpha) * self.v_avg + alpha * v_inst
        self.step_count += 1
        self.prev_action = act

        w = self.cfg.reward
        v_cmd_used = self.v_cmd
        verr = (self.v_avg - self.v_cmd) / w.tracking_scale
        reward = (
            w.velocity * math.exp(-verr * verr)
            + w.forward * ds
            - w.clearance * act.clearance
            - w.heading * abs(he_new)
        )

        event = "none"
        success = False
        if scuffed:
            event = "scuff"
            reward -= w.terminal_bonus
            self.done = True
        elif on_edge:
            event = "edge"
            reward -= w.terminal_bonus
            self.done = True
        elif s_new > self._goal_s:
            event = "success"
            reward += w.terminal_bonus
            success = True
            self.done = True

        self._sum_abs_verr += abs(self.v_avg - self.v_cmd)
        self._sum_abs_heading += abs(self.heading_err)
        self._return += reward

        self.t += 1
        if not self.done and self.t >= self.cfg.horizon:
            event = "timeout"
            self.done = True
        self.v_cmd = self._command_at(self.t)

        self.trace_rows.append(
            {
                "time": self.t - 1,
                "s": self.s,
                "support_height": self.support_height,
                "v_cmd": v_cmd_used,
                "v_avg": self.v_avg,
                "heading_err": self.heading_err,
                "stride": act.stride,
                "clearance": act.clearance,
                "dheading": act.dheading,
                "reward": reward,
                "event": event,
            }
        )

        obs = self.observe() if not self.done else np.zeros(OBS_DIM[self.cfg.obs_mode])
        self.last_obs = obs
        info = {"event": event, "success": success, "s": self.s}
        return obs, reward, self.done, info

    def episode_record(self) -> EpisodeRecord:
        n = max(1, self.step_count)
        last_event = self.trace_rows[-1]["event"] if self.trace_rows else "none"
        return EpisodeRecord(
            length=self.step_count,
            return_=self._return,
            success=last_event == "success",
            event=last_event,
            stair_class=self.spec.stair_class,
            h_step=self.spec.h_step,
            d_step=self.spec.d_step,
            mean_abs_verr=self._sum_abs_verr / n,
            mean_abs_heading=self._sum_abs_heading / n,
        )

    # -- observations ------------------------------------------------------

    def observe(self) -> np.ndarray:
        blind = np.array(
            [
                self.last_dh,
                self.v_avg,
                self.v_cmd,
                self.prev_action.stride,
                self.prev_action.clearance,
                self.prev_action.dheading,
            ]
        )
        mode = self.cfg.obs_mode
        if mode == ObsMode.BLIND:
            return blind
        if mode == ObsMode.HEIGHTSCAN:
            ahead = self.s + HEIGHTSCAN_SPACING * np.arange(1, HEIGHTSCAN_SAMPLES + 1) * math.cos(
                self.heading_err
            )
            heights = self.profile.height_on_axis(ahead) - self.support_height
            if self.cfg.heightscan_noise > 0.0:
                heights = heights + self._rng.normal(0.0, self.cfg.heightscan_noise, heights.shape)
            return np.concatenate([blind, heights])
        return np.concatenate([blind, self._token().as_vector()])

    def _token(self) -> TerrainToken:
        cfg = self.cfg
        if cfg.token_source == TokenSource.GROUND_TRUTH:
            token = ground_truth_token(self.spec, self.world_pose[2], self.world_pose[:2])
            return self._perturb_token(token)
        if self._token_cache is None or self.t - self._token_cache_t >= cfg.token_refresh:
            grid = self._sense_grid()
            if cfg.token_source == TokenSource.ANALYTIC:
                token = estimate_token(grid, cfg.estimator).token
            else:
                if self._estimator_net is None:
                    raise ConfigError("learned token source requires an estimator net")
                feats = pool_bev(grid)
                self._features_cache = feats
                self._features_cache_t = self.t
                logits = self._estimator_net(feats[None, :])
                cls = StairClass(int(np.argmax(logits[0, :3])))
                h = float(logits[0, 3])
                d = float(logits[0, 4])
                theta = wrap_pi(-estimate_yaw(grid, cfg.estimator))
                if cls == StairClass.FLAT:
                    h = d = 0.0
                token = TerrainToken(cls, max(h, 0.0), max(d, 0.0), theta)
            self._token_cache = token
            self._token_cache_t = self.t
        return self._token_cache

    def _perturb_token(self, token: TerrainToken) -> TerrainToken:
        cfg = self.cfg
        if cfg.token_noise_h == 0.0 and cfg.token_noise_d == 0.0 and cfg.token_flip_p == 0.0:
            return token
        h, d, cls = token.h_step, token.d_step, token.stair_class
        if token.stair_class != StairClass.FLAT:
            if cfg.token_noise_h > 0.0:
                h = max(0.0, h + float(self._rng.normal(0.0, cfg.token_noise_h)))
            if cfg.token_noise_d > 0.0:
                d = max(0.0, d + float(self._rng.normal(0.0, cfg.token_noise_d)))
        if cfg.token_flip_p > 0.0 and self._rng.random() < cfg.token_flip_p:
            others = [c for c in StairClass if c != cls]
            cls = others[int(self._rng.integers(len(others)))]
            if cls == StairClass.FLAT:
                h = d = 0.0
        return TerrainToken(cls, h, d, token.theta)

    def _sense_grid(self) -> BevGrid:
        seed = int(self._rng.integers(0, 2**63 - 1))
        return project(scan(self.profile, self.world_pose, self.cfg.sensor, seed))

    def supervision_sample(self) -> tuple[np.ndarray, int, float, float]:
        """Pooled BEV features of the current pose plus teacher labels."""
        if self._features_cache_t != self.t or self._features_cache is None:
            self._features_cache = pool_bev(self._sense_grid())
            self._features_cache_t = self.t
        gt = ground_truth_token(self.spec, self.world_pose[2], self.world_pose[:2])
        return self._features_cache, int(gt.stair_class), gt.h_step, gt.d_step


def success(record: EpisodeRecord) -> bool:
    return record.success


def metrics(records: list[EpisodeRecord], horizon: int) -> EvalMetrics:
    """Aggregate evaluation metrics over a set of episodes."""
    if not records:
        raise ValueError("metrics over an empty episode set are undefined")
    e_vel = float(np.mean([r.mean_abs_verr for r in records]))
    e_ang = float(np.mean([r.mean_abs_heading for r in records]))
    m_reward = float(np.mean([r.return_ / horizon for r in records]))
    rate = float(np.mean([r.success for r in records]))

    heights = np.round([r.h_step for r in records], 6)
    m_terrain = 0.0
    for h in np.unique(heights):
        group = [r.success for r, hh in zip(records, heights) if hh == h]
        if np.mean(group) >= 0.5:
            m_terrain = max(m_terrain, float(h))
    return EvalMetrics(e_vel, e_ang, m_terrain, m_reward, rate)


def write_trace(path, rows: list[dict]) -> None:
    """Episode trace CSV with the fixed column set."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
