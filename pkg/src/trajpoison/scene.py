"""Driving scenes: data model, synthetic generation, kinematic statistics and JSONL I/O.

Scenes live on a straight multi-lane road running along +x. Every agent carries an
observation track of ``obs_len`` points and a future track of ``pred_len`` points
sampled at a uniform ``dt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COORD_BOUND = 10_000.0
MAX_SPEED = 60.0
STAT_CHANNELS = ("velocity", "lon_acc", "lat_acc", "lon_jerk", "lat_jerk")


class ConfigError(ValueError):
    """Invalid configuration values."""


class SceneValidationError(ValueError):
    """A scene or trajectory violates its invariants."""


class SceneParseError(ValueError):
    """A scene file line could not be decoded."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled planar track; ``points`` has shape (n, 2) in meters."""

    points: np.ndarray
    dt: float

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise SceneValidationError(f"points must have shape (n, 2), got {pts.shape}")
        if len(pts) < 2:
            raise SceneValidationError("trajectory needs at least 2 points")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise SceneValidationError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(pts)):
            raise SceneValidationError("non-finite waypoint")
        if np.any(np.abs(pts) > COORD_BOUND):
            raise SceneValidationError("waypoint outside the 10 km sanity bound")
        speeds = np.linalg.norm(np.diff(pts, axis=0), axis=1) / self.dt
        if np.any(speeds > MAX_SPEED + 1e-9):
            raise SceneValidationError(f"segment speed {speeds.max():.2f} m/s exceeds {MAX_SPEED}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.dt, self.points.tobytes()))

    def shifted(self, offset) -> "Trajectory":
        return Trajectory(self.points + np.asarray(offset, dtype=np.float64), self.dt)


@dataclass(frozen=True, eq=False)
class Agent:
    """One agent: observation, future and an optional per-step observation presence mask."""

    id: str
    obs: Trajectory
    fut: Trajectory
    mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.mask is not None:
            mask = tuple(bool(m) for m in self.mask)
            if len(mask) != len(self.obs):
                raise SceneValidationError(f"agent {self.id}: mask length != observation length")
            object.__setattr__(self, "mask", mask)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Agent):
            return NotImplemented
        return (
            self.id == other.id
            and self.obs == other.obs
            and self.fut == other.fut
            and self.presence == other.presence
        )

    @property
    def presence(self) -> tuple[bool, ...]:
        return self.mask if self.mask is not None else (True,) * len(self.obs)


@dataclass(frozen=True, eq=False)
class DrivingScene:
    scene_id: str
    av_id: str
    target_id: str
    agents: tuple[Agent, ...]

    def __post_init__(self):
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        ids = [a.id for a in agents]
        if len(set(ids)) != len(ids):
            raise SceneValidationError(f"scene {self.scene_id}: duplicate agent ids")
        if self.av_id == self.target_id:
            raise SceneValidationError(f"scene {self.scene_id}: target_id equals av_id")
        for role, aid in (("av_id", self.av_id), ("target_id", self.target_id)):
            if aid not in ids:
                raise SceneValidationError(f"scene {self.scene_id}: {role} {aid!r} not among agents")
        obs_lens = {len(a.obs) for a in agents}
        fut_lens = {len(a.fut) for a in agents}
        dts = {a.obs.dt for a in agents} | {a.fut.dt for a in agents}
        if len(obs_lens) != 1 or len(fut_lens) != 1:
            raise SceneValidationError(f"scene {self.scene_id}: ragged observation/future lengths")
        if len(dts) != 1:
            raise SceneValidationError(f"scene {self.scene_id}: mixed dt values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, DrivingScene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.av_id == other.av_id
            and self.target_id == other.target_id
            and self.agents == other.agents
        )

    @property
    def dt(self) -> float:
        return self.agents[0].obs.dt

    @property
    def obs_len(self) -> int:
        return len(self.agents[0].obs)

    @property
    def pred_len(self) -> int:
        return len(self.agents[0].fut)

    def agent(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def av(self) -> Agent:
        return self.agent(self.av_id)

    @property
    def target(self) -> Agent:
        return self.agent(self.target_id)

    def with_agents(self, extra: Iterable[Agent]) -> "DrivingScene":
        return DrivingScene(self.scene_id, self.av_id, self.target_id, self.agents + tuple(extra))

    def without_agents(self, ids: Iterable[str]) -> "DrivingScene":
        drop = set(ids)
        kept = tuple(a for a in self.agents if a.id not in drop)
        return DrivingScene(self.scene_id, self.av_id, self.target_id, kept)

    def translated(self, offset) -> "DrivingScene":
        agents = tuple(
            Agent(a.id, a.obs.shifted(offset), a.fut.shifted(offset), a.mask) for a in self.agents
        )
        return DrivingScene(self.scene_id, self.av_id, self.target_id, agents)


# ---------------------------------------------------------------------------
# Kinematic statistics


@dataclass(frozen=True)
class ChannelStat:
    mu: float
    sigma: float

    def bounds(self, k: float = 3.0) -> tuple[float, float]:
        return self.mu - k * self.sigma, self.mu + k * self.sigma


@dataclass(frozen=True)
class DatasetStats:
    """Mean and standard deviation of the five kinematic channels (SI units)."""

    velocity: ChannelStat
    lon_acc: ChannelStat
    lat_acc: ChannelStat
    lon_jerk: ChannelStat
    lat_jerk: ChannelStat

    def __getitem__(self, name: str) -> ChannelStat:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {c: {"mu": self[c].mu, "sigma": self[c].sigma} for c in STAT_CHANNELS}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(**{c: ChannelStat(float(d[c]["mu"]), float(d[c]["sigma"])) for c in STAT_CHANNELS})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def kinematic_channels(points: np.ndarray, dt: float) -> dict[str, np.ndarray]:
    """Per-timestep kinematic channels of a sampled track.

    ``points`` has shape (n, 2) or a batch (..., n, 2); channels keep the leading dims.
    Velocity comes from first differences. Acceleration (second differences) and jerk
    (third differences) are split into longitudinal/lateral parts using the heading of
    the last segment each difference stencil touches (segment ``i + 1`` for
    acceleration sample ``i``, segment ``i + 2`` for jerk sample ``i``). Degenerate
    (zero-length) segments inherit the previous heading.

    Tracks shorter than 4 points yield empty jerk channels; shorter than 3, empty
    acceleration channels.
    """
    pts = np.asarray(points, dtype=np.float64)
    seg = np.diff(pts, axis=-2)
    seg_len = np.linalg.norm(seg, axis=-1)
    heading = _segment_headings(seg, seg_len)
    out = {"velocity": seg_len / dt}
    acc = np.diff(pts, n=2, axis=-2) / dt**2
    out["lon_acc"], out["lat_acc"] = _project(acc, heading[..., 1 : 1 + acc.shape[-2]])
    n_jerk = max(pts.shape[-2] - 3, 0)
    jerk = np.diff(pts, n=3, axis=-2) / dt**3 if n_jerk else np.zeros(pts.shape[:-2] + (0, 2))
    out["lon_jerk"], out["lat_jerk"] = _project(jerk, heading[..., 2 : 2 + n_jerk])
    return out


def _segment_headings(seg: np.ndarray, seg_len: np.ndarray) -> np.ndarray:
    heading = np.arctan2(seg[..., 1], seg[..., 0])
    moving = seg_len > 1e-12
    if moving.all():
        return heading
    # forward-fill degenerate segments; leading ones take the first valid heading
    n = seg.shape[-2]
    idx = np.where(moving, np.arange(n), -1)
    idx = np.maximum.accumulate(idx, axis=-1)
    first = np.argmax(moving, axis=-1)[..., None]
    idx = np.where(idx < 0, first, idx)
    filled = np.take_along_axis(heading, idx, axis=-1)
    return np.where(moving.any(axis=-1, keepdims=True), filled, 0.0)


def _project(vec: np.ndarray, heading: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(heading), np.sin(heading)
    lon = vec[..., 0] * c + vec[..., 1] * s
    lat = -vec[..., 0] * s + vec[..., 1] * c
    return lon, lat


def scene_tracks(scene: DrivingScene) -> list[np.ndarray]:
    """Full observed+future track of every agent with a fully present observation."""
    tracks = []
    for a in scene.agents:
        if not all(a.presence):
            continue
        tracks.append(np.vstack([a.obs.points, a.fut.points]))
    return tracks


def compute_dataset_stats(scenes: Sequence[DrivingScene]) -> DatasetStats:
    """Pool the five kinematic channels over every agent and timestep of ``scenes``."""
    if not scenes:
        raise ValueError("cannot compute statistics of an empty scene list")
    dts = {s.dt for s in scenes}
    if len(dts) != 1:
        raise ValueError(f"scenes must share one dt, got {sorted(dts)}")
    dt = dts.pop()
    pooled: dict[str, list[np.ndarray]] = {c: [] for c in STAT_CHANNELS}
    for scene in scenes:
        for track in scene_tracks(scene):
            for c, v in kinematic_channels(track, dt).items():
                pooled[c].append(v)
    stats = {}
    for c in STAT_CHANNELS:
        vals = np.concatenate(pooled[c]) if pooled[c] else np.zeros(0)
        if len(vals) == 0:
            raise ValueError(f"no samples for channel {c}")
        stats[c] = ChannelStat(float(vals.mean()), float(vals.std()))
    return DatasetStats(**stats)


def track_within_stats(track: np.ndarray, dt: float, stats: DatasetStats, k: float = 3.0) -> bool:
    for c, v in kinematic_channels(track, dt).items():
        lo, hi = stats[c].bounds(k)
        if len(v) and (v.min() < lo - 1e-12 or v.max() > hi + 1e-12):
            return False
    return True


# ---------------------------------------------------------------------------
# Synthetic generation

BEHAVIORS = ("straight", "lane_change", "decelerate")


@dataclass(frozen=True)
class SceneGenConfig:
    """Synthetic scene generator settings.

    ``agents_per_scene`` is either a fixed count or an inclusive ``(lo, hi)`` range.
    """

    num_scenes: int = 100
    agents_per_scene: int | tuple[int, int] = (3, 6)
    obs_len: int = 4
    pred_len: int = 12
    dt: float = 0.5
    speed_range: tuple[float, float] = (6.0, 14.0)
    behavior_mix: dict = field(
        default_factory=lambda: {"straight": 0.5, "lane_change": 0.3, "decelerate": 0.2}
    )
    lane_width: float = 4.0
    num_lanes: int = 5
    min_gap: float = 14.0
    max_resample_rounds: int = 50

    def __post_init__(self):
        lo, hi = self.agent_range
        if self.num_scenes < 1:
            raise ConfigError("num_scenes must be >= 1")
        if lo < 2 or hi < lo:
            raise ConfigError(f"agents_per_scene must be >= 2, got {self.agents_per_scene}")
        if self.num_lanes < 2:
            raise ConfigError("num_lanes must be >= 2")
        if self.obs_len < 2:
            raise ConfigError("obs_len (T) must be >= 2")
        if self.pred_len < 1:
            raise ConfigError("pred_len (horizon) must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        s_lo, s_hi = self.speed_range
        if not 0 < s_lo <= s_hi < MAX_SPEED:
            raise ConfigError(f"bad speed_range {self.speed_range}")
        unknown = set(self.behavior_mix) - set(BEHAVIORS)
        if unknown or not self.behavior_mix or any(w < 0 for w in self.behavior_mix.values()):
            raise ConfigError(f"bad behavior_mix {self.behavior_mix}")
        if sum(self.behavior_mix.values()) <= 0:
            raise ConfigError("behavior_mix weights must not all be zero")

    @property
    def agent_range(self) -> tuple[int, int]:
        if isinstance(self.agents_per_scene, (tuple, list)):
            lo, hi = self.agents_per_scene
            return int(lo), int(hi)
        return int(self.agents_per_scene), int(self.agents_per_scene)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        d = dict(d)
        for key in ("agents_per_scene", "speed_range"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "num_scenes": self.num_scenes,
            "agents_per_scene": list(self.agent_range)
            if isinstance(self.agents_per_scene, (tuple, list))
            else self.agents_per_scene,
            "obs_len": self.obs_len,
            "pred_len": self.pred_len,
            "dt": self.dt,
            "speed_range": list(self.speed_range),
            "behavior_mix": dict(self.behavior_mix),
            "lane_width": self.lane_width,
            "num_lanes": self.num_lanes,
            "min_gap": self.min_gap,
            "max_resample_rounds": self.max_resample_rounds,
        }


def _smoothstep(tau: np.ndarray) -> np.ndarray:
    t = np.clip(tau, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


def _smoothstep_integral(tau: np.ndarray) -> np.ndarray:
    # antiderivative of the quintic smoothstep on [0, 1], linear continuation beyond
    t = np.clip(tau, 0.0, 1.0)
    inside = 2.5 * t**4 - 3 * t**5 + t**6
    return inside + np.maximum(tau - 1.0, 0.0)


@dataclass
class _AgentPlan:
    lane: int
    x0: float
    v0: float
    behavior: str
    lane_dir: int


def _agent_track(rng: np.random.Generator, plan: _AgentPlan, times: np.ndarray,
                 cfg: SceneGenConfig) -> np.ndarray:
    """Analytic track for one agent.

    Every agent carries a speed oscillation and a lateral weave so that each kinematic
    channel has a bulk distribution rather than a spike at zero; manoeuvres ride on top.
    """
    amp_v = rng.uniform(0.2, 1.0)
    w_v = 2 * np.pi / rng.uniform(5.0, 9.0)
    ph_v = rng.uniform(0, 2 * np.pi)
    amp_y = rng.uniform(0.15, 0.4)
    w_y = 2 * np.pi / rng.uniform(4.5, 8.0)
    ph_y = rng.uniform(0, 2 * np.pi)

    x = plan.x0 + plan.v0 * times - amp_v / w_v * (np.cos(w_v * times + ph_v) - np.cos(ph_v))
    y = plan.lane * cfg.lane_width + amp_y * np.sin(w_y * times + ph_y)
    if plan.behavior == "lane_change":
        start = rng.uniform(-1.0, 5.0)
        dur = rng.uniform(6.0, 8.0)
        y = y + plan.lane_dir * cfg.lane_width * _smoothstep((times - start) / dur)
    elif plan.behavior == "decelerate":
        start = rng.uniform(-1.0, 5.0)
        dur = rng.uniform(5.0, 7.0)
        dv = rng.uniform(1.0, 2.5)
        # v(t) = v0 - dv * s((t - start) / dur), integrated in closed form
        x = x - dv * dur * (_smoothstep_integral((times - start) / dur)
                            - _smoothstep_integral((times[0] - start) / dur))
    return np.column_stack([x, y])


def _plan_scene(rng: np.random.Generator, cfg: SceneGenConfig) -> tuple[list[_AgentPlan], int]:
    lo, hi = cfg.agent_range
    n_agents = int(rng.integers(lo, hi + 1))
    names = list(cfg.behavior_mix)
    weights = np.array([cfg.behavior_mix[b] for b in names], dtype=float)
    weights /= weights.sum()
    traffic_speed = rng.uniform(*cfg.speed_range)

    # AV sits in lane 0 (second from the right) at the origin; others keep a longitudinal
    # gap to same-lane agents and the AV
    lanes = list(range(-1, cfg.num_lanes - 1))
    slots = [(0, 0.0)]
    while len(slots) < n_agents:
        lane = int(rng.choice(lanes))
        x0 = float(rng.uniform(-45.0, 45.0))
        if abs(x0) >= cfg.min_gap and all(lane != l or abs(x0 - x) >= cfg.min_gap for l, x in slots):
            slots.append((lane, x0))

    plans = []
    for lane, x0 in slots:
        behavior = names[int(rng.choice(len(names), p=weights))]
        v0 = float(np.clip(traffic_speed + rng.uniform(-2.0, 2.0), *cfg.speed_range))
        lane_dir = int(rng.choice([-1, 1]))
        if lane + lane_dir not in lanes:
            lane_dir = -lane_dir
        plans.append(_AgentPlan(lane, x0, v0, behavior, lane_dir))
    return plans, int(rng.integers(1, n_agents))


def generate_dataset(cfg: SceneGenConfig, seed: int) -> list[DrivingScene]:
    """Draw ``cfg.num_scenes`` scenes deterministically from ``seed``.

    Agents whose track leaves the dataset's own mean +/- 3 sigma envelope get their
    motion redrawn (same lane, position, speed and behaviour) until every track
    complies.
    """
    rng = np.random.default_rng(seed)
    times = (np.arange(cfg.obs_len + cfg.pred_len) - (cfg.obs_len - 1)) * cfg.dt
    layouts = [_plan_scene(rng, cfg) for _ in range(cfg.num_scenes)]
    tracks = [[_agent_track(rng, p, times, cfg) for p in plans] for plans, _ in layouts]

    for _ in range(cfg.max_resample_rounds):
        flat = [(i, j) for i, scene in enumerate(tracks) for j in range(len(scene))]
        channels = kinematic_channels(np.stack([tracks[i][j] for i, j in flat]), cfg.dt)
        ok = np.ones(len(flat), dtype=bool)
        for v in channels.values():
            mu, sigma = v.mean(), v.std()
            ok &= np.all((v >= mu - 3 * sigma) & (v <= mu + 3 * sigma), axis=1)
        if ok.all():
            break
        for k in np.flatnonzero(~ok):
            i, j = flat[k]
            tracks[i][j] = _agent_track(rng, layouts[i][0][j], times, cfg)
    else:
        raise ConfigError("generator failed to converge on a constraint-compliant dataset")

    scenes = []
    for i, ((plans, target_idx), scene_tracks_) in enumerate(zip(layouts, tracks)):
        agents = tuple(
            Agent(
                f"agent_{j:02d}",
                Trajectory(t[: cfg.obs_len], cfg.dt),
                Trajectory(t[cfg.obs_len :], cfg.dt),
            )
            for j, t in enumerate(scene_tracks_)
        )
        scenes.append(DrivingScene(f"scene_{i:05d}", agents[0].id, agents[target_idx].id, agents))
    return scenes


# ---------------------------------------------------------------------------
# JSONL serialization


def scene_to_dict(scene: DrivingScene) -> dict:
    agents = []
    for a in scene.agents:
        rec = {"id": a.id, "obs": a.obs.points.tolist(), "fut": a.fut.points.tolist()}
        if a.mask is not None:
            rec["mask"] = [int(m) for m in a.mask]
        agents.append(rec)
    return {
        "scene_id": scene.scene_id,
        "av_id": scene.av_id,
        "target_id": scene.target_id,
        "dt": scene.dt,
        "agents": agents,
    }


def scene_from_dict(d: dict) -> DrivingScene:
    try:
        dt = float(d["dt"])
        agents = tuple(
            Agent(
                str(a["id"]),
                Trajectory(np.asarray(a["obs"], dtype=float), dt),
                Trajectory(np.asarray(a["fut"], dtype=float), dt),
                tuple(bool(m) for m in a["mask"]) if "mask" in a else None,
            )
            for a in d["agents"]
        )
        return DrivingScene(str(d["scene_id"]), str(d["av_id"]), str(d["target_id"]), agents)
    except (KeyError, TypeError) as exc:
        raise SceneValidationError(f"schema violation: {exc!r}") from exc


def save_scenes(scenes: Iterable[DrivingScene], path) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s)) + "\n")


def load_scenes(path) -> list[DrivingScene]:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneParseError(lineno, f"malformed JSON ({exc.msg})") from exc
            try:
                scenes.append(scene_from_dict(rec))
            except SceneValidationError as exc:
                raise SceneValidationError(f"line {lineno}: {exc}") from exc
    return scenes
