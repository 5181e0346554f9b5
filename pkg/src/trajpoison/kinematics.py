"""Kinematic bicycle model, trajectory fitting/projection and soft-constraint checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .scene import STAT_CHANNELS, DatasetStats, Trajectory, kinematic_channels

DEFAULT_DEV_BOUND = 1.0


def wrap_angle(h: float) -> float:
    """Map an angle to (-pi, pi]."""
    return h - 2 * math.pi * math.ceil((h - math.pi) / (2 * math.pi))


@dataclass(frozen=True)
class KinematicLimits:
    a_max: float = 8.0
    kappa_max: float = 0.3


DEFAULT_LIMITS = KinematicLimits()


@dataclass(frozen=True)
class KinematicState:
    x: float
    y: float
    heading: float
    v: float

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"speed must be non-negative, got {self.v}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def p(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ControlInput:
    a: float
    kappa: float

    def within(self, limits: KinematicLimits = DEFAULT_LIMITS) -> bool:
        return abs(self.a) <= limits.a_max + 1e-12 and abs(self.kappa) <= limits.kappa_max + 1e-12


def step(s: KinematicState, u: ControlInput, dt: float,
         limits: KinematicLimits = DEFAULT_LIMITS) -> KinematicState:
    """Explicit-Euler bicycle update; position and heading advance with the current speed."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not u.within(limits):
        raise ValueError(f"control {u} outside limits {limits}")
    return KinematicState(
        s.x + s.v * math.cos(s.heading) * dt,
        s.y + s.v * math.sin(s.heading) * dt,
        s.heading + s.v * u.kappa * dt,
        max(0.0, s.v + u.a * dt),
    )


def rollout(s0: KinematicState, controls: Sequence[ControlInput], dt: float,
            limits: KinematicLimits = DEFAULT_LIMITS) -> Trajectory:
    if len(controls) == 0:
        raise ValueError("rollout needs at least one control")
    s = s0
    pts = [s.p]
    for u in controls:
        s = step(s, u, dt, limits)
        pts.append(s.p)
    return Trajectory(np.array(pts), dt)


class ControlFit(NamedTuple):
    s0: KinematicState
    controls: list[ControlInput]
    residual: float


def fit_controls(traj: Trajectory, limits: KinematicLimits = DEFAULT_LIMITS) -> ControlFit:
    """Recover an initial state and bounded controls that reproduce ``traj``.

    Speed and heading targets come from the finite differences of consecutive points.
    Controls are chosen step by step against the state actually reached so far, so a
    clamped step does not corrupt later ones. ``residual`` is the largest pointwise
    distance between the rollout and ``traj``.
    """
    pts = traj.points
    if len(pts) < 3:
        raise ValueError("fit_controls needs at least 3 points")
    dt = traj.dt
    seg = np.diff(pts, axis=0)
    speeds = np.hypot(seg[:, 0], seg[:, 1]) / dt
    headings = np.arctan2(seg[:, 1], seg[:, 0])
    moving = speeds * dt > 1e-12
    if not moving.any():
        s0 = KinematicState(float(pts[0, 0]), float(pts[0, 1]), 0.0, 0.0)
        return ControlFit(s0, [ControlInput(0.0, 0.0)] * (len(pts) - 1), 0.0)
    # zero-length segments keep the last known heading
    last = float(headings[int(np.argmax(moving))])
    for i in range(len(headings)):
        if moving[i]:
            last = float(headings[i])
        else:
            headings[i] = last

    s = KinematicState(float(pts[0, 0]), float(pts[0, 1]), float(headings[0]), float(speeds[0]))
    s0 = s
    controls = []
    for i in range(len(seg)):
        if i + 1 < len(seg):
            a = (speeds[i + 1] - s.v) / dt
            a = min(max(a, -limits.a_max), limits.a_max)
            turn = wrap_angle(headings[i + 1] - s.heading)
            kappa = turn / (s.v * dt) if s.v * dt > 1e-12 else 0.0
            kappa = min(max(kappa, -limits.kappa_max), limits.kappa_max)
            u = ControlInput(float(a), float(kappa))
        else:
            u = ControlInput(0.0, 0.0)
        controls.append(u)
        s = step(s, u, dt, limits)
    fitted = rollout(s0, controls, dt, limits).points
    residual = float(np.max(np.linalg.norm(fitted - pts, axis=1)))
    return ControlFit(s0, controls, residual)


def project_feasible(traj: Trajectory, limits: KinematicLimits = DEFAULT_LIMITS) -> Trajectory:
    """Nearest bicycle-model trajectory in the sense of ``fit_controls``."""
    fit = fit_controls(traj, limits)
    return rollout(fit.s0, fit.controls, traj.dt, limits)


def extend(traj: Trajectory, n: int, limits: KinematicLimits = DEFAULT_LIMITS) -> Trajectory:
    """Continue ``traj`` for ``n`` points at its final speed and heading (zero controls)."""
    seg = traj.points[-1] - traj.points[-2]
    v = float(np.hypot(*seg)) / traj.dt
    h = float(np.arctan2(seg[1], seg[0])) if v > 0 else 0.0
    s = KinematicState(float(traj.points[-1, 0]), float(traj.points[-1, 1]), h, v)
    out = rollout(s, [ControlInput(0.0, 0.0)] * n, traj.dt, limits)
    return Trajectory(out.points[1:], traj.dt)


# ---------------------------------------------------------------------------
# Soft constraints


@dataclass(frozen=True)
class ChannelCheck:
    name: str
    passed: bool
    worst: float
    lower: float
    upper: float


@dataclass(frozen=True)
class ConstraintReport:
    channels: tuple[ChannelCheck, ...]
    max_pointwise_deviation: float
    dev_bound: float

    @property
    def deviation_ok(self) -> bool:
        return self.max_pointwise_deviation <= self.dev_bound + 1e-12

    @property
    def feasible(self) -> bool:
        return self.deviation_ok and all(c.passed for c in self.channels)

    def channel(self, name: str) -> ChannelCheck:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)


def check_soft_constraints(traj: Trajectory, stats: DatasetStats, base: Trajectory,
                           dev_bound: float = DEFAULT_DEV_BOUND, k_sigma: float = 3.0) -> ConstraintReport:
    """Check every kinematic channel against mean +/- 3 sigma and the deviation from ``base``.

    Jerk channels are included. A channel's ``worst`` is the sample furthest from the
    channel mean.
    """
    if len(traj) != len(base) or traj.dt != base.dt:
        raise ValueError("traj and base must share length and dt")
    channels = kinematic_channels(traj.points, traj.dt)
    checks = []
    for name in STAT_CHANNELS:
        vals = channels[name]
        lo, hi = stats[name].bounds(k_sigma)
        if len(vals) == 0:
            checks.append(ChannelCheck(name, True, float("nan"), lo, hi))
            continue
        worst = float(vals[np.argmax(np.abs(vals - stats[name].mu))])
        passed = bool(np.all(vals >= lo - 1e-12) and np.all(vals <= hi + 1e-12))
        checks.append(ChannelCheck(name, passed, worst, lo, hi))
    dev = float(np.max(np.linalg.norm(traj.points - base.points, axis=1)))
    return ConstraintReport(tuple(checks), dev, dev_bound)


def batch_feasible(points: np.ndarray, base: np.ndarray, dt: float, stats: DatasetStats,
                   dev_bound: float = DEFAULT_DEV_BOUND, k_sigma: float = 3.0) -> bool:
    """Vectorised ``check_soft_constraints(...).feasible`` over a (K, n, 2) stack."""
    if np.max(np.linalg.norm(points - base, axis=-1)) > dev_bound + 1e-12:
        return False
    for name, vals in kinematic_channels(points, dt).items():
        if vals.size == 0:
            continue
        lo, hi = stats[name].bounds(k_sigma)
        if vals.min() < lo - 1e-12 or vals.max() > hi + 1e-12:
            return False
    return True


class ThetaResult(NamedTuple):
    theta: float
    base_feasible: bool


def max_theta(base, perturbation, stats: DatasetStats, dev_bound: float = DEFAULT_DEV_BOUND,
              dt: float | None = None, tol: float = 1e-4) -> ThetaResult:
    """Largest scale in [0, 1] keeping ``base + theta * perturbation`` feasible.

    ``base`` is a Trajectory or a (n, 2) / (K, n, 2) array (then ``dt`` is required);
    ``perturbation`` has the same shape as the base points. Bisection to ``tol``.
    If the base itself is infeasible the result is ``(0.0, False)``.
    """
    if isinstance(base, Trajectory):
        dt = base.dt
        base = base.points
    if dt is None:
        raise ValueError("dt is required when base is an array")
    base = np.asarray(base, dtype=np.float64)
    pert = np.asarray(perturbation, dtype=np.float64)
    if pert.shape != base.shape:
        raise ValueError(f"perturbation shape {pert.shape} != base shape {base.shape}")
    if base.ndim == 2:
        base, pert = base[None], pert[None]

    def ok(theta: float) -> bool:
        return batch_feasible(base + theta * pert, base, dt, stats, dev_bound)

    if not ok(0.0):
        return ThetaResult(0.0, False)
    if ok(1.0):
        return ThetaResult(1.0, True)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return ThetaResult(lo, True)
