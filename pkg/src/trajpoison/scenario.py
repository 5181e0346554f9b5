"""Trigger scenarios: handcrafted clones of the AV, attacker target futures and
adversarially optimised triggers.

A scenario is a placement rule anchored to the AV (lateral lane offsets in the AV's
heading frame) plus a perturbation ``eta`` expressed in that same frame, so one
scenario can be instantiated in any scene.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import (
    DEFAULT_DEV_BOUND,
    DEFAULT_LIMITS,
    KinematicLimits,
    batch_feasible,
    extend,
    max_theta,
    project_feasible,
)
from .metrics import reference_heading
from .predictor import ModelParams, encode_scene, grad_loss_wrt_input, loss
from .scene import Agent, DatasetStats, DrivingScene, Trajectory

logger = logging.getLogger(__name__)

MIN_SEPARATION = 1.5
LANE_SPACING = 4.0
PROVENANCES = ("handcrafted-imitating", "handcrafted-discontinued", "optimized")


class PlacementError(RuntimeError):
    """Malicious agents cannot be placed without overlapping existing agents."""


@dataclass(frozen=True)
class AttackObjective:
    """Attacker-chosen behaviour: ``lane_change`` (side, offset m) or ``speed`` (direction, scale)."""

    kind: str = "lane_change"
    side: str = "left"
    offset: float = 3.5
    direction: str = "down"
    scale: float = 0.5

    def __post_init__(self):
        if self.kind == "lane_change":
            if self.side not in ("left", "right") or not self.offset > 0:
                raise ValueError(f"bad lane-change objective {self}")
        elif self.kind == "speed":
            if self.direction == "down" and not 0 < self.scale < 1:
                raise ValueError("speed-down scale must lie in (0, 1)")
            if self.direction == "up" and not self.scale > 0:
                raise ValueError("speed-up scale must be positive")
            if self.direction not in ("up", "down"):
                raise ValueError(f"bad speed direction {self.direction!r}")
        else:
            raise ValueError(f"unknown objective kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "lane_change":
            return {"kind": self.kind, "side": self.side, "offset": self.offset}
        return {"kind": self.kind, "direction": self.direction, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackObjective":
        return cls(**d)


def _frame(heading: float) -> np.ndarray:
    """Rows: forward and left unit vectors."""
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, s], [-s, c]])


@dataclass(frozen=True, eq=False)
class TriggerScenario:
    """K malicious observation tracks anchored to the AV.

    ``eta`` has shape (K, T, 2) in the AV frame (longitudinal, lateral) and is added
    on top of the handcrafted base placement. ``malicious`` holds the tracks as placed
    in the scenario's reference scene.
    """

    provenance: str
    k: int
    eta: np.ndarray
    malicious: tuple[Trajectory, ...]
    masks: tuple[tuple[bool, ...], ...] | None = None
    base_rule: str = "imitating"
    side: int = 1
    spacing: float = LANE_SPACING
    gap: tuple[int, int] | None = None
    speed_step: float = 1.25
    reference_scene: str = ""

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.k < 1 or len(self.malicious) != self.k:
            raise ValueError("scenario needs K >= 1 malicious tracks")
        eta = np.array(self.eta, dtype=np.float64)
        if eta.shape != (self.k, len(self.malicious[0]), 2):
            raise ValueError(f"eta shape {eta.shape} does not match K x T x 2")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    @property
    def anchor_offsets(self) -> np.ndarray:
        """(K, 2) longitudinal/lateral offsets from the AV in its heading frame."""
        return np.array([[0.0, self.side * (i + 1) * self.spacing] for i in range(self.k)])

    @property
    def agent_ids(self) -> list[str]:
        return [f"mal_{i:02d}" for i in range(self.k)]

    # -- placement -----------------------------------------------------------

    def base_tracks(self, scene: DrivingScene, limits: KinematicLimits = DEFAULT_LIMITS) -> np.ndarray:
        """Unperturbed (K, T, 2) placement in ``scene``, projected onto the bicycle model."""
        av = scene.av.obs
        heading = reference_heading(av)
        frame = _frame(heading)
        out = []
        for i, (lon, lat) in enumerate(self.anchor_offsets):
            offset = lon * frame[0] + lat * frame[1]
            if self.base_rule == "imitating":
                pts = av.points + offset
            else:
                pts = _discontinued_track(av, self.gap, self.speed_step, heading) + offset
            out.append(project_feasible(Trajectory(pts, av.dt), limits).points)
        return np.stack(out)

    def rotate_eta(self, scene: DrivingScene, eta: np.ndarray | None = None) -> np.ndarray:
        """``eta`` (AV frame) expressed as scene-coordinate offsets."""
        eta = self.eta if eta is None else eta
        frame = _frame(reference_heading(scene.av.obs))
        return eta @ frame

    def placed_tracks(self, scene: DrivingScene, eta: np.ndarray | None = None) -> np.ndarray:
        return self.base_tracks(scene) + self.rotate_eta(scene, eta)

    def agents_for(self, scene: DrivingScene, tracks: np.ndarray) -> list[Agent]:
        agents = []
        for i, pts in enumerate(tracks):
            obs = Trajectory(pts, scene.dt)
            fut = extend(obs, scene.pred_len)
            mask = self.masks[i] if self.masks is not None else None
            agents.append(Agent(self.agent_ids[i], obs, fut, mask))
        return agents

    def apply(self, scene: DrivingScene, tracks: np.ndarray | None = None,
              check_overlap: bool = True) -> DrivingScene:
        """Scene with the malicious agents added (default placement: base + eta)."""
        if tracks is None:
            tracks = self.placed_tracks(scene)
        if check_overlap:
            check_separation(scene, tracks)
        return scene.with_agents(self.agents_for(scene, tracks))

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "k": self.k,
            "anchor_offsets": self.anchor_offsets.tolist(),
            "base_rule": self.base_rule,
            "side": self.side,
            "spacing": self.spacing,
            "gap": list(self.gap) if self.gap else None,
            "speed_step": self.speed_step,
            "reference_scene": self.reference_scene,
            "trajectories": [t.points.tolist() for t in self.malicious],
            "masks": [[int(m) for m in mk] for mk in self.masks] if self.masks else None,
            "dt": self.malicious[0].dt,
            "eta": self.eta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerScenario":
        dt = float(d["dt"])
        return cls(
            provenance=d["provenance"],
            k=int(d["k"]),
            eta=np.asarray(d["eta"], dtype=np.float64),
            malicious=tuple(Trajectory(np.asarray(t), dt) for t in d["trajectories"]),
            masks=tuple(tuple(bool(m) for m in mk) for mk in d["masks"]) if d.get("masks") else None,
            base_rule=d["base_rule"],
            side=int(d["side"]),
            spacing=float(d["spacing"]),
            gap=tuple(d["gap"]) if d.get("gap") else None,
            speed_step=float(d["speed_step"]),
            reference_scene=d.get("reference_scene", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TriggerScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_separation(scene: DrivingScene, tracks: np.ndarray, min_sep: float = MIN_SEPARATION) -> None:
    """Raise PlacementError when a malicious track comes within ``min_sep`` of any other agent."""
    others = [a.obs.points for a in scene.agents]
    for i, pts in enumerate(tracks):
        for o in others + [t for j, t in enumerate(tracks) if j != i]:
            d = float(np.min(np.linalg.norm(pts - o, axis=1)))
            if d < min_sep:
                raise PlacementError(
                    f"scene {scene.scene_id}: malicious track {i} within {d:.2f} m of another agent"
                )


def _discontinued_track(av: Trajectory, gap: tuple[int, int], speed_step: float,
                        heading: float) -> np.ndarray:
    """Straight track at the AV's mean speed that switches to ``speed_step`` x speed when it
    disappears at ``gap[0]``; segment ``i`` runs at the base speed iff ``i < gap[0]``."""
    seg = np.diff(av.points, axis=0)
    v = float(np.mean(np.linalg.norm(seg, axis=1))) / av.dt
    start = gap[0]
    speeds = np.array([v if i < start else speed_step * v for i in range(len(av) - 1)])
    s = np.concatenate([[0.0], np.cumsum(speeds * av.dt)])
    fwd = np.array([np.cos(heading), np.sin(heading)])
    return av.points[0] + s[:, None] * fwd


# ---------------------------------------------------------------------------
# Handcrafted scenarios


def craft_imitating(scene: DrivingScene, k: int, spacing: float = LANE_SPACING,
                    side: int = 1) -> TriggerScenario:
    """K clones of the AV's observation, offset by ``spacing`` m per lane on ``side`` (+1 left)."""
    if k < 1:
        raise ValueError("K must be >= 1")
    proto = TriggerScenario(
        "handcrafted-imitating", k, np.zeros((k, scene.obs_len, 2)),
        tuple(scene.av.obs for _ in range(k)), side=side, spacing=spacing,
        reference_scene=scene.scene_id,
    )
    tracks = proto.base_tracks(scene)
    check_separation(scene, tracks)
    return replace(proto, malicious=tuple(Trajectory(t, scene.dt) for t in tracks))


def craft_discontinued(scene: DrivingScene, k: int, gap: tuple[int, int] = (1, 1),
                       speed_step: float = 1.25, spacing: float = LANE_SPACING,
                       side: int = 1) -> TriggerScenario:
    """AV clones that vanish for ``gap = (start_idx, length)`` steps and reappear faster."""
    start, length = int(gap[0]), int(gap[1])
    T = scene.obs_len
    if length < 1 or start < 0 or start + length > T:
        raise ValueError(f"gap {gap} does not fit in T={T}")
    if T - length < 2:
        raise ValueError("gap leaves fewer than 2 observed steps")
    mask = tuple(not (start <= i < start + length) for i in range(T))
    proto = TriggerScenario(
        "handcrafted-discontinued", k, np.zeros((k, T, 2)),
        tuple(scene.av.obs for _ in range(k)), masks=tuple(mask for _ in range(k)),
        base_rule="discontinued", side=side, spacing=spacing, gap=(start, length),
        speed_step=speed_step, reference_scene=scene.scene_id,
    )
    tracks = proto.base_tracks(scene)
    check_separation(scene, tracks)
    return replace(proto, malicious=tuple(Trajectory(t, scene.dt) for t in tracks))


# ---------------------------------------------------------------------------
# Attacker target futures


def build_target_trajectory(scene: DrivingScene, objective: AttackObjective,
                            limits: KinematicLimits = DEFAULT_LIMITS) -> Trajectory:
    """Attacker-chosen future for the target agent, projected onto the bicycle model."""
    target = scene.target
    gt = target.fut.points
    last = target.obs.points[-1]
    heading = reference_heading(target.obs)
    frame = _frame(heading)
    n = len(gt)
    if objective.kind == "lane_change":
        sign = 1.0 if objective.side == "left" else -1.0
        ramp = objective.offset * np.arange(1, n + 1) / n
        pts = gt + sign * ramp[:, None] * frame[1]
    else:
        factor = objective.scale if objective.direction == "down" else 1.0 + objective.scale
        pts = _retime(np.vstack([last, gt]), factor)[1:]
    full = project_feasible(Trajectory(np.vstack([last, pts]), target.fut.dt), limits)
    return Trajectory(full.points[1:], target.fut.dt)


def _retime(path: np.ndarray, factor: float) -> np.ndarray:
    """Move every waypoint to ``factor`` x its arc length along ``path``; beyond the end the
    path is extended along its final heading."""
    seg = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    out = [path[0]]
    fwd = seg[-1] / seg_len[-1] if seg_len[-1] > 0 else np.array([1.0, 0.0])
    for s in cum[1:] * factor:
        if s >= cum[-1]:
            out.append(path[-1] + (s - cum[-1]) * fwd)
            continue
        j = int(np.searchsorted(cum, s, side="right")) - 1
        frac = (s - cum[j]) / seg_len[j] if seg_len[j] > 0 else 0.0
        out.append(path[j] + frac * seg[j])
    return np.array(out)


# ---------------------------------------------------------------------------
# Optimised scenario


@dataclass(frozen=True)
class OptimizeHyper:
    """``degree`` restricts the descent direction to per-agent polynomials in time
    (None steps every coordinate independently)."""

    steps: int = 30
    lr: float = 0.1
    degree: int | None = 2


@dataclass
class OptimizeResult:
    scenario: TriggerScenario
    losses: list[float]
    best_step: int
    aborted: bool = False


def step_basis(n: int, degree: int) -> np.ndarray:
    """(n, degree + 1) polynomial basis over normalised time in [0, 1]."""
    tau = np.linspace(0.0, 1.0, n)
    return np.stack([tau**d for d in range(min(degree, n - 1) + 1)], axis=1)


def project_to_basis(g: np.ndarray, degree: int | None) -> np.ndarray:
    """Least-squares projection of a (K, T, 2) field onto the polynomial basis."""
    if degree is None:
        return g
    B = step_basis(g.shape[1], degree)
    P = B @ np.linalg.pinv(B)
    return np.einsum("st,ktc->ksc", P, g)


def _adv_loss_and_grad(surrogate: ModelParams, scenario: TriggerScenario, eta: np.ndarray,
                       items) -> tuple[float, np.ndarray]:
    """Mean attacker loss over ``items`` and its gradient w.r.t. ``eta`` (AV frame)."""
    cfg = surrogate.config
    total, grad = 0.0, np.zeros_like(eta)
    for scene, base, frame, target in items:
        tracks = base + eta @ frame
        tensor = encode_scene(scenario.apply(scene, tracks, check_overlap=False), cfg)
        l, g = grad_loss_wrt_input(surrogate, tensor, target)
        total += l
        for i, aid in enumerate(scenario.agent_ids):
            if aid in tensor.agent_ids:  # dropped agents contribute nothing
                grad[i] += g[tensor.slot(aid)] @ frame.T
    return total / len(items), grad / len(items)


def optimize_trigger(surrogate: ModelParams, scenes: Sequence[DrivingScene], seed: TriggerScenario,
                     objective: AttackObjective, stats: DatasetStats, hyper: OptimizeHyper = OptimizeHyper(),
                     dev_bound: float = DEFAULT_DEV_BOUND) -> OptimizeResult:
    """Gradient descent on ``eta`` minimising the surrogate's attacker loss over ``scenes``.

    Each step moves ``eta`` by ``lr`` metres along the gradient direction scaled by its
    largest component, then shrinks the whole perturbation by the largest factor keeping
    every placed track inside the soft constraints. The lowest-loss iterate is returned.
    """
    items = []
    for scene in scenes:
        frame = _frame(reference_heading(scene.av.obs))
        items.append((scene, seed.base_tracks(scene), frame, build_target_trajectory(scene, objective)))
    if not items:
        raise ValueError("optimize_trigger needs at least one scene")
    bases = np.concatenate([b for _, b, _, _ in items])
    dt = items[0][0].dt

    def constrain(eta: np.ndarray) -> np.ndarray:
        pert = np.concatenate([eta @ f for _, _, f, _ in items])
        res = max_theta(bases, pert, stats, dev_bound, dt=dt)
        return res.theta * eta

    eta = np.array(seed.eta, dtype=np.float64)
    best_loss, g = _adv_loss_and_grad(surrogate, seed, eta, items)
    best_eta, best_step = eta.copy(), 0
    losses = [best_loss]
    lr, failures, aborted = hyper.lr, 0, False
    step = 0
    while step < hyper.steps:
        d = project_to_basis(g, hyper.degree)
        scale = np.max(np.abs(d))
        if scale == 0:
            break
        cand = constrain(eta - lr * d / scale)
        cand_loss, cand_g = _adv_loss_and_grad(surrogate, seed, cand, items)
        if not np.isfinite(cand_loss):
            failures += 1
            lr *= 0.5
            if failures >= 3:
                logger.warning("optimize_trigger: three consecutive non-finite losses, aborting")
                aborted = True
                break
            continue
        failures = 0
        step += 1
        eta, g = cand, cand_g
        losses.append(cand_loss)
        if cand_loss < best_loss:
            best_loss, best_eta, best_step = cand_loss, eta.copy(), step

    ref = next((s for s in scenes if s.scene_id == seed.reference_scene), scenes[0])
    result = replace(seed, provenance="optimized", eta=best_eta, reference_scene=ref.scene_id)
    tracks = result.placed_tracks(ref)
    result = replace(result, malicious=tuple(Trajectory(t, ref.dt) for t in tracks))
    return OptimizeResult(result, losses, best_step, aborted)


def adversarial_loss(surrogate: ModelParams, scenario: TriggerScenario, scenes: Sequence[DrivingScene],
                     objective: AttackObjective) -> float:
    vals = []
    for scene in scenes:
        tensor = encode_scene(scenario.apply(scene, check_overlap=False), surrogate.config)
        vals.append(loss(surrogate, tensor, build_target_trajectory(scene, objective)))
    return float(np.mean(vals))


def rarity(scenario: TriggerScenario, scenes: Sequence[DrivingScene]) -> float:
    """Smallest mean pointwise distance, in the AV-anchored frame, between any malicious
    track and any natural agent observation in ``scenes`` (diagnostic only)."""
    best = np.inf
    for scene in scenes:
        av_last = scene.av.obs.points[-1]
        frame = _frame(reference_heading(scene.av.obs))
        placed = (scenario.placed_tracks(scene) - av_last) @ frame.T
        for a in scene.agents:
            if a.id == scene.av_id:
                continue
            nat = (a.obs.points - av_last) @ frame.T
            d = np.linalg.norm(placed - nat[None], axis=-1).mean(axis=1).min()
            best = min(best, float(d))
    return best


def placed_feasible(scenario: TriggerScenario, scene: DrivingScene, stats: DatasetStats,
                    dev_bound: float = DEFAULT_DEV_BOUND) -> bool:
    base = scenario.base_tracks(scene)
    return batch_feasible(base + scenario.rotate_eta(scene), base, scene.dt, stats, dev_bound)
