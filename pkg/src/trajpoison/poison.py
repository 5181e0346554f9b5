"""Gradient-alignment poison crafting.

Each selected training scene receives the trigger agents; their observations are then
moved by signed steps that make the clean-label training gradient point along the
attacker's gradient, while staying kinematically feasible, within the dataset's
motion statistics and within 1 m of the placed scenario.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kinematics import DEFAULT_DEV_BOUND, batch_feasible, project_feasible
from .predictor import ModelParams, alignment, encode_scene, grad_alignment_wrt_input, grad_params
from .scenario import (AttackObjective, PlacementError, TriggerScenario, build_target_trajectory, check_separation,
                       step_basis)
from .scene import DatasetStats, DrivingScene, Trajectory, scene_from_dict, scene_to_dict

logger = logging.getLogger(__name__)

SELECTION_RULES = ("uniform", "alignment")
STEP_BASES = ("poly", "points")


@dataclass(frozen=True)
class CraftConfig:
    """``selection`` picks poison scenes uniformly or by lowest initial alignment.

    ``max_alignment`` turns the budget into an upper bound: with alignment selection,
    candidates whose initial alignment exceeds it are never poisoned.
    ``basis="poly"`` takes the signed steps on per-agent quadratic-in-time offsets, which
    leave jerk untouched; ``"points"`` steps every waypoint independently.
    """

    budget: float = 0.05
    alpha: float = 0.05
    steps: int = 20
    seed: int = 0
    signed: bool = True
    selection: str = "alignment"
    adv_sample: int = 200
    basis: str = "poly"
    degree: int = 2
    max_alignment: float | None = 0.4

    def __post_init__(self):
        if not 0 < self.budget <= 1:
            raise ValueError(f"budget must lie in (0, 1], got {self.budget}")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if self.steps < 1:
            raise ValueError("steps (R_t) must be >= 1")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.adv_sample < 1:
            raise ValueError("adv_sample must be >= 1")
        if self.basis not in STEP_BASES:
            raise ValueError(f"unknown step basis {self.basis!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "CraftConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PoisonedScene:
    """A training scene with crafted trigger agents; every original agent is untouched."""

    base_scene_id: str
    scene: DrivingScene
    malicious_ids: tuple[str, ...]
    provenance: str
    anchor: np.ndarray  # (K, T, 2) projected placement the perturbation is measured from
    eta_trace: list = field(default_factory=list)  # accepted (K, T, 2) perturbations
    alignment_trace: list = field(default_factory=list)
    degenerate_steps: int = 0
    annihilated: bool = False

    @property
    def eta(self) -> np.ndarray:
        return self.eta_trace[-1] if self.eta_trace else np.zeros_like(self.anchor)

    def malicious_tracks(self) -> np.ndarray:
        return np.stack([self.scene.agent(a).obs.points for a in self.malicious_ids])

    def base_scene(self) -> DrivingScene:
        return self.scene.without_agents(self.malicious_ids)

    def to_dict(self) -> dict:
        return {
            "base_scene_id": self.base_scene_id,
            "scene": scene_to_dict(self.scene),
            "malicious_ids": list(self.malicious_ids),
            "provenance": self.provenance,
            "anchor": self.anchor.tolist(),
            "eta_trace": [e.tolist() for e in self.eta_trace],
            "alignment_trace": list(self.alignment_trace),
            "degenerate_steps": self.degenerate_steps,
            "annihilated": self.annihilated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonedScene":
        return cls(
            d["base_scene_id"],
            scene_from_dict(d["scene"]),
            tuple(d["malicious_ids"]),
            d["provenance"],
            np.asarray(d["anchor"], dtype=np.float64),
            [np.asarray(e, dtype=np.float64) for e in d["eta_trace"]],
            [float(a) for a in d["alignment_trace"]],
            int(d["degenerate_steps"]),
            bool(d["annihilated"]),
        )


def save_poisons(poisons: Sequence[PoisonedScene], path) -> None:
    with open(path, "w") as fh:
        for p in poisons:
            fh.write(json.dumps(p.to_dict()) + "\n")


def load_poisons(path) -> list[PoisonedScene]:
    return [PoisonedScene.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def poison_count(num_scenes: int, budget: float) -> int:
    return min(num_scenes, math.ceil(budget * num_scenes - 1e-9))


def select_poison_subset(train_scenes: Sequence[DrivingScene], budget: float, seed: int) -> set[str]:
    """Uniformly random ceil(P * M) scene ids."""
    if not 0 < budget <= 1:
        raise ValueError(f"budget must lie in (0, 1], got {budget}")
    rng = np.random.default_rng(seed)
    n = poison_count(len(train_scenes), budget)
    idx = rng.choice(len(train_scenes), size=n, replace=False)
    return {train_scenes[i].scene_id for i in idx}


def compute_adv_gradient(surrogate: ModelParams, triggered_scenes: Sequence[DrivingScene],
                         targets: Sequence[Trajectory]) -> np.ndarray:
    """Mean parameter gradient of the attacker loss over triggered scenes."""
    if len(triggered_scenes) == 0 or len(triggered_scenes) != len(targets):
        raise ValueError("need one attacker target per triggered scene")
    total = np.zeros(surrogate.config.num_params)
    for scene, target in zip(triggered_scenes, targets):
        total += grad_params(surrogate, encode_scene(scene, surrogate.config), target)
    return total / len(triggered_scenes)


def _placeable(scenario: TriggerScenario, scene: DrivingScene) -> np.ndarray | None:
    """Projected scenario placement in ``scene``; None when it would overlap."""
    placed = scenario.placed_tracks(scene)
    anchor = np.stack([project_feasible(Trajectory(t, scene.dt)).points for t in placed])
    try:
        check_separation(scene, anchor)
    except PlacementError:
        return None
    return anchor


def adv_gradient_for(surrogate: ModelParams, scenes: Sequence[DrivingScene], scenario: TriggerScenario,
                     objective: AttackObjective, sample: int, seed: int) -> np.ndarray:
    """Attacker gradient estimated on up to ``sample`` triggered training scenes."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scenes))
    triggered, targets = [], []
    for i in order:
        anchor = _placeable(scenario, scenes[i])
        if anchor is None:
            continue
        triggered.append(scenario.apply(scenes[i], anchor, check_overlap=False))
        targets.append(build_target_trajectory(scenes[i], objective))
        if len(triggered) == sample:
            break
    return compute_adv_gradient(surrogate, triggered, targets)


def _constrain(anchor: np.ndarray, eta: np.ndarray, step: np.ndarray, dt: float, stats: DatasetStats,
               dev_bound: float, tol: float = 1e-4) -> np.ndarray:
    """Apply the hard constraints to ``eta + step``.

    Each track becomes ``project(anchor + eta + theta * step)`` with the largest
    ``theta`` in [0, 1] keeping all tracks within the statistics envelope and the
    deviation bound around ``anchor``. Returns the realised perturbation.
    """

    def realise(theta: float) -> np.ndarray:
        pts = anchor + eta + theta * step
        return np.stack([project_feasible(Trajectory(t, dt)).points for t in pts])

    def ok(tracks: np.ndarray) -> bool:
        return batch_feasible(tracks, anchor, dt, stats, dev_bound)

    full = realise(1.0)
    if ok(full):
        return full - anchor
    lo, hi, best = 0.0, 1.0, anchor + eta
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        cand = realise(mid)
        if ok(cand):
            lo, best = mid, cand
        else:
            hi = mid
    return best - anchor


def _signed_step(g: np.ndarray, cfg: CraftConfig, alpha: float) -> np.ndarray:
    """Descent step on the perturbation for a (K, T, 2) gradient."""
    if cfg.basis == "points":
        return -alpha * (np.sign(g) if cfg.signed else g)
    B = step_basis(g.shape[1], cfg.degree)
    gc = np.einsum("td,ktc->kdc", B, g)
    dc = -alpha * (np.sign(gc) if cfg.signed else gc)
    return np.einsum("td,kdc->ktc", B, dc)


def _alignment_at(surrogate: ModelParams, scene: DrivingScene, scenario: TriggerScenario, tracks: np.ndarray,
                  adv_grad: np.ndarray):
    """Alignment value and its gradient restricted to the malicious tracks, (K, T, 2)."""
    tensor = encode_scene(scenario.apply(scene, tracks, check_overlap=False), surrogate.config)
    res = grad_alignment_wrt_input(surrogate, tensor, scene.target.fut, adv_grad)
    g = np.zeros_like(tracks)
    for k, aid in enumerate(scenario.agent_ids):
        if aid in tensor.agent_ids:
            g[k] = res.grad[tensor.slot(aid)]
    return res.value, g, res.degenerate


def craft_scene(surrogate: ModelParams, scene: DrivingScene, scenario: TriggerScenario,
                anchor: np.ndarray, adv_grad: np.ndarray, cfg: CraftConfig, stats: DatasetStats,
                dev_bound: float = DEFAULT_DEV_BOUND) -> PoisonedScene:
    """Run the alignment loop on one scene (clean labels throughout).

    A step is accepted only when it does not increase the alignment objective; a
    rejected step halves the step size for this scene. ``alignment_trace`` starts with
    the value at the placed scenario and then logs every accepted step.
    """
    ids = tuple(scenario.agent_ids)
    eta = np.zeros_like(anchor)
    value, g, degenerate_now = _alignment_at(surrogate, scene, scenario, anchor, adv_grad)
    eta_trace, a_trace = [], [value]
    degenerate = 0
    alpha = cfg.alpha
    for _ in range(cfg.steps):
        if degenerate_now:
            degenerate += 1
            break
        if alpha < 1e-6 * max(cfg.alpha, 1e-12) or not np.any(g):
            break
        step = _signed_step(g, cfg, alpha)
        cand = _constrain(anchor, eta, step, scene.dt, stats, dev_bound)
        c_value, c_g, c_deg = _alignment_at(surrogate, scene, scenario, anchor + cand, adv_grad)
        if c_value <= value and not np.array_equal(cand, eta):
            eta, value, g, degenerate_now = cand, c_value, c_g, c_deg
            eta_trace.append(eta.copy())
            a_trace.append(value)
        else:
            alpha *= 0.5
    annihilated = cfg.alpha > 0 and not np.any(eta)
    if annihilated:
        logger.warning("scene %s: constraints removed the whole perturbation", scene.scene_id)
    poisoned = scenario.apply(scene, anchor + eta, check_overlap=False)
    return PoisonedScene(scene.scene_id, poisoned, ids, scenario.provenance, anchor,
                         eta_trace, a_trace, degenerate, annihilated)


def initial_alignments(surrogate: ModelParams, candidates: list[tuple[DrivingScene, np.ndarray]],
                       scenario: TriggerScenario, adv_grad: np.ndarray) -> np.ndarray:
    """Alignment of each candidate with the trigger placed at its anchor."""
    values = []
    for scene, anchor in candidates:
        tensor = encode_scene(scenario.apply(scene, anchor, check_overlap=False), surrogate.config)
        values.append(alignment(grad_params(surrogate, tensor, scene.target.fut), adv_grad))
    return np.array(values)


def rank_by_alignment(surrogate: ModelParams, candidates: list[tuple[DrivingScene, np.ndarray]],
                      scenario: TriggerScenario, adv_grad: np.ndarray) -> list[int]:
    """Candidate indices ordered by the initial alignment of the placed trigger (best first)."""
    values = initial_alignments(surrogate, candidates, scenario, adv_grad)
    return sorted(range(len(candidates)), key=lambda i: (values[i], candidates[i][0].scene_id))


def craft_poisons(surrogate: ModelParams, train_scenes: Sequence[DrivingScene], scenario: TriggerScenario,
                  objective: AttackObjective, cfg: CraftConfig, stats: DatasetStats,
                  dev_bound: float = DEFAULT_DEV_BOUND, adv_grad: np.ndarray | None = None) -> list[PoisonedScene]:
    """Select ceil(P * M) training scenes that can host the trigger and craft each one.

    Scenes where the trigger would overlap an existing agent, or where its unperturbed
    placement already breaks the soft constraints, are never selected. The result is
    ordered by scene id.
    """
    if adv_grad is None:
        adv_grad = adv_gradient_for(surrogate, train_scenes, scenario, objective, cfg.adv_sample, cfg.seed)
    n = poison_count(len(train_scenes), cfg.budget)
    candidates = []
    for scene in train_scenes:
        anchor = _placeable(scenario, scene)
        if anchor is not None and batch_feasible(anchor, anchor, scene.dt, stats, dev_bound):
            candidates.append((scene, anchor))
    if len(candidates) < n:
        logger.warning("only %d of %d requested scenes can host the trigger", len(candidates), n)
        n = len(candidates)
    if cfg.selection == "uniform":
        rng = np.random.default_rng(cfg.seed)
        chosen = sorted(rng.choice(len(candidates), size=n, replace=False).tolist())
    else:
        values = initial_alignments(surrogate, candidates, scenario, adv_grad)
        order = sorted(range(len(candidates)), key=lambda i: (values[i], candidates[i][0].scene_id))
        if cfg.max_alignment is not None:
            order = [i for i in order if values[i] <= cfg.max_alignment]
        chosen = order[:n]
    out = [craft_scene(surrogate, candidates[i][0], scenario, candidates[i][1], adv_grad, cfg, stats, dev_bound)
           for i in chosen]
    return sorted(out, key=lambda p: p.base_scene_id)


def merge_training_set(train_scenes: Sequence[DrivingScene], poisons: Sequence[PoisonedScene]) -> list[DrivingScene]:
    """Training scenes with each poisoned base scene replaced by its poisoned version."""
    by_id = {p.base_scene_id: p.scene for p in poisons}
    return [by_id.get(s.scene_id, s) for s in train_scenes]
