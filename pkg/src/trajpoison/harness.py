"""End-to-end experiment orchestration: data, surrogate, trigger, poisons, victims,
evaluation, budget sweep, stealth check and defense grid.

Every random choice is derived from ``ExperimentConfig.seed``; reports contain no
timestamps or timings, so a config hash fully determines the report bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .defenses import (RobustTrainConfig, activation_clustering, cluster_margin, recall_at_fpr, robust_train,
                       scene_latents)
from .kinematics import DEFAULT_DEV_BOUND, check_soft_constraints, project_feasible
from .metrics import (ASR_THRESHOLD, CA_THRESHOLD, MetricRecord, MetricRow, attack_success_rate, clean_accuracy,
                      compute_metrics, reference_heading, write_metric_rows)
from .poison import CraftConfig, PoisonedScene, adv_gradient_for, craft_poisons, merge_training_set
from .predictor import ModelParams, PredictorConfig, TrainHyper, encode_scene, predict_absolute, train
from .scenario import (AttackObjective, OptimizeHyper, PlacementError, TriggerScenario, adversarial_loss,
                       craft_discontinued, craft_imitating, optimize_trigger)
from .scene import DatasetStats, DrivingScene, SceneGenConfig, Trajectory, compute_dataset_stats, generate_dataset

logger = logging.getLogger(__name__)

SCENARIO_MODES = ("imitating", "discontinued", "optimized")
ASR_REFERENCES = ("untriggered", "clean_model")
DEFAULT_BUDGETS = (0.05, 0.10, 0.20, 0.50)

# stage seeds are fixed offsets from the master seed
SEED_OFFSETS = {"data": 0, "surrogate": 1, "victim": 2, "craft": 3, "noise": 4}


def _inf_to_none(x: float):
    return None if math.isinf(x) else x


@dataclass(frozen=True)
class DefenseGrid:
    clip_norms: tuple[float, ...] = (math.inf, 50.0, 20.0, 10.0)
    noise_stds: tuple[float, ...] = (0.0, 2.0)
    min_ca: float = 0.75
    per_example: bool = True

    def __post_init__(self):
        object.__setattr__(self, "clip_norms", tuple(math.inf if c is None else float(c) for c in self.clip_norms))
        object.__setattr__(self, "noise_stds", tuple(float(s) for s in self.noise_stds))
        if any(not c > 0 for c in self.clip_norms) or any(not s >= 0 for s in self.noise_stds):
            raise ValueError("clip norms must be positive and noise stds non-negative")

    def points(self) -> list[tuple[float, float]]:
        """Grid points with the undefended (inf, 0) point removed."""
        return [(c, s) for c in self.clip_norms for s in self.noise_stds if not (math.isinf(c) and s == 0)]

    def to_dict(self) -> dict:
        return {"clip_norms": [_inf_to_none(c) for c in self.clip_norms], "noise_stds": list(self.noise_stds),
                "min_ca": self.min_ca, "per_example": self.per_example}

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseGrid":
        d = dict(d)
        for key in ("clip_norms", "noise_stds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SceneGenConfig = field(default_factory=lambda: SceneGenConfig(num_scenes=2400))
    train_size: int = 2000
    seed: int = 0
    surrogate: PredictorConfig = field(default_factory=lambda: PredictorConfig.for_variant("A"))
    gray_victim: PredictorConfig = field(default_factory=lambda: PredictorConfig.for_variant("A"))
    black_victim: PredictorConfig | None = field(default_factory=lambda: PredictorConfig.for_variant("B"))
    training: TrainHyper = TrainHyper()
    scenario_mode: str = "optimized"
    k: int = 4
    side: str = "left"
    spacing: float = 4.0
    gap: tuple[int, int] = (1, 1)
    optimize: OptimizeHyper = OptimizeHyper()
    optimize_sample: int = 40
    objective: AttackObjective = AttackObjective()
    craft: CraftConfig = CraftConfig()
    dev_bound: float = DEFAULT_DEV_BOUND
    ca_threshold: float = CA_THRESHOLD
    asr_threshold: float = ASR_THRESHOLD
    asr_reference: str = "untriggered"
    budgets: tuple[float, ...] = ()
    defenses: DefenseGrid | None = None
    stealth: bool = True

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(float(b) for b in self.budgets))
        object.__setattr__(self, "gap", tuple(int(g) for g in self.gap))
        if not 0 < self.train_size < self.dataset.num_scenes:
            raise ValueError("train_size must leave at least one validation scene")
        if self.scenario_mode not in SCENARIO_MODES:
            raise ValueError(f"scenario_mode must be one of {SCENARIO_MODES}")
        if self.side not in ("left", "right"):
            raise ValueError("side must be left or right")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if not (self.ca_threshold > 0 and self.asr_threshold > 0):
            raise ValueError("thresholds must be positive")
        if self.asr_reference not in ASR_REFERENCES:
            raise ValueError(f"asr_reference must be one of {ASR_REFERENCES}")
        if any(not 0 <= b <= 1 for b in self.budgets):
            raise ValueError("budget values must lie in [0, 1]")
        if self.optimize_sample < 1:
            raise ValueError("optimize_sample must be >= 1")
        if self.surrogate.variant != self.gray_victim.variant:
            raise ValueError("gray-box victim must share the surrogate's variant")

    # -- seeds ---------------------------------------------------------------

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    @property
    def seeds(self) -> dict[str, int]:
        return {k: self.stage_seed(k) for k in SEED_OFFSETS}

    def surrogate_config(self) -> PredictorConfig:
        return replace(self.surrogate, seed=self.stage_seed("surrogate"))

    def victim_configs(self) -> dict[str, PredictorConfig]:
        out = {"gray-box": replace(self.gray_victim, seed=self.stage_seed("victim"))}
        if self.black_victim is not None:
            out["black-box"] = replace(self.black_victim, seed=self.stage_seed("victim"))
        return out

    def craft_config(self, budget: float | None = None) -> CraftConfig:
        cfg = replace(self.craft, seed=self.stage_seed("craft"))
        return cfg if budget is None else replace(cfg, budget=budget)

    def side_sign(self) -> int:
        return 1 if self.side == "left" else -1

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "train_size": self.train_size,
            "seed": self.seed,
            "surrogate": self.surrogate.to_dict(),
            "gray_victim": self.gray_victim.to_dict(),
            "black_victim": None if self.black_victim is None else self.black_victim.to_dict(),
            "training": asdict(self.training),
            "scenario_mode": self.scenario_mode,
            "k": self.k,
            "side": self.side,
            "spacing": self.spacing,
            "gap": list(self.gap),
            "optimize": asdict(self.optimize),
            "optimize_sample": self.optimize_sample,
            "objective": self.objective.to_dict(),
            "craft": self.craft.to_dict(),
            "dev_bound": self.dev_bound,
            "ca_threshold": self.ca_threshold,
            "asr_threshold": self.asr_threshold,
            "asr_reference": self.asr_reference,
            "budgets": list(self.budgets),
            "defenses": None if self.defenses is None else self.defenses.to_dict(),
            "stealth": self.stealth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        parsers = {
            "dataset": SceneGenConfig.from_dict,
            "surrogate": PredictorConfig.from_dict,
            "gray_victim": PredictorConfig.from_dict,
            "black_victim": PredictorConfig.from_dict,
            "training": lambda v: TrainHyper(**v),
            "optimize": lambda v: OptimizeHyper(**v),
            "objective": AttackObjective.from_dict,
            "craft": CraftConfig.from_dict,
            "defenses": DefenseGrid.from_dict,
        }
        for key, parse in parsers.items():
            if key in kw and kw[key] is not None:
                kw[key] = parse(kw[key])
        for key in ("gap", "budgets"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def reference_config(**overrides) -> ExperimentConfig:
    """The toy reference setting: 2000 training scenes, P = 5 %, optimized trigger."""
    return replace(ExperimentConfig(), **overrides)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Report types


@dataclass(frozen=True)
class SettingRow:
    setting: str
    scenario_mode: str
    surrogate: str
    victim: str
    clean_fde: float
    poison_fde: float
    clean_ade: float
    poison_ade: float
    ca: float
    asr: float
    baseline_asr: float
    n_clean: int
    n_triggered: int


@dataclass(frozen=True)
class BudgetPoint:
    budget: float
    n_poisons: int
    asr: float
    ca: float


@dataclass(frozen=True)
class DefenseRow:
    method: str
    clip_norm: float | None
    noise_std: float
    ca: float
    asr: float


@dataclass
class ExperimentReport:
    config_hash: str
    config: dict
    seeds: dict
    rows: list[SettingRow] = field(default_factory=list)
    budget_curve: list[BudgetPoint] = field(default_factory=list)
    defense_table: list[DefenseRow] = field(default_factory=list)
    defense_best: dict | None = None
    stealth: dict | None = None
    scenario: dict | None = None
    poison_audit: dict | None = None
    failed_stage: str | None = None
    error: str | None = None
    metric_rows: dict = field(default_factory=dict, repr=False)  # setting -> list[MetricRow], CSV only

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def row(self, setting: str) -> SettingRow:
        for r in self.rows:
            if r.setting == setting:
                return r
        raise KeyError(setting)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "seeds": self.seeds,
            "rows": [asdict(r) for r in self.rows],
            "budget_curve": [asdict(p) for p in self.budget_curve],
            "defense_table": [asdict(r) for r in self.defense_table],
            "defense_best": self.defense_best,
            "stealth": self.stealth,
            "scenario": self.scenario,
            "poison_audit": self.poison_audit,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(
            d["config_hash"], d["config"], d["seeds"],
            [SettingRow(**r) for r in d["rows"]],
            [BudgetPoint(**p) for p in d["budget_curve"]],
            [DefenseRow(**r) for r in d["defense_table"]],
            d.get("defense_best"), d.get("stealth"), d.get("scenario"), d.get("poison_audit"),
            d.get("failed_stage"), d.get("error"),
        )


def write_table(path: Path, rows: Sequence, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in fields])


def write_report(report: ExperimentReport, out_dir) -> Path:
    """Write report.json plus the Table-1/Table-2/budget CSVs and per-scene metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json() + "\n")
    write_table(out / "table_attack.csv", report.rows, list(SettingRow.__dataclass_fields__))
    write_table(out / "budget_curve.csv", report.budget_curve, list(BudgetPoint.__dataclass_fields__))
    write_table(out / "table_defense.csv", report.defense_table, list(DefenseRow.__dataclass_fields__))
    for setting, rows in sorted(report.metric_rows.items()):
        write_metric_rows(out / f"metrics_{setting}.csv", rows)
    return path


def read_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Pipeline pieces


def split_dataset(config: ExperimentConfig) -> tuple[list[DrivingScene], list[DrivingScene]]:
    scenes = generate_dataset(config.dataset, config.stage_seed("data"))
    return scenes[: config.train_size], scenes[config.train_size:]


def fit_model(pcfg: PredictorConfig, scenes: Sequence[DrivingScene], hyper: TrainHyper,
              robust: RobustTrainConfig | None = None) -> ModelParams:
    """Train from scratch with the shuffle stream seeded by the model's seed."""
    data = [(encode_scene(s, pcfg), s.target.fut) for s in scenes]
    hyper = replace(hyper, seed=pcfg.seed)
    if robust is None:
        return train(pcfg, data, hyper).params
    return robust_train(pcfg, data, robust, hyper).params


def seed_scenario(config: ExperimentConfig, scenes: Sequence[DrivingScene]) -> TriggerScenario:
    """Handcrafted scenario anchored on the first training scene that can host it."""
    for scene in scenes:
        try:
            if config.scenario_mode == "discontinued":
                sc = craft_discontinued(scene, config.k, config.gap, spacing=config.spacing, side=config.side_sign())
            else:
                sc = craft_imitating(scene, config.k, config.spacing, config.side_sign())
        except PlacementError:
            continue
        return sc
    raise PlacementError("no training scene can host the trigger")


def placeable_sample(scenario: TriggerScenario, scenes: Sequence[DrivingScene], n: int,
                     seed: int) -> list[DrivingScene]:
    order = np.random.default_rng(seed).permutation(len(scenes))
    out = []
    for i in order:
        try:
            scenario.apply(scenes[i])
        except PlacementError:
            continue
        out.append(scenes[i])
        if len(out) == n:
            break
    return out


@dataclass
class Evaluation:
    clean: list[MetricRecord]
    triggered: list[MetricRecord]
    untriggered: list[MetricRecord]  # same scenes as ``triggered`` without the trigger
    clean_ids: list[str]
    triggered_ids: list[str]


def evaluate_model(model: ModelParams, scenario: TriggerScenario, val: Sequence[DrivingScene]) -> Evaluation:
    """Score ``model`` on every validation scene and on every scene that can host the trigger."""
    cfg = model.config
    clean, trig, untrig, trig_ids = [], [], [], []
    for s in val:
        gt = s.target.fut
        h = reference_heading(s.target.obs)
        rec = compute_metrics(predict_absolute(model, encode_scene(s, cfg)), gt, h)
        clean.append(rec)
        try:
            st = scenario.apply(s)
        except PlacementError:
            continue
        trig.append(compute_metrics(predict_absolute(model, encode_scene(st, cfg)), gt, h))
        untrig.append(rec)
        trig_ids.append(s.scene_id)
    return Evaluation(clean, trig, untrig, [s.scene_id for s in val], trig_ids)


def _mean(records: Sequence[MetricRecord], attr: str) -> float:
    return float(np.mean([getattr(r, attr) for r in records])) if records else float("nan")


def score(victim: Evaluation, reference: Evaluation, config: ExperimentConfig) -> tuple[float, float, float]:
    """(CA, ASR, clean-model trigger baseline ASR)."""
    ca = clean_accuracy(reference.clean, victim.clean, config.ca_threshold)
    base = victim.untriggered if config.asr_reference == "untriggered" else reference.untriggered
    asr = attack_success_rate(victim.triggered, base, config.asr_threshold)
    baseline = attack_success_rate(reference.triggered, reference.untriggered, config.asr_threshold)
    return ca, asr, baseline


def metric_rows(victim: Evaluation, reference: Evaluation) -> list[MetricRow]:
    rows = [MetricRow(sid, c.fde, v.fde, c.ade, v.ade, v.lrd, v.frd, False)
            for sid, c, v in zip(victim.clean_ids, reference.clean, victim.clean)]
    rows += [MetricRow(sid, u.fde, t.fde, u.ade, t.ade, t.lrd, t.frd, True)
             for sid, u, t in zip(victim.triggered_ids, victim.untriggered, victim.triggered)]
    return rows


def audit_poisons(poisons: Sequence[PoisonedScene], train_scenes: Sequence[DrivingScene], stats: DatasetStats,
                  dev_bound: float) -> dict:
    """Safety and clean-label checks over every emitted poisoned trajectory."""
    by_id = {s.scene_id: s for s in train_scenes}
    n_tracks = soft_ok = fixed_ok = dev_ok = labels_ok = 0
    for p in poisons:
        base = by_id[p.base_scene_id]
        labels_ok += all(np.array_equal(p.scene.agent(a.id).fut.points, a.fut.points) for a in base.agents)
        for k, aid in enumerate(p.malicious_ids):
            track = p.scene.agent(aid).obs
            n_tracks += 1
            rep = check_soft_constraints(track, stats, Trajectory(p.anchor[k], track.dt), dev_bound)
            soft_ok += all(c.passed for c in rep.channels)
            dev_ok += rep.deviation_ok
            fixed_ok += float(np.max(np.abs(project_feasible(track).points - track.points))) <= 1e-6
    a0 = [p.alignment_trace[0] for p in poisons if p.alignment_trace]
    a1 = [p.alignment_trace[-1] for p in poisons if p.alignment_trace]
    return {
        "n_poisons": len(poisons),
        "n_tracks": n_tracks,
        "soft_constraints_pass": soft_ok,
        "fixed_point_pass": fixed_ok,
        "deviation_pass": dev_ok,
        "clean_labels": labels_ok,
        "annihilated": sum(p.annihilated for p in poisons),
        "degenerate_steps": sum(p.degenerate_steps for p in poisons),
        "mean_alignment_initial": float(np.mean(a0)) if a0 else None,
        "mean_alignment_final": float(np.mean(a1)) if a1 else None,
    }


class _Stage:
    """Records the name of the stage being run so failures can be reported."""

    def __init__(self, report: ExperimentReport):
        self.report = report
        self.name = None

    def __call__(self, name: str):
        self.name = name
        logger.info("stage: %s", name)
        return self


@dataclass
class Pipeline:
    """Shared, lazily built artefacts for one config (dataset, surrogate, trigger, references)."""

    config: ExperimentConfig
    train_scenes: list = field(default_factory=list)
    val_scenes: list = field(default_factory=list)
    stats: DatasetStats | None = None
    surrogate: ModelParams | None = None
    scenario: TriggerScenario | None = None
    scenario_info: dict | None = None
    adv_grad: np.ndarray | None = None
    references: dict = field(default_factory=dict)
    reference_evals: dict = field(default_factory=dict)

    def build_data(self) -> None:
        self.train_scenes, self.val_scenes = split_dataset(self.config)
        self.stats = compute_dataset_stats(self.train_scenes)

    def build_surrogate(self) -> None:
        self.surrogate = fit_model(self.config.surrogate_config(), self.train_scenes, self.config.training)

    def build_scenario(self) -> None:
        cfg = self.config
        seed = seed_scenario(cfg, self.train_scenes)
        sample = placeable_sample(seed, self.train_scenes, cfg.optimize_sample, cfg.stage_seed("craft"))
        info = {"provenance": seed.provenance, "k": seed.k, "adv_loss_seed": adversarial_loss(
            self.surrogate, seed, sample, cfg.objective)}
        if cfg.scenario_mode == "optimized":
            res = optimize_trigger(self.surrogate, sample, seed, cfg.objective, self.stats, cfg.optimize,
                                   cfg.dev_bound)
            seed = res.scenario
            info.update(provenance=seed.provenance, best_step=res.best_step, aborted=res.aborted)
        info["adv_loss"] = adversarial_loss(self.surrogate, seed, sample, cfg.objective)
        info["eta_max_abs"] = float(np.max(np.abs(seed.eta)))
        self.scenario, self.scenario_info = seed, info

    def build_adv_grad(self) -> None:
        craft = self.config.craft_config()
        self.adv_grad = adv_gradient_for(self.surrogate, self.train_scenes, self.scenario, self.config.objective,
                                         craft.adv_sample, craft.seed)

    def poisons(self, budget: float) -> list[PoisonedScene]:
        if budget == 0:
            return []
        return craft_poisons(self.surrogate, self.train_scenes, self.scenario, self.config.objective,
                             self.config.craft_config(budget), self.stats, self.config.dev_bound, self.adv_grad)

    def reference(self, setting: str) -> tuple[ModelParams, Evaluation]:
        """Clean model with the victim's config and seed, trained on clean data."""
        if setting not in self.references:
            pcfg = self.config.victim_configs()[setting]
            model = fit_model(pcfg, self.train_scenes, self.config.training)
            self.references[setting] = model
            self.reference_evals[setting] = evaluate_model(model, self.scenario, self.val_scenes)
        return self.references[setting], self.reference_evals[setting]

    def victim(self, setting: str, poisons: Sequence[PoisonedScene],
               robust: RobustTrainConfig | None = None) -> ModelParams:
        if not poisons and robust is None:
            return self.reference(setting)[0]
        mixed = merge_training_set(self.train_scenes, poisons)
        return fit_model(self.config.victim_configs()[setting], mixed, self.config.training, robust)

    def prepare(self, stage: _Stage | None = None) -> None:
        steps = [("data", self.build_data), ("surrogate", self.build_surrogate),
                 ("scenario", self.build_scenario), ("adv_gradient", self.build_adv_grad)]
        for name, fn in steps:
            if stage is not None:
                stage(name)
            fn()


def _setting_row(setting: str, config: ExperimentConfig, victim_cfg: PredictorConfig, ev: Evaluation,
                 ref_ev: Evaluation) -> SettingRow:
    ca, asr, baseline = score(ev, ref_ev, config)
    return SettingRow(setting, config.scenario_mode, config.surrogate.variant, victim_cfg.variant,
                      _mean(ev.clean, "fde"), _mean(ev.triggered, "fde"), _mean(ev.clean, "ade"),
                      _mean(ev.triggered, "ade"), ca, asr, baseline, len(ev.clean), len(ev.triggered))


def _budget_curve(pipe: Pipeline, budgets: Sequence[float]) -> list[BudgetPoint]:
    _, ref_ev = pipe.reference("gray-box")
    curve = []
    for b in budgets:
        poisons = pipe.poisons(b)
        ev = evaluate_model(pipe.victim("gray-box", poisons), pipe.scenario, pipe.val_scenes)
        ca, asr, _ = score(ev, ref_ev, pipe.config)
        curve.append(BudgetPoint(b, len(poisons), asr, ca))
        logger.info("budget %.2f: ASR %.3f CA %.3f", b, asr, ca)
    return curve


def _defense_grid(pipe: Pipeline, poisons: Sequence[PoisonedScene], undefended: SettingRow,
                  grid: DefenseGrid) -> tuple[list[DefenseRow], dict]:
    _, ref_ev = pipe.reference("gray-box")
    table = [DefenseRow("none", None, 0.0, undefended.ca, undefended.asr)]
    for clip, noise in grid.points():
        rt = RobustTrainConfig(clip, noise, grid.per_example, pipe.config.stage_seed("noise"))
        ev = evaluate_model(pipe.victim("gray-box", poisons, rt), pipe.scenario, pipe.val_scenes)
        ca, asr, _ = score(ev, ref_ev, pipe.config)
        parts = ([] if math.isinf(clip) else [f"clip={clip:g}"]) + ([f"noise={noise:g}"] if noise > 0 else [])
        table.append(DefenseRow("+".join(parts), _inf_to_none(clip), noise, ca, asr))
        logger.info("defense %s: ASR %.3f CA %.3f", table[-1].method, asr, ca)
    eligible = [r for r in table[1:] if r.ca >= grid.min_ca]
    best = None
    if eligible:
        pick = min(eligible, key=lambda r: (r.asr, -r.ca))
        best = {"method": pick.method, "asr": pick.asr, "ca": pick.ca,
                "asr_drop": undefended.asr - pick.asr, "min_ca": grid.min_ca}
    return table, best


def _stealth(pipe: Pipeline, poisons: Sequence[PoisonedScene]) -> dict:
    ids = {p.base_scene_id for p in poisons}
    mixed = merge_training_set(pipe.train_scenes, poisons)
    victim = pipe.victim("gray-box", poisons)
    flags = [s.scene_id in ids for s in mixed]
    seed = pipe.config.stage_seed("craft")
    lat = scene_latents(victim, mixed)
    rep = activation_clustering(lat, flags, seed=seed)
    clean_model, _ = pipe.reference("gray-box")
    clean_rep = activation_clustering(scene_latents(clean_model, pipe.train_scenes), None, seed=seed)
    return {"recall": rep.recall, "precision": rep.precision, "false_positive_rate": rep.false_positive_rate,
            "silhouette": rep.silhouette, "clean_silhouette": clean_rep.silhouette,
            "smaller_fraction": rep.smaller_fraction, "detected": rep.detects(), "degenerate": rep.degenerate,
            "recall_at_fpr_0.2": recall_at_fpr(cluster_margin(lat, rep.assignments), flags, 0.2) if ids else 0.0}


def run_experiment(config: ExperimentConfig, pipeline: Pipeline | None = None) -> ExperimentReport:
    """Full attack pipeline for ``config``; a failing stage yields a partial report."""
    report = ExperimentReport(config.config_hash(), config.to_dict(), config.seeds)
    stage = _Stage(report)
    pipe = pipeline or Pipeline(config)
    try:
        if pipe.scenario is None:
            pipe.prepare(stage)
        report.scenario = dict(pipe.scenario_info)
        stage("poisons")
        poisons = pipe.poisons(config.craft.budget)
        if not poisons:
            raise ValueError("no training scene can host a feasible trigger placement")
        report.poison_audit = audit_poisons(poisons, pipe.train_scenes, pipe.stats, config.dev_bound)
        for setting, vcfg in config.victim_configs().items():
            stage(f"victim:{setting}")
            if setting == "gray-box" and vcfg != replace(config.surrogate, seed=vcfg.seed):
                raise ValueError("gray-box victim differs from the surrogate beyond its seed")
            _, ref_ev = pipe.reference(setting)
            ev = evaluate_model(pipe.victim(setting, poisons), pipe.scenario, pipe.val_scenes)
            report.rows.append(_setting_row(setting, config, vcfg, ev, ref_ev))
            report.metric_rows[setting] = metric_rows(ev, ref_ev)
        if config.budgets:
            stage("budget_sweep")
            report.budget_curve = _budget_curve(pipe, config.budgets)
        if config.stealth:
            stage("stealth")
            report.stealth = _stealth(pipe, poisons)
        if config.defenses is not None:
            stage("defenses")
            report.defense_table, report.defense_best = _defense_grid(pipe, poisons, report.row("gray-box"),
                                                                      config.defenses)
    except Exception as exc:  # partial report names the failing stage
        logger.exception("stage %s failed", stage.name)
        report.failed_stage = stage.name
        report.error = f"{type(exc).__name__}: {exc}"
    return report


def run_budget_sweep(config: ExperimentConfig, budgets: Sequence[float] = DEFAULT_BUDGETS,
                     include_zero: bool = False, pipeline: Pipeline | None = None) -> list[BudgetPoint]:
    """ASR per poisoning budget with dataset, surrogate and trigger shared across budgets."""
    budgets = ([0.0] if include_zero else []) + [float(b) for b in budgets]
    if any(not 0 <= b <= 1 for b in budgets):
        raise ValueError("budget values must lie in [0, 1]")
    pipe = pipeline or Pipeline(config)
    if pipe.scenario is None:
        pipe.prepare()
    return _budget_curve(pipe, budgets)


def run_defense_grid(config: ExperimentConfig, grid: DefenseGrid | None = None,
                     pipeline: Pipeline | None = None) -> tuple[list[DefenseRow], dict | None]:
    pipe = pipeline or Pipeline(config)
    if pipe.scenario is None:
        pipe.prepare()
    poisons = pipe.poisons(config.craft.budget)
    _, ref_ev = pipe.reference("gray-box")
    ev = evaluate_model(pipe.victim("gray-box", poisons), pipe.scenario, pipe.val_scenes)
    row = _setting_row("gray-box", config, config.victim_configs()["gray-box"], ev, ref_ev)
    return _defense_grid(pipe, poisons, row, grid or config.defenses or DefenseGrid())
