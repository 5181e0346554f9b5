"""Implicit scenario-injection backdoors for trajectory prediction, at desk scale."""

from .harness import ExperimentConfig, ExperimentReport, reference_config, run_budget_sweep, run_experiment
from .metrics import ade, attack_success_rate, clean_accuracy, fde
from .poison import CraftConfig, PoisonedScene, craft_poisons
from .predictor import ModelParams, PredictorConfig, TrainHyper, encode_scene, predict, train
from .scenario import AttackObjective, TriggerScenario, craft_discontinued, craft_imitating, optimize_trigger
from .scene import DrivingScene, SceneGenConfig, Trajectory, generate_dataset

__all__ = [
    "AttackObjective", "CraftConfig", "DrivingScene", "ExperimentConfig", "ExperimentReport", "ModelParams",
    "PoisonedScene", "PredictorConfig", "SceneGenConfig", "TrainHyper", "Trajectory", "TriggerScenario",
    "ade", "attack_success_rate", "clean_accuracy", "craft_discontinued", "craft_imitating", "craft_poisons",
    "encode_scene", "fde", "generate_dataset", "optimize_trigger", "predict", "reference_config",
    "run_budget_sweep", "run_experiment", "train",
]
