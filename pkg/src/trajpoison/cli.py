"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (DEFAULT_BUDGETS, BudgetPoint, DefenseRow, ExperimentConfig, write_table,
                      audit_poisons, evaluate_model, fit_model, load_config, metric_rows, placeable_sample,
                      run_budget_sweep, run_defense_grid, run_experiment, score, seed_scenario, split_dataset,
                      write_report)
from .metrics import write_metric_rows
from .poison import adv_gradient_for, craft_poisons, load_poisons, merge_training_set, save_poisons
from .predictor import ModelParams
from .scenario import TriggerScenario, optimize_trigger
from .scene import DatasetStats, compute_dataset_stats, load_scenes, save_scenes

logger = logging.getLogger("trajpoison")

COMMANDS = ("gen-data", "train", "craft-scenario", "craft-poisons", "evaluate", "sweep", "defend", "report")
ROLES = ("surrogate", "gray-box", "black-box")


class UsageError(Exception):
    """Raised for bad command-line input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="trajpoison", description="Implicit backdoor poisoning of trajectory predictors.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="generate train/val scenes and dataset stats")

    t = sub.add_parser("train", parents=[common], help="train a predictor")
    t.add_argument("--data", help="directory from gen-data (default: --out)")
    t.add_argument("--role", choices=ROLES, default="surrogate")
    t.add_argument("--poisons", help="poisons JSONL to merge into the training set")

    c = sub.add_parser("craft-scenario", parents=[common], help="build the trigger scenario")
    c.add_argument("--data")
    c.add_argument("--surrogate", required=True)

    cp = sub.add_parser("craft-poisons", parents=[common], help="craft poisoned training scenes")
    cp.add_argument("--data")
    cp.add_argument("--surrogate", required=True)
    cp.add_argument("--scenario", required=True)
    cp.add_argument("--budget", type=float, help="override the config's poison budget")

    e = sub.add_parser("evaluate", parents=[common], help="CA / ASR of a model against a clean reference")
    e.add_argument("--data")
    e.add_argument("--model", required=True)
    e.add_argument("--reference", required=True, help="clean model of the same config and seed")
    e.add_argument("--scenario", required=True)

    s = sub.add_parser("sweep", parents=[common], help="ASR per poisoning budget")
    s.add_argument("--budgets", type=float, nargs="+")
    s.add_argument("--include-zero", action="store_true")

    sub.add_parser("defend", parents=[common], help="clip/noise defense grid")
    sub.add_parser("report", parents=[common], help="run the full experiment and write the report")
    return p


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"--config: no such file {path}")
    try:
        cfg = load_config(path)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config: {exc}") from exc
    return cfg if args.seed is None else replace(cfg, seed=args.seed)


def _data_dir(args) -> Path:
    d = Path(args.data or args.out)
    for name in ("train.jsonl", "val.jsonl", "stats.json"):
        if not (d / name).is_file():
            raise UsageError(f"--data: {d / name} missing (run gen-data first)")
    return d


def _require(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {p}")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> int:
    train, val = split_dataset(cfg)
    save_scenes(train, out / "train.jsonl")
    save_scenes(val, out / "val.jsonl")
    compute_dataset_stats(train).save(out / "stats.json")
    logger.info("wrote %d train / %d val scenes to %s", len(train), len(val), out)
    return 0


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    d = _data_dir(args)
    scenes = load_scenes(d / "train.jsonl")
    if args.poisons:
        scenes = merge_training_set(scenes, load_poisons(_require(args.poisons, "--poisons")))
    if args.role == "surrogate":
        pcfg = cfg.surrogate_config()
    else:
        victims = cfg.victim_configs()
        if args.role not in victims:
            raise UsageError(f"--role {args.role}: no such victim in the config")
        pcfg = victims[args.role]
    model = fit_model(pcfg, scenes, cfg.training)
    tag = args.role if not args.poisons else f"{args.role}_poisoned"
    model.save(out / f"model_{tag}.json")
    return 0


def cmd_craft_scenario(args, cfg: ExperimentConfig, out: Path) -> int:
    d = _data_dir(args)
    train = load_scenes(d / "train.jsonl")
    stats = DatasetStats.load(d / "stats.json")
    surrogate = ModelParams.load(_require(args.surrogate, "--surrogate"))
    scenario = seed_scenario(cfg, train)
    if cfg.scenario_mode == "optimized":
        sample = placeable_sample(scenario, train, cfg.optimize_sample, cfg.stage_seed("craft"))
        scenario = optimize_trigger(surrogate, sample, scenario, cfg.objective, stats, cfg.optimize,
                                    cfg.dev_bound).scenario
    scenario.save(out / "scenario.json")
    return 0


def cmd_craft_poisons(args, cfg: ExperimentConfig, out: Path) -> int:
    d = _data_dir(args)
    train = load_scenes(d / "train.jsonl")
    stats = DatasetStats.load(d / "stats.json")
    surrogate = ModelParams.load(_require(args.surrogate, "--surrogate"))
    scenario = TriggerScenario.load(_require(args.scenario, "--scenario"))
    craft = cfg.craft_config(args.budget)
    adv = adv_gradient_for(surrogate, train, scenario, cfg.objective, craft.adv_sample, craft.seed)
    poisons = craft_poisons(surrogate, train, scenario, cfg.objective, craft, stats, cfg.dev_bound, adv)
    save_poisons(poisons, out / "poisons.jsonl")
    _write_json(out / "poison_audit.json", audit_poisons(poisons, train, stats, cfg.dev_bound))
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> int:
    d = _data_dir(args)
    val = load_scenes(d / "val.jsonl")
    scenario = TriggerScenario.load(_require(args.scenario, "--scenario"))
    model = ModelParams.load(_require(args.model, "--model"))
    ref = ModelParams.load(_require(args.reference, "--reference"))
    ev, ref_ev = evaluate_model(model, scenario, val), evaluate_model(ref, scenario, val)
    ca, asr, baseline = score(ev, ref_ev, cfg)
    write_metric_rows(out / "metrics.csv", metric_rows(ev, ref_ev))
    _write_json(out / "evaluation.json", {"ca": ca, "asr": asr, "baseline_asr": baseline,
                                          "n_clean": len(ev.clean), "n_triggered": len(ev.triggered)})
    print(f"CA {ca:.4f}  ASR {asr:.4f}  clean-model baseline {baseline:.4f}")
    return 0


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> int:
    budgets = args.budgets or cfg.budgets or DEFAULT_BUDGETS
    curve = run_budget_sweep(cfg, budgets, include_zero=args.include_zero)
    write_table(out / "budget_curve.csv", curve, list(BudgetPoint.__dataclass_fields__))
    for p in curve:
        print(f"P={p.budget:.2f}  poisons={p.n_poisons}  ASR {p.asr:.4f}  CA {p.ca:.4f}")
    return 0


def cmd_defend(args, cfg: ExperimentConfig, out: Path) -> int:
    table, best = run_defense_grid(cfg, cfg.defenses)
    write_table(out / "table_defense.csv", table, list(DefenseRow.__dataclass_fields__))
    _write_json(out / "defense_best.json", best)
    for r in table:
        print(f"{r.method:>20s}  ASR {r.asr:.4f}  CA {r.ca:.4f}")
    return 0


def cmd_report(args, cfg: ExperimentConfig, out: Path) -> int:
    report = run_experiment(cfg)
    path = write_report(report, out)
    print(path)
    if not report.ok:
        print(f"stage {report.failed_stage} failed: {report.error}", file=sys.stderr)
        return 2
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "craft-scenario": cmd_craft_scenario,
    "craft-poisons": cmd_craft_poisons,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "defend": cmd_defend,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
