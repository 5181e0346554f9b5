import json
from dataclasses import replace
from pathlib import Path

import pytest

from trajpoison.cli import main
from trajpoison.harness import (DEFAULT_BUDGETS, DefenseGrid, ExperimentConfig, Pipeline, load_config, read_report,
                                reference_config, run_budget_sweep, run_defense_grid, run_experiment, save_config,
                                write_report)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = CONFIGS / "smoke.json"


@pytest.fixture(scope="module")
def smoke():
    return load_config(SMOKE)


@pytest.fixture(scope="module")
def pipe(smoke):
    p = Pipeline(smoke)
    p.prepare()
    return p


@pytest.fixture(scope="module")
def report(smoke, pipe):
    return run_experiment(smoke, pipe)


def test_config_round_trip(tmp_path, smoke):
    save_config(smoke, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == smoke and back.config_hash() == smoke.config_hash()
    assert replace(smoke, seed=1).config_hash() != smoke.config_hash()
    assert ExperimentConfig.from_dict(reference_config().to_dict()) == reference_config()


def test_shipped_reference_matches_code_default():
    assert load_config(CONFIGS / "reference.json") == reference_config()


def test_config_validation(smoke):
    with pytest.raises(ValueError):
        replace(smoke, train_size=smoke.dataset.num_scenes)
    with pytest.raises(ValueError):
        replace(smoke, scenario_mode="telepathic")


def test_stage_seeds_distinct(smoke):
    seeds = smoke.seeds
    assert len(set(seeds.values())) == len(seeds)


def test_report_contents(report, smoke):
    assert report.ok, report.error
    row = report.row("gray-box")
    assert 0 <= row.ca <= 1 and 0 <= row.asr <= 1
    assert row.n_clean == row.n_triggered == smoke.dataset.num_scenes - smoke.train_size
    assert report.config_hash == smoke.config_hash()
    audit = report.poison_audit
    for key in ("soft_constraints_pass", "fixed_point_pass", "deviation_pass"):
        assert audit[key] == audit["n_tracks"]
    assert audit["clean_labels"] == audit["n_poisons"]
    assert set(report.stealth) >= {"recall", "false_positive_rate", "silhouette", "clean_silhouette"}


def test_two_runs_identical(smoke, report):
    again = run_experiment(smoke)
    assert again.to_json() == report.to_json()


def test_report_files(tmp_path, report):
    path = write_report(report, tmp_path)
    assert read_report(path).to_json() == report.to_json()
    for name in ("table_attack.csv", "budget_curve.csv", "table_defense.csv", "metrics_gray-box.csv"):
        assert (tmp_path / name).is_file()
    header = (tmp_path / "table_attack.csv").read_text().splitlines()[0].split(",")
    assert {"clean_fde", "poison_fde", "clean_ade", "poison_ade", "ca", "asr"} <= set(header)


def test_failing_stage_gives_partial_report(smoke):
    bad = replace(smoke, gray_victim=replace(smoke.gray_victim, hidden_sizes=(8,)))
    rep = run_experiment(bad)
    assert not rep.ok and rep.failed_stage == "victim:gray-box"
    assert rep.poison_audit is not None and rep.rows == []


def test_infeasible_trigger_fails_poison_stage(smoke):
    # the discontinued trigger's speed jump breaks the acceleration bounds at these speeds
    rep = run_experiment(replace(smoke, scenario_mode="discontinued"))
    assert rep.failed_stage == "poisons" and "feasible" in rep.error


def test_default_budgets():
    assert DEFAULT_BUDGETS == (0.05, 0.10, 0.20, 0.50)


def test_zero_budget_is_clean_model(smoke, pipe, report):
    curve = run_budget_sweep(smoke, (smoke.craft.budget,), include_zero=True, pipeline=pipe)
    assert [p.budget for p in curve] == [0.0, smoke.craft.budget]
    zero = curve[0]
    assert zero.n_poisons == 0 and zero.ca == 1.0
    assert zero.asr == report.row("gray-box").baseline_asr
    assert curve[1].asr == report.row("gray-box").asr


def test_sweep_rejects_bad_budget(smoke, pipe):
    with pytest.raises(ValueError):
        run_budget_sweep(smoke, (1.5,), pipeline=pipe)


def test_defense_grid(smoke, pipe):
    grid = DefenseGrid(clip_norms=(float("inf"), 10.0), noise_stds=(0.0,))
    table, best = run_defense_grid(smoke, grid, pipeline=pipe)
    assert [r.method for r in table][0] == "none"
    assert len(table) == 1 + len(grid.points())
    assert DefenseGrid.from_dict(grid.to_dict()) == grid


# ---------------------------------------------------------------------------
# CLI


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_cli_missing_config(capsys, tmp_path):
    assert run_cli("gen-data", "--out", tmp_path) == 1
    assert "--config" in capsys.readouterr().err
    assert run_cli("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path) == 1
    assert "--config" in capsys.readouterr().err


def test_cli_bad_command(capsys):
    assert run_cli("fly") == 1
    assert capsys.readouterr().err


def test_cli_missing_data(capsys, tmp_path):
    assert run_cli("train", "--config", SMOKE, "--out", tmp_path) == 1
    assert "gen-data" in capsys.readouterr().err


def test_cli_gen_data_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run_cli("gen-data", "--config", SMOKE, "--seed", 7, "--out", tmp_path / d) == 0
    for name in ("train.jsonl", "val.jsonl", "stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_stepwise_pipeline(tmp_path, capsys):
    out = tmp_path
    base = ("--config", SMOKE, "--out", out)
    assert run_cli("gen-data", *base) == 0
    assert run_cli("train", *base, "--role", "surrogate") == 0
    assert run_cli("craft-scenario", *base, "--surrogate", out / "model_surrogate.json") == 0
    assert run_cli("craft-poisons", *base, "--surrogate", out / "model_surrogate.json",
                   "--scenario", out / "scenario.json") == 0
    audit = json.loads((out / "poison_audit.json").read_text())
    assert audit["deviation_pass"] == audit["n_tracks"]
    assert run_cli("train", *base, "--role", "gray-box") == 0
    assert run_cli("train", *base, "--role", "gray-box", "--poisons", out / "poisons.jsonl") == 0
    assert run_cli("evaluate", *base, "--model", out / "model_gray-box_poisoned.json",
                   "--reference", out / "model_gray-box.json", "--scenario", out / "scenario.json") == 0
    ev = json.loads((out / "evaluation.json").read_text())
    assert 0 <= ev["asr"] <= 1 and (out / "metrics.csv").is_file()
    assert "ASR" in capsys.readouterr().out


def test_cli_report(tmp_path):
    assert run_cli("report", "--config", SMOKE, "--out", tmp_path) == 0
    rep = read_report(tmp_path / "report.json")
    assert rep.ok and rep.config_hash == load_config(SMOKE).config_hash()
    assert (tmp_path / "table_attack.csv").is_file() and (tmp_path / "budget_curve.csv").is_file()
