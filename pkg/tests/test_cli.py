import json

import pandas as pd
import pytest

from conftest import census_without_response, small_world
from merf_sae import cli
from merf_sae.data import write_census, write_survey
from merf_sae.exceptions import (ConfigError, ConsistencyError, EmptyInputError, FitError,
                                 MerfError, ParseError, SchemaError)

FAST = ["--trees", "15", "--bias-B", "3", "--max-iter", "10"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    pop, survey, _, _ = small_world()
    write_survey(survey, root / "survey.csv")
    write_census(census_without_response(pop), root / "census.csv")
    write_census(pop, root / "population.csv")
    labels = sorted(set(pop.area))
    pd.DataFrame({"area": labels, "n_i": [5, 0, 8, 6, 0, 7, 4, 9]}).to_csv(
        root / "pattern.csv", index=False)
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(files, out, threads):
    """fit -> estimate -> mse; returns the bytes of every result file."""
    assert run("fit", files / "survey.csv", *FAST, "--seed", 3, "--threads", threads,
               "--out", out) == 0
    assert run("estimate", out / "model.json", files / "census.csv", "--out", out,
               "--threads", threads) == 0
    mse_dir = out / "mse"
    assert run("mse", out / "model.json", files / "survey.csv", files / "census.csv",
               "--B", 2, "--refit-trees", 8, "--seed", 4, "--threads", threads,
               "--out", mse_dir) == 0
    return {name: path.read_bytes() for name, path in
            (("model", out / "model.json"), ("estimates", out / "estimates.csv"),
             ("mse", mse_dir / "estimates.csv"))}


def test_fit_estimate_mse_pipeline(files, tmp_path, capsys):
    outputs = pipeline(files, tmp_path / "t1", 1)
    printed = capsys.readouterr().out
    assert "seed: 3" in printed and "iteration" in printed
    est = pd.read_csv(tmp_path / "t1" / "estimates.csv")
    assert len(est) == 8
    assert (est.loc[~est.in_sample, "v_hat"] == 0).all()
    mse = pd.read_csv(tmp_path / "t1" / "mse" / "estimates.csv")
    assert (mse.mse_hat >= 0).all() and mse.cv.notna().all()
    report = json.loads((tmp_path / "t1" / "fit_report.json").read_text())
    assert report["seed"] == 3 and report["command"] == "fit"
    assert "numpy" in report["versions"]
    assert outputs["model"].startswith(b"{")


def test_pipeline_is_bitwise_reproducible_across_threads(files, tmp_path):
    base = pipeline(files, tmp_path / "t1", 1)
    for threads in (4, 8):
        assert pipeline(files, tmp_path / f"t{threads}", threads) == base


def simulate(files, out, threads, *extra):
    argv = ["simulate", "--mode", "design-based", "--census", files / "population.csv",
            "--pattern", files / "pattern.csv", "-T", 2, *FAST, "--seed", 5,
            "--threads", threads, "--out", out, *extra]
    assert run(*argv) == 0
    return {name: (out / name).read_bytes() for name in
            ("simulation.csv", "metrics.csv", "fits.csv")}


def test_simulate_design_based_reproducible(files, tmp_path):
    base = simulate(files, tmp_path / "s1", 1, "--methods", "merf,linear_baseline,direct")
    for threads in (4, 8):
        assert simulate(files, tmp_path / f"s{threads}", threads,
                        "--methods", "merf,linear_baseline,direct") == base
    frame = pd.read_csv(tmp_path / "s1" / "simulation.csv")
    assert set(frame.method) == {"merf", "linear_baseline", "direct"}
    assert len(frame) == 2 * 3 * 8


def test_simulate_model_based_with_bootstrap(tmp_path):
    out = tmp_path / "mb"
    args = ["simulate", "--scenario", "Normal", "-M", 1, "--methods", "merf",
            "--trees", 10, "--max-iter", 5, "--bias-B", 2, "--B", 1, "--refit-trees", 5,
            "--seed", 1, "--out", out]
    assert run(*args) == 0
    frame = pd.read_csv(out / "simulation.csv")
    assert len(frame) == 50 and frame.mse_hat.notna().all()
    again = tmp_path / "mb8"
    assert run(*args[:-2], "--out", again, "--threads", 8) == 0
    assert (out / "simulation.csv").read_bytes() == (again / "simulation.csv").read_bytes()


def test_config_file(files, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "forest": {"n_trees": 15},
                               "merf": {"bias_correction_B": 3, "max_iter": 10}}))
    assert run("fit", files / "survey.csv", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("fit", files / "survey.csv", *FAST, "--seed", 3, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "model.json").read_bytes() == \
        (tmp_path / "b" / "model.json").read_bytes()


def test_linear_learner_option(files, tmp_path):
    assert run("fit", files / "survey.csv", "--learner", "linear", "--bias-B", 2,
               "--out", tmp_path) == 0
    assert json.loads((tmp_path / "model.json").read_text())["learner"]["type"] == "linear"


@pytest.mark.parametrize("exc, code", [
    (EmptyInputError("x"), 5), (SchemaError("x"), 3), (ParseError("x"), 4),
    (ConsistencyError("x"), 6), (ConfigError("x"), 7), (FitError("x"), 8),
    (MerfError("x"), 8), (RuntimeError("x"), 1)])
def test_exit_code_table(exc, code):
    assert cli.exit_code(exc) == code


def test_exit_codes_end_to_end(files, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    assert run("fit", tmp_path / "none.csv", "--out", tmp_path) == 3
    bad.write_text("area,y,x1\nA,abc,1\nB,2,2\n")
    assert run("fit", bad, "--out", tmp_path) == 4
    bad.write_text("")
    assert run("fit", bad, "--out", tmp_path) == 5
    assert run("fit", files / "survey.csv", "--trees", 0, "--out", tmp_path) == 7
    assert run("fit", files / "survey.csv", "--mtry", 5, "--bias-B", 2, "--out", tmp_path) == 7
    assert run("fit", files / "survey.csv", "--seed", -1, "--out", tmp_path) == 7
    assert run("bogus") == 2
    assert run("fit") == 2
    assert run("estimate", tmp_path / "none.json", files / "census.csv") == 3
    # census that lacks a sampled area
    assert run("fit", files / "survey.csv", *FAST, "--out", tmp_path / "m") == 0
    census = pd.read_csv(files / "census.csv")
    census[census.area != sorted(set(census.area))[0]].to_csv(tmp_path / "c.csv", index=False)
    assert run("estimate", tmp_path / "m" / "model.json", tmp_path / "c.csv",
               "--out", tmp_path) == 6
    assert run("simulate", "--mode", "design-based", "--out", tmp_path) == 7
    assert "error:" in capsys.readouterr().err


def test_mse_rejects_a_different_survey(files, tmp_path):
    assert run("fit", files / "survey.csv", *FAST, "--out", tmp_path) == 0
    survey = pd.read_csv(files / "survey.csv")
    survey.iloc[:-1].to_csv(tmp_path / "short.csv", index=False)
    assert run("mse", tmp_path / "model.json", tmp_path / "short.csv", files / "census.csv",
               "--B", 1, "--out", tmp_path) == 6


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "merf_sae", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout
