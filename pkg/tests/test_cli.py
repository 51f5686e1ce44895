import json

import pytest

from metatreat.cli import main, report_from_csv_text

GEN_CONFIG = {
    "n_groups": 3,
    "n_per_group": 10,
    "d_pre": 3,
    "d_aux": 3,
    "delta": [-1.0, 0.0, 1.0],
    "noise_sigma": 0.5,
    "seed": 4,
}

FAST_RUN = {
    "task_kind": "regression",
    "preprocess": {"scaling": "standardize"},
    "selection": {"method": "all_post"},
    "base": {
        "n_layers": 1,
        "hidden_dim": 6,
        "embedding_dim": 4,
        "activation": "tanh",
        "dropout_rate": 0.05,
        "reg_kind": "l2",
        "reg_strength": 1e-4,
        "optimizer": "sgd",
        "learning_rate": 0.05,
        "inner_iterations": 2,
    },
    "meta": {"meta_iterations": 3, "epsilon0": 0.5, "k": 4, "tasks_per_iteration": 1},
    "cv": {"seed": 7},
}

TINY_SPACE = {
    "n_layers": [1],
    "hidden_dim": [6],
    "embedding_dim": [4],
    "activation": ["tanh"],
    "dropout_rate": [0.05],
    "reg_kind": ["l2"],
    "reg_strength": [1e-4],
    "optimizer": ["sgd"],
    "learning_rate": [0.05, 0.01],
    "inner_iterations": [2],
    "meta_iterations": [3],
    "epsilon0": [0.5],
    "k": [4],
    "tasks_per_iteration": [1],
    "selection_method": ["all_post"],
    "scaling": ["standardize"],
    "missing_threshold": [0.5],
}


@pytest.fixture()
def study_dir(tmp_path):
    gen = tmp_path / "gen.json"
    gen.write_text(json.dumps(GEN_CONFIG))
    out = tmp_path / "data"
    assert main(["generate", "--config", str(gen), "--out", str(out)]) == 0
    return out


def write_run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(FAST_RUN))
    return path


def test_generate_writes_three_files(study_dir):
    assert (study_dir / "data.csv").exists()
    assert (study_dir / "manifest.json").exists()
    assert (study_dir / "ground_truth.json").exists()


def test_generate_rerun_is_byte_identical(tmp_path, study_dir):
    gen = tmp_path / "gen.json"
    out2 = tmp_path / "data2"
    assert main(["generate", "--config", str(gen), "--out", str(out2)]) == 0
    for name in ("data.csv", "manifest.json", "ground_truth.json"):
        assert (study_dir / name).read_bytes() == (out2 / name).read_bytes()


def test_generate_malformed_config_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**GEN_CONFIG, "n_grups": 3}))
    code = main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "n_grups" in capsys.readouterr().err


def test_cv_writes_reports_with_all_model_rows(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    out = tmp_path / "cv"
    code = main([
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--out", str(out),
    ])
    assert code == 0
    text = (out / "report.csv").read_text()
    report = report_from_csv_text(text)
    assert {r.group for r in report.rows} == {"g0", "g1", "g2"}  # 3 folds
    models = {r.model for r in report.rows}
    assert {"base_initial", "meta", "mean", "median", "knn", "ridge"} == models
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 7
    assert "config_hash" in summary and "version" in summary


def test_cv_holdout_exclude_removes_fold(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    out = tmp_path / "cv_ex"
    code = main([
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--holdout-exclude", "g1", "--out", str(out),
    ])
    assert code == 0
    report = report_from_csv_text((out / "report.csv").read_text())
    assert {r.group for r in report.rows} == {"g0", "g2"}


def test_cv_same_seed_byte_identical_reports(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    args = [
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"), "--config", str(run),
    ]
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    for name in ("report.csv", "summary.json", "plot_data.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_cv_flag_overrides_config_seed(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    out = tmp_path / "cv_seed"
    main([
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--seed", "123", "--out", str(out),
    ])
    assert json.loads((out / "summary.json").read_text())["seed"] == 123


def test_cv_unknown_config_key_exit_2(tmp_path, study_dir, capsys):
    run = tmp_path / "run.json"
    run.write_text(json.dumps({**FAST_RUN, "mystery": 1}))
    code = main([
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--out", str(tmp_path / "x"),
    ])
    assert code == 2
    assert "mystery" in capsys.readouterr().err


def test_cv_missing_data_file_exit_3(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    code = main([
        "cv", "--data", str(tmp_path / "nope.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--out", str(tmp_path / "x"),
    ])
    assert code == 3


def test_cv_numeric_blowup_exit_4(tmp_path, study_dir, capsys):
    # an absurd learning rate overflows the forward pass mid-run
    run = tmp_path / "run.json"
    blowup = dict(FAST_RUN)
    blowup["base"] = {**FAST_RUN["base"], "learning_rate": 1e12, "inner_iterations": 5}
    run.write_text(json.dumps(blowup))
    import numpy as np

    with np.errstate(all="ignore"):
        code = main([
            "cv", "--data", str(study_dir / "data.csv"),
            "--manifest", str(study_dir / "manifest.json"),
            "--config", str(run), "--out", str(tmp_path / "x"),
        ])
    assert code == 4
    assert "numeric failure" in capsys.readouterr().err


def test_grid_search_budget_one(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    space = tmp_path / "space.json"
    space.write_text(json.dumps(TINY_SPACE))
    out = tmp_path / "gs"
    code = main([
        "grid-search", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--space", str(space),
        "--budget", "1", "--seed", "2", "--out", str(out),
    ])
    assert code == 0
    lines = [l for l in (out / "leaderboard.csv").read_text().splitlines() if l and not l.startswith("#")]
    assert len(lines) == 2  # header + one candidate
    best = json.loads((out / "best_config.json").read_text())
    assert best["best"]["base"]["n_layers"] == 1


def test_grid_search_fixed_seed_identical_leaderboard(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    space = tmp_path / "space.json"
    space.write_text(json.dumps(TINY_SPACE))
    args = [
        "grid-search", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--space", str(space), "--budget", "3", "--seed", "5",
    ]
    out1, out2 = tmp_path / "g1", tmp_path / "g2"
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert (out1 / "leaderboard.csv").read_bytes() == (out2 / "leaderboard.csv").read_bytes()
    assert (out1 / "best_config.json").read_bytes() == (out2 / "best_config.json").read_bytes()


def test_grid_search_budget_zero_usage_error(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    code = main([
        "grid-search", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--budget", "0", "--out", str(tmp_path / "x"),
    ])
    assert code == 2


def test_report_command_recomputes_gap_files(tmp_path, study_dir):
    run = write_run_config(tmp_path)
    cv_out = tmp_path / "cv_for_report"
    main([
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--out", str(cv_out),
    ])
    rep_out = tmp_path / "rep"
    code = main(["report", "--report", str(cv_out / "report.csv"), "--out", str(rep_out)])
    assert code == 0
    assert (rep_out / "plot_data.csv").read_bytes() == (cv_out / "plot_data.csv").read_bytes()
    gaps = json.loads((rep_out / "gap_stats.json").read_text())
    assert "meta" in gaps["overfit_gap"]


def test_out_dir_env_override(tmp_path, study_dir, monkeypatch):
    run = write_run_config(tmp_path)
    env_out = tmp_path / "env_out"
    monkeypatch.setenv("METATREAT_OUT_DIR", str(env_out))
    code = main([
        "cv", "--data", str(study_dir / "data.csv"),
        "--manifest", str(study_dir / "manifest.json"),
        "--config", str(run), "--out", str(tmp_path / "ignored"),
    ])
    assert code == 0
    assert (env_out / "report.csv").exists()
    assert not (tmp_path / "ignored").exists()
