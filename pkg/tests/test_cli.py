"""Command-line interface: verbs, flags, exit codes, output artifacts."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from vardepth.cli import main
from vardepth.pfmio import load_pfm

from conftest import tiny_run_config


def write_config(root, **overrides) -> str:
    root.mkdir(parents=True, exist_ok=True)
    cfg = tiny_run_config(root, **overrides)
    path = root / "run.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    return str(path)


@pytest.fixture
def run_json(trained_run):
    root, _ = trained_run
    return str(root / "run.json")


# -- datagen and global flags ---------------------------------------------------


def test_datagen_reports_counts_and_writes_files(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["datagen", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "wrote 12 samples" in out
    assert "train 8" in out
    assert (tmp_path / "data" / "test" / "rgb" / "0001.png").is_file()


def test_seed_flag_overrides_data_seed(tmp_path, capsys):
    a = write_config(tmp_path / "a")
    b = write_config(tmp_path / "b")
    assert main(["datagen", "--config", a]) == 0
    assert main(["datagen", "--config", b, "--seed", "1"]) == 0
    da = (tmp_path / "a" / "data" / "train" / "depth" / "0000.pfm").read_bytes()
    db = (tmp_path / "b" / "data" / "train" / "depth" / "0000.pfm").read_bytes()
    assert da != db


def test_threads_flag_and_env_fallback(tmp_path, capsys, monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        monkeypatch.setenv(var, "1")
    monkeypatch.setenv("VARD_THREADS", "3")
    # command fails on the missing dataset, but thread pinning runs first
    assert main(["eval", str(tmp_path / "missing")]) == 5
    assert os.environ["OMP_NUM_THREADS"] == "3"
    assert main(["eval", str(tmp_path / "missing"), "--threads", "2"]) == 5
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"


# -- exit codes ----------------------------------------------------------------------


def test_exit_2_on_config_errors(tmp_path, capsys):
    assert main(["datagen", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["datagen", "--config", str(bad)]) == 2
    assert main(["datagen", "--threads", "many", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_exit_3_on_missing_dependency(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["datagen", "--config", cfg_path]) == 0
    assert main(["train", "prior", "--config", cfg_path]) == 3
    assert "missing dependency checkpoint" in capsys.readouterr().err


def test_exit_4_on_missing_infer_input(run_json, tmp_path, capsys):
    assert main(["infer", str(tmp_path / "ghost.png"), "--config", run_json]) == 4
    assert "not found" in capsys.readouterr().err


def test_exit_5_on_empty_dataset(tmp_path, capsys):
    (tmp_path / "rgb").mkdir()
    assert main(["eval", str(tmp_path)]) == 5
    assert "no samples" in capsys.readouterr().err


def test_argparse_rejects_unknown_command(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["polish"])
    assert exc.value.code == 2


def test_guidance_flag_conflicts(run_json, trained_run, capsys):
    root, _ = trained_run
    png = str(Path(root) / "data" / "val" / "rgb" / "0000.png")
    args = ["infer", png, "--config", run_json]
    assert main(args + ["--preset", "none", "--weights=1,1,1,1,1,1,1,1,1,1"]) == 2
    assert main(args + ["--weights=1,2"]) == 2          # wrong length
    assert main(args + ["--weights=fast"]) == 2         # not numbers
    assert main(["eval", str(Path(root) / "data" / "val"), "--config", run_json,
                 "--oracle", "--sweep-guidance"]) == 2


# -- train -------------------------------------------------------------------------


def test_train_resume_on_finished_run_is_quiet_noop(run_json, trained_run, capsys):
    root, cfg = trained_run
    before = {k: Path(cfg.paths.checkpoints, f"{k}.vard").read_bytes()
              for k in ("tokenizer-depth", "tokenizer-rgb", "prior", "upsampler")}
    assert main(["train", "all", "--config", run_json, "--resume"]) == 0
    out = capsys.readouterr().out
    assert out.count("checkpoint:") == 4
    for kind, blob in before.items():
        assert Path(cfg.paths.checkpoints, f"{kind}.vard").read_bytes() == blob


# -- infer ----------------------------------------------------------------------------


def test_infer_writes_depth_artifacts(run_json, trained_run, tmp_path, capsys):
    root, _ = trained_run
    png = Path(root) / "data" / "val" / "rgb" / "0000.png"
    out = tmp_path / "pred"
    assert main(["infer", str(png), "--config", run_json, "--out", str(out)]) == 0
    depth = load_pfm(str(out / "0000.pfm"))
    assert depth.shape == (48, 64)
    assert np.isfinite(depth).all()
    assert (out / "0000_depth16.png").is_file()
    assert (out / "0000_viz.png").is_file()
    stem, lo, hi = (out / "scales.txt").read_text().split()
    assert stem == "0000" and float(lo) <= float(hi)
    assert "1 image(s) done" in capsys.readouterr().out


def test_infer_directory_and_determinism(run_json, trained_run, tmp_path):
    root, _ = trained_run
    rgb_dir = Path(root) / "data" / "val" / "rgb"
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    assert main(["infer", str(rgb_dir), "--config", run_json, "--out", str(out1)]) == 0
    assert main(["infer", str(rgb_dir), "--config", run_json, "--out", str(out2)]) == 0
    lines = (out1 / "scales.txt").read_text().strip().split("\n")
    assert len(lines) == 2  # one per val image
    a = (out1 / "0001.pfm").read_bytes()
    b = (out2 / "0001.pfm").read_bytes()
    assert a == b


def test_infer_ensemble_runs(run_json, trained_run, tmp_path):
    root, _ = trained_run
    png = Path(root) / "data" / "val" / "rgb" / "0000.png"
    out = tmp_path / "ens"
    assert main(["infer", str(png), "--config", run_json, "--out", str(out),
                 "--ensemble", "2"]) == 0
    assert load_pfm(str(out / "0000.pfm")).shape == (48, 64)


# -- eval -----------------------------------------------------------------------------


def test_eval_oracle_scores_perfectly(run_json, trained_run, tmp_path, capsys):
    root, _ = trained_run
    val = str(Path(root) / "data" / "val")
    records = tmp_path / "recs" / "r.txt"
    assert main(["eval", val, "--config", run_json, "--oracle",
                 "--records", str(records)]) == 0
    out = capsys.readouterr().out
    assert "AbsRel" in out and "delta1" in out
    body = records.read_text()
    assert body.startswith("# ") or body.split("\n")[0]
    assert "0000" in body and "0001" in body


def test_eval_model_writes_default_records(run_json, trained_run, capsys):
    root, cfg = trained_run
    val = str(Path(root) / "data" / "val")
    assert main(["eval", val, "--config", run_json]) == 0
    out = capsys.readouterr().out
    assert "evaluation of" in out
    default_records = Path(cfg.paths.outputs) / "eval_records.txt"
    assert default_records.is_file()


def test_eval_sweep_prints_all_presets(run_json, trained_run, capsys):
    root, cfg = trained_run
    val = str(Path(root) / "data" / "val")
    assert main(["eval", val, "--config", run_json, "--sweep-guidance"]) == 0
    out = capsys.readouterr().out
    for preset in ("none", "constant", "optimized"):
        assert preset in out
        assert (Path(cfg.paths.outputs) / f"eval_records_{preset}.txt").is_file()
    assert "AbsRel" in out


# -- bench ---------------------------------------------------------------------------


def test_bench_prints_per_scale_table(run_json, capsys):
    assert main(["bench", "--config", run_json, "--repeats", "1"]) == 0
    out = capsys.readouterr().out
    for k in range(1, 11):
        assert f"scale {k}" in out
    assert "decode" in out and "total" in out
    assert "warm-up run excluded" in out
    assert "accounting" in out


def test_bench_rejects_bad_repeats(run_json):
    assert main(["bench", "--config", run_json, "--repeats", "0"]) == 2
