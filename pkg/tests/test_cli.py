import json

import pytest

from dmatlab.cli import main
from dmatlab.harness import save_experiment_config, smoke_experiment_config
from dmatlab.manifold import DatasetConfig, load_dataset


@pytest.fixture()
def data_file(tmp_path):
    cfg_path = tmp_path / "data_cfg.json"
    cfg_path.write_text(json.dumps(DatasetConfig(n_train=40, n_test=20, seed=0).to_dict()))
    out = tmp_path / "data.bin"
    assert main(["dataset", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_dataset_subcommand(data_file):
    train_set, test_set, cfg = load_dataset(data_file)
    assert len(train_set) == 40 and len(test_set) == 20
    assert cfg.seed == 0


def test_project_subcommand(tmp_path, data_file):
    out = tmp_path / "proj.csv"
    assert main(["project", "--data", str(data_file), "--steps", "60",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("sample,recon_loss,w0")
    assert len(lines) == 1 + 20


def test_run_and_eval_subcommands(tmp_path, data_file):
    run_dir = tmp_path / "run"
    cfg = smoke_experiment_config(out_dir=str(run_dir))
    cfg.dataset = DatasetConfig(n_train=40, n_test=20, seed=0)
    cfg.train_configs = cfg.train_configs[:2]  # normal + at only, for speed
    for tc in cfg.train_configs:
        tc.batch_size = 20
    cfg.curve_regimes = ()
    cfg_path = tmp_path / "exp.json"
    save_experiment_config(cfg_path, cfg)
    assert main(["run", "--config", str(cfg_path)]) == 0
    ckpt = run_dir / "checkpoints" / "at" / "final.ckpt"
    assert ckpt.exists()

    eval_dir = tmp_path / "eval_out"
    assert main([
        "eval", "--checkpoint", str(ckpt), "--suite", str(run_dir / "suite.json"),
        "--data", str(data_file), "--out", str(eval_dir), "--regime", "at",
    ]) == 0
    assert (eval_dir / "report.json").exists()


def test_out_root_env_override(tmp_path, data_file, monkeypatch):
    monkeypatch.setenv("DMATLAB_OUT_ROOT", str(tmp_path / "root"))
    out_rel = "nested/proj.csv"
    assert main(["project", "--data", str(data_file), "--steps", "30",
                 "--out", out_rel]) == 0
    assert (tmp_path / "root" / "nested" / "proj.csv").exists()


def test_cli_reports_errors_as_exit_code(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    err = capsys.readouterr().err
    assert "error" in err
