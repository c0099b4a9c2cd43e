"""Tests for the command-line interface."""

import pytest
from conftest import make_small_config

from deepmeta.__main__ import build_parser, default_checkpoint, main
from deepmeta.formats import load_checkpoint, read_split


@pytest.fixture
def config_file(tmp_path):
    config = make_small_config()
    config.output.dir = tmp_path / "run"
    path = tmp_path / "small.yaml"
    config.save(path)
    return path


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for command in ("gen-data", "train", "eval", "sweep-lambda", "baseline", "gradcheck"):
        assert command in out


def test_parser_overrides():
    args = build_parser().parse_args(["train", "--mode", "vanilla", "--lambda", "0.5", "--seed", "4"])
    assert args.mode == "vanilla"
    assert args.lam == 0.5
    assert args.seed == 4


def test_train_help_documents_config_defaults(capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    assert "default: 1.0 for deml, 0 otherwise" in out
    assert "default: 2000" in out
    assert "default: None" not in out


def test_lambda_with_vanilla_is_config_error():
    """Test a contradictory mode and lambda exits with status 2."""
    assert main(["train", "--mode", "vanilla", "--lambda", "0.5"]) == 2


def test_missing_config_file(tmp_path):
    assert main(["train", "-c", str(tmp_path / "nope.toml")]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "second-order/metasgd" in out
    assert "FAIL" not in out


def test_gen_data(tmp_path, config_file):
    out = tmp_path / "data"
    assert main(["gen-data", "-c", str(config_file), "--out", str(out)]) == 0
    for name in ("meta.dmld", "concept.dmld", "split.txt"):
        assert (out / name).exists()
    assert read_split(out / "split.txt")["test"] == list(range(11, 16))


def test_train_eval_baseline(tmp_path, config_file):
    """Test the train -> eval -> baseline workflow and byte-identical results."""
    run = tmp_path / "run"
    assert main(["train", "-c", str(config_file)]) == 0
    for name in ("config.yaml", "model.dmlc", "model.dmlc.best", "training_log.csv"):
        assert (run / name).exists()
    assert set(load_checkpoint(run / "model.dmlc")) == {"generator", "discriminator", "learner", "alpha"}
    assert (run / "training_log.csv").read_text().startswith("iter,meta_loss,disc_loss,val_acc\n")

    assert main(["eval", "-c", str(config_file), "--tasks", "6"]) == 0
    first = (run / "results.csv").read_bytes()
    assert first.startswith(b"method,dataset,n_way,k_shot,mean_acc,ci95,num_tasks\ndeml+metasgd,synthetic,5,1,")
    assert main(["eval", "-c", str(config_file), "--tasks", "6", "--workers", "4"]) == 0
    assert (run / "results.csv").read_bytes() == first

    assert main(["baseline", "-c", str(config_file), "--tasks", "6", "--append"]) == 0
    lines = (run / "results.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[2].startswith("deml+knn,")


def test_eval_missing_checkpoint(tmp_path, config_file):
    assert main(["eval", "-c", str(config_file), "--checkpoint", str(tmp_path / "none.dmlc")]) == 1
    assert main(["eval", "-c", str(config_file), "--tasks", "0"]) == 2


def test_sweep(tmp_path, config_file):
    assert main(["sweep-lambda", "-c", str(config_file), "--lambdas", "0", "1", "--tasks", "3"]) == 0
    lines = (tmp_path / "run" / "lambda_sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,fewshot_acc,fewshot_ci,disc_acc"
    assert lines[1].startswith("0.000000,")
    assert lines[2].startswith("1.000000,")


def test_eval_prefers_best_checkpoint(tmp_path, config_file):
    """Test eval scores the best-validation checkpoint unless --final is given."""
    assert main(["train", "-c", str(config_file)]) == 0
    config = make_small_config()
    config.output.dir = tmp_path / "run"
    assert default_checkpoint(config) == tmp_path / "run" / "model.dmlc.best"
    assert default_checkpoint(config, final=True) == tmp_path / "run" / "model.dmlc"
    (tmp_path / "run" / "model.dmlc.best").unlink()
    assert default_checkpoint(config) == tmp_path / "run" / "model.dmlc"
    assert main(["eval", "-c", str(config_file), "--tasks", "3", "--final"]) == 0
