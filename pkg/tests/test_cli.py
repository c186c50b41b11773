import json

import pytest

from uvae import cli

SMALL = {
    "model": {"y_hidden": [3], "z_hidden": [3], "x_hidden": [3]},
    "train": {"batch_size": 10, "epochs": 2, "log_every": 1},
    "data": {"mixture": {"channels": 8, "replicates": 3}, "counts": [30, 40, 20]},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def synth_and_train(tmp_path, config, tag, *extra):
    data, run = tmp_path / f"data_{tag}", tmp_path / f"run_{tag}"
    assert cli.run_cli(["synth", "--config", str(config), "--out", str(data), *extra]) == 0
    assert cli.run_cli(["train", "--config", str(config), "--data", str(data), "--out", str(run), *extra]) == 0
    return data, run


def test_synth_train_pipeline_outputs(tmp_path, small_config):
    data, run = synth_and_train(tmp_path, small_config, "a")
    for name in ("labeled.csv", "unlabeled.csv", "unfeatured.csv", "meta.json", "evaluation.csv", "manifest.json"):
        assert (data / name).is_file(), name
    for name in ("checkpoint.bin", "checkpoint.model.json", "metrics.csv", "manifest.json"):
        assert (run / name).is_file(), name
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert "checkpoint.bin" in manifest["outputs"]
    assert manifest["config"]["train"]["epochs"] == 2


def test_eval_unmix_baseline_run(tmp_path, small_config):
    data, run = synth_and_train(tmp_path, small_config, "e")
    assert cli.run_cli(["eval", "--config", str(small_config), "--data", str(data), "--run", str(run)]) == 0
    report = json.loads((run / "eval" / "eval.json").read_text())
    assert {"train_kl", "eval_kl", "nuisance_separation"} <= set(report["metrics"])
    assert cli.run_cli(["unmix", "--config", str(small_config), "--data", str(data), "--run", str(run)]) == 0
    assert (run / "unmix" / "unmix.json").is_file()
    out = tmp_path / "pls"
    assert cli.run_cli(["baseline", "--config", str(small_config), "--data", str(data), "--out", str(out)]) == 0
    assert "eval_kl" in json.loads((out / "baseline.json").read_text())["metrics"]


def test_identical_runs_are_byte_identical(tmp_path, small_config):
    _, a = synth_and_train(tmp_path, small_config, "x")
    _, b = synth_and_train(tmp_path, small_config, "y")
    for name in ("metrics.csv", "checkpoint.bin"):
        assert cli.sha256_file(a / name) == cli.sha256_file(b / name), name


def test_unknown_subcommand_exits_2(capsys):
    assert cli.run_cli(["frobnicate"]) == 2
    assert cli.run_cli([]) == 2


def test_invalid_field_exits_2_and_names_it(tmp_path, small_config, capsys):
    code = cli.run_cli(["synth", "--config", str(small_config), "--out", str(tmp_path / "o"), "--train.momentum", "0.9"])
    assert code == 2
    assert "train.momentum" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"kind": "tabular"}}))
    assert cli.run_cli(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "data.kind" in capsys.readouterr().err
    bad.write_text("{not json")
    assert cli.run_cli(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("command", [None, *cli.COMMANDS])
def test_help_documents_every_field(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    assert cli.run_cli(argv) == 0
    text = capsys.readouterr().out
    for section in cli.SECTIONS:
        for f in cli._section_fields(section):
            assert f"{section}.{f.name} =" in text


def test_parse_and_apply_overrides():
    ov = cli.parse_overrides(["--train.epochs", "7", "--data.mixture.channels=5", "--eval.z_policy", "prior-mean"])
    assert ov == [("train.epochs", 7), ("data.mixture.channels", 5), ("eval.z_policy", "prior-mean")]
    raw = cli.apply_overrides(SMALL, ov)
    cfg = cli.build_config(raw)
    assert cfg.train.epochs == 7 and cfg.data.spec.channels == 5 and cfg.eval.z_policy == "prior-mean"
    assert SMALL["train"]["epochs"] == 2
    with pytest.raises(cli.UsageError):
        cli.parse_overrides(["--train.epochs"])
    with pytest.raises(cli.UsageError):
        cli.parse_overrides(["stray"])
    with pytest.raises(cli.ConfigError):
        cli.apply_overrides({}, [("optim.lr", 1)])


def test_seed_precedence():
    assert cli.resolve_seed(5, {"UVAE_SEED": "9"}, 1) == 5
    assert cli.resolve_seed(None, {"UVAE_SEED": "9"}, 1) == 9
    assert cli.resolve_seed(None, {"UVAE_SEED": ""}, 1) == 1
    assert cli.resolve_seed(None, {}, 1) == 1
    with pytest.raises(cli.ConfigError):
        cli.resolve_seed(None, {"UVAE_SEED": "x"}, 1)


def test_seed_flag_reaches_manifest(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("UVAE_SEED", "4")
    out = tmp_path / "d"
    assert cli.run_cli(["synth", "--config", str(small_config), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 4
    assert cli.run_cli(["synth", "--config", str(small_config), "--out", str(out), "--seed", "6"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 6


def test_presets_build():
    for name in cli.PRESETS:
        raw, source = cli.read_config(None, name)
        assert cli.build_config(raw, source).source == f"preset:{name}"
    assert cli.run_cli(["synth", "--preset", "crism", "--config", "x.json", "--out", "o"]) == 2
