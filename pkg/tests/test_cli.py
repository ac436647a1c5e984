import json

import pytest

from ergowass import cli
from ergowass.experiments import ExperimentConfig

CONFIG = """
[space]
kind = "torus"
d = 1

[experiments]
T = [8.0, 16.0, 32.0]
replicas = 4
bootstrap = 50
limit_draws = 2000
thetas = [0.01, 0.05, 0.2]
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "d1.toml"
    path.write_text(CONFIG)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_rates_are_byte_identical_across_runs_and_threads(config, tmp_path):
    assert run("rates", "--config", config, "--seed", 7, "--out", tmp_path / "a", "--threads", 1) == 0
    assert run("rates", "--config", config, "--seed", 7, "--out", tmp_path / "b", "--threads", 3) == 0
    assert (tmp_path / "a/rates.csv").read_bytes() == (tmp_path / "b/rates.csv").read_bytes()
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["files"] == ["rates.csv"]
    for key in ("config_hash", "code_hash", "versions", "start", "end", "wall_seconds"):
        assert key in manifest


def test_csv_header(config, tmp_path):
    run("mixture", "--config", config, "--out", tmp_path)
    assert (tmp_path / "mixture.csv").read_text().splitlines()[0] == "T,replicate,statistic,value"


@pytest.mark.parametrize("command", ["simulate", "limit", "bernstein", "psi-moments", "mixture", "spectrum"])
def test_every_command_writes_nonempty_outputs(command, config, tmp_path):
    assert run(command, "--config", config, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"]
    for name in manifest["files"]:
        assert (tmp_path / name).stat().st_size > 0


def test_ot_selftest(tmp_path, capsys):
    assert run("ot-selftest", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_missing_config_names_the_flag(tmp_path, capsys):
    assert run("rates", "--config", tmp_path / "missing.toml") == 2
    assert "--config" in capsys.readouterr().err
    assert run("rates") == 2
    assert "--config" in capsys.readouterr().err


def test_bad_config_value(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[experiments]\nT = [4.0, 2.0]\n")
    assert run("rates", "--config", path) == 2
    path.write_text("[experiments]\nbogus = 1\n")
    assert run("rates", "--config", path) == 2


def test_unknown_subcommand(capsys):
    assert run("frobnicate") == 64
    assert "usage" in capsys.readouterr().err
    assert run() == 64


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    from ergowass.errors import NumericalError

    def boom(*a, **k):
        raise NumericalError("did not converge", {"iterations": 3})

    monkeypatch.setitem(cli.HANDLERS, "spectrum", boom)
    assert run("spectrum", "--out", tmp_path) == 3


def test_print_config_roundtrips(capsys):
    assert run("rates", "--print-config", "--seed", 3, "--T", "4,8,16") == 0
    text = capsys.readouterr().out
    cli_cfg = ExperimentConfig.from_mapping(cli.tomllib.loads(text))
    assert cli_cfg == ExperimentConfig(seed=3, T=(4.0, 8.0, 16.0))


def test_sections_cover_every_field():
    from dataclasses import fields

    keys = [k for ks in cli.SECTIONS.values() for k in ks]
    assert sorted(keys) == sorted(f.name for f in fields(ExperimentConfig))


def test_config_hash_tracks_effective_parameters():
    a = ExperimentConfig()
    assert cli.config_hash("rates", a) == cli.config_hash("rates", ExperimentConfig())
    assert cli.config_hash("rates", a) != cli.config_hash("rates", a.replace(seed=1))
    assert cli.config_hash("rates", a) != cli.config_hash("limit", a)
