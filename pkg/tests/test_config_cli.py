"""Config round-tripping and the command line surface, end to end."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from diffusionlab.config import (
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    file_sha256,
    load_config,
    resolve_output_dir,
    save_config,
)
from diffusionlab.envvars import ENV_OUTPUT_DIR
from diffusionlab.errors import ConfigError

TINY_CONFIG = {
    "seed": 7,
    "output_dir": "PLACEHOLDER",
    "dataset": {"kind": "two_moons", "n": 512, "seed": 1, "holdout": 128},
    "schedule": {"kind": "linear", "T": 50},
    "model": {"kind": "mlp", "hidden": [16], "time_dim": 16},
    "train": {"mode": "ip", "total_iters": 40, "batch_size": 32, "lr": 1e-3,
              "gamma": 0.1, "log_every": 1, "checkpoint_every": 20},
    "sampler": {"kind": "ancestral", "n_samples": 128},
    "eval": {"t_grid": [10, 30, 50], "n_draws": 200, "stride": 10, "n_samples": 64},
}


def _write_config(tmp_path, out_dir, **overrides):
    data = json.loads(json.dumps(TINY_CONFIG))
    data["output_dir"] = str(out_dir)
    for key, val in overrides.items():
        section, _, name = key.partition(".")
        if name:
            data[section][name] = val
        else:
            data[section] = val
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def _run(args, **kw):
    env = dict(os.environ)
    env.setdefault("MPLBACKEND", "Agg")
    return subprocess.run([sys.executable, "-m", "diffusionlab.cli", *args],
                          capture_output=True, text=True, env=env, **kw)


# -- config ------------------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = config_from_dict(json.loads(json.dumps(TINY_CONFIG)))
    assert cfg.seed == 7
    assert cfg.train.mode == "ip"
    assert cfg.dataset.holdout == 128
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert config_to_dict(again) == config_to_dict(cfg)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="sampler"):
        config_from_dict({"sampler": {"foo": 1}})
    with pytest.raises(ConfigError, match="top level"):
        config_from_dict({"sampelr": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"mode": "warp"}})


def test_config_defaults_build():
    cfg = ExperimentConfig()
    ds = cfg.dataset.build()
    assert ds.n == cfg.dataset.n
    sch = cfg.schedule.build()
    assert sch.T == 1000
    model = cfg.model.build(2, seed=0)
    assert model.data_dim == 2


def test_config_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [unclosed")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_resolve_output_dir_precedence(monkeypatch):
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)
    assert resolve_output_dir("from_cfg") == "from_cfg"
    monkeypatch.setenv(ENV_OUTPUT_DIR, "from_env")
    assert resolve_output_dir("from_cfg") == "from_env"
    assert resolve_output_dir("from_cfg", "from_cli") == "from_cli"


def test_file_sha256(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"hello")
    assert file_sha256(p) == (
        "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
    )


# -- cli end to end ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "run"
    cfg_path = _write_config(tmp, out)
    res = _run(["train", "--config", str(cfg_path)])
    assert res.returncode == 0, res.stderr
    return {"tmp": tmp, "out": out, "cfg": cfg_path}


def test_cli_train_outputs(trained_run):
    out = trained_run["out"]
    assert (out / "manifest.json").exists()
    assert (out / "config_resolved.yaml").exists()
    assert (out / "train_log.csv").exists()
    assert (out / "checkpoints" / "ckpt_final" / "model.bin").exists()
    assert (out / "loss_curve.png").exists()
    with open(out / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["command"] == "train"
    assert manifest["master_seed"] == 7
    assert "config_sha256" in manifest and "package_version" in manifest
    assert manifest["extras"]["param_hash"]
    assert any(p.endswith("train_log.csv") for p in manifest["outputs"])


def test_cli_sample_and_metrics(trained_run):
    out = trained_run["out"]
    ckpt = out / "checkpoints" / "ckpt_final"
    sdir = trained_run["tmp"] / "samples"
    res = _run(["sample", "--checkpoint", str(ckpt), "--n", "64", "--steps", "10",
                "--kind", "ddim", "--eta", "0.0", "--seed", "3",
                "--output", str(sdir), "--no-figures"])
    assert res.returncode == 0, res.stderr
    assert (sdir / "samples.bin").exists()
    assert (sdir / "samples.csv").exists()
    assert not list(sdir.glob("*.png"))
    with open(sdir / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["extras"]["steps_executed"] == 10

    # metrics against itself: distances zero, precision/recall one
    mdir = trained_run["tmp"] / "metrics"
    res = _run(["metrics", "--real", str(sdir / "samples.csv"),
                "--generated", str(sdir / "samples.csv"),
                "--output", str(mdir), "--no-figures"])
    assert res.returncode == 0, res.stderr
    rows = (mdir / "metrics.csv").read_text().strip().splitlines()
    table = dict(line.split(",")[:2] for line in rows[1:])
    assert float(table["energy"]) == 0.0
    assert float(table["frechet_gaussian"]) == pytest.approx(0.0, abs=1e-8)
    assert float(table["precision_k3"]) == 1.0
    assert float(table["recall_k3"]) == 1.0


def test_cli_sample_determinism(trained_run):
    out = trained_run["out"]
    ckpt = out / "checkpoints" / "ckpt_final"
    d1 = trained_run["tmp"] / "det1"
    d2 = trained_run["tmp"] / "det2"
    for d in (d1, d2):
        res = _run(["sample", "--checkpoint", str(ckpt), "--n", "32", "--seed", "9",
                    "--output", str(d), "--no-figures"])
        assert res.returncode == 0, res.stderr
    assert (d1 / "samples.bin").read_bytes() == (d2 / "samples.bin").read_bytes()


def test_cli_bias_and_errstats(trained_run):
    out = trained_run["out"]
    ckpt = out / "checkpoints" / "ckpt_final"
    bdir = trained_run["tmp"] / "bias"
    res = _run(["bias", "--checkpoint", str(ckpt), "--mode", "deterministic",
                "--t-grid", "10,25,50", "--n", "300", "--seed", "2",
                "--output", str(bdir), "--no-figures"])
    assert res.returncode == 0, res.stderr
    rows = (bdir / "bias.csv").read_text().strip().splitlines()
    assert rows[0] == "t,n,value"
    assert len(rows) == 4
    assert "spearman" in res.stdout

    edir = trained_run["tmp"] / "err"
    res = _run(["errstats", "--checkpoint", str(ckpt), "--stride", "10", "--n", "64",
                "--mode", "teacher", "--seed", "2", "--output", str(edir), "--no-figures"])
    assert res.returncode == 0, res.stderr
    assert (edir / "errstats.csv").exists()
    assert "suggested perturbation grid" in res.stdout


def test_cli_grid_gamma(trained_run):
    gdir = trained_run["tmp"] / "grid"
    res = _run(["grid-gamma", "--config", str(trained_run["cfg"]),
                "--range", "0:0.1:0.1", "--output", str(gdir), "--no-figures"])
    assert res.returncode == 0, res.stderr
    rows = (gdir / "gamma_grid.csv").read_text().strip().splitlines()
    assert rows[0] == "gamma,energy"
    assert len(rows) == 3  # gamma 0 and gamma 0.1
    gammas = [float(r.split(",")[0]) for r in rows[1:]]
    assert gammas == [0.0, 0.1]


def test_cli_error_exit_codes(tmp_path):
    res = _run(["train", "--config", str(tmp_path / "nope.yaml")])
    assert res.returncode == 2
    assert "config file not found" in res.stderr

    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"modee": "standard"}}))
    res = _run(["train", "--config", str(bad)])
    assert res.returncode == 2
    assert "unknown config key" in res.stderr


def test_cli_env_output_dir(tmp_path):
    cfg_path = _write_config(tmp_path, tmp_path / "ignored")
    env_out = tmp_path / "env_out"
    env = dict(os.environ)
    env["MPLBACKEND"] = "Agg"
    env[ENV_OUTPUT_DIR] = str(env_out)
    res = subprocess.run(
        [sys.executable, "-m", "diffusionlab.cli", "train", "--config", str(cfg_path),
         "--no-figures"],
        capture_output=True, text=True, env=env,
    )
    assert res.returncode == 0, res.stderr
    assert (env_out / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_cli_version_and_help():
    res = _run(["--version"])
    assert res.returncode == 0
    res = _run(["--help"])
    assert res.returncode == 0
    for cmd in ("train", "sample", "bias", "errstats", "metrics", "grid-gamma"):
        assert cmd in res.stdout
