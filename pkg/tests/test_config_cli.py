from pathlib import Path

import numpy as np
import pytest

from mrdiffusion.cli import main
from mrdiffusion.config import RunConfig, load_config, parse_override
from mrdiffusion.errors import ConfigError
from mrdiffusion.formats import load_manifest, read_slice

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def tiny(tmp_path, **extra):
    """Override list for a tiny run rooted in tmp_path."""
    ov = {
        "data.n_train": 4,
        "data.n_valid": 3,
        "data.height": 16,
        "data.width": 16,
        "denoiser.base_channels": 4,
        "denoiser.channel_multipliers": "[1,2]",
        "denoiser.n_rrdb": 1,
        "train.T": 4,
        "train.epochs": 1,
        "train.batch_size": 2,
        "sample.T": 4,
        "sample.R": 1,
        "ablate.T_grid": "[2,4]",
        "ablate.R_grid": "[1,2]",
        "ablate.fixed_R": 1,
        "paths.data_dir": tmp_path / "data",
        "paths.run_dir": tmp_path / "train",
        "paths.recon_dir": tmp_path / "recon",
        "paths.eval_dir": tmp_path / "eval",
        "paths.ablate_dir": tmp_path / "ablate",
    }
    ov.update(extra)
    return [f"--{k}={v}" for k, v in ov.items()]


def test_desk_profile_loads():
    cfg = load_config(DESK)
    assert cfg.image_shape == (64, 64)
    assert cfg.denoiser_config().T_max == 50
    assert cfg.train_config().learning_rate == 1e-3


def test_overrides_and_rejections(tmp_path):
    assert parse_override("--train.epochs=3") == ("train", "epochs", 3)
    assert parse_override("data.pad_to=[32, 32]") == ("data", "pad_to", [32, 32])
    cfg = load_config(DESK, ["--train.epochs=3", "--data.coil_mode=multi4"])
    assert cfg.train.epochs == 3 and cfg.data.coil_mode == "multi4"
    for bad in (["--train.nope=1"], ["--bogus.x=1"], ["--train.epochs"], ["--train.batch_size=0"]):
        with pytest.raises(ConfigError):
            load_config(DESK, bad)
    (tmp_path / "bad.yaml").write_text("train: [1, 2]\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["phantom", "-c", str(DESK), "--data.wat=1"]) == 2
    assert "wat" in capsys.readouterr().err


def test_phantom_empty_and_refusal(tmp_path):
    args = ["phantom", "-c", str(DESK)] + tiny(tmp_path, **{"data.n_train": 0, "data.n_valid": 0})
    assert main(args) == 0
    assert len(load_manifest(tmp_path / "data" / "train")) == 0
    assert main(args) == 3
    assert main(args + ["--force"]) == 0


def test_config_echo_reloads_identically(tmp_path):
    args = ["phantom", "-c", str(DESK)] + tiny(tmp_path)
    assert main(args) == 0
    echo = tmp_path / "data" / "config.yaml"
    assert load_config(echo) == load_config(DESK, tiny(tmp_path))
    assert isinstance(load_config(echo), RunConfig)


def test_missing_inputs_are_data_errors(tmp_path):
    base = ["-c", str(DESK)] + tiny(tmp_path)
    assert main(["train"] + base) == 3
    assert main(["phantom"] + base) == 0
    assert main(["infer"] + base) == 3
    assert main(["eval"] + base) == 3


def test_pipeline(tmp_path, capsys):
    base = ["-c", str(DESK)] + tiny(tmp_path)
    assert main(["phantom"] + base) == 0
    assert len(load_manifest(tmp_path / "data" / "train")) == 4
    valid = load_manifest(tmp_path / "data" / "valid")
    assert len(valid) == 3

    assert main(["train"] + base) == 0
    log1 = (tmp_path / "train" / "loss_log.csv").read_text()
    assert main(["train", "--force"] + base) == 0
    assert (tmp_path / "train" / "loss_log.csv").read_text() == log1
    assert len(log1.splitlines()) == 1 + 2

    assert main(["infer"] + base) == 0
    files = sorted((tmp_path / "recon").glob("*.cmrs"))
    assert [f.stem for f in files] == valid.ids
    first = [f.read_bytes() for f in files]
    assert main(["infer", "--force"] + base) == 0
    assert [f.read_bytes() for f in files] == first
    img = read_slice(files[0])
    assert img.shape == (16, 16) and 0 <= img.min() and img.max() <= 1

    capsys.readouterr()
    assert main(["eval"] + base) == 0
    out = capsys.readouterr().out
    assert "PSNR" in out.upper()
    for name in ("metrics.csv", "summary.txt", "config.yaml"):
        assert (tmp_path / "eval" / name).is_file()

    assert main(["ablate"] + base) == 0
    t_rows = (tmp_path / "ablate" / "ablation_T.csv").read_text().splitlines()
    r_rows = (tmp_path / "ablate" / "ablation_R.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in t_rows] == ["T", "Raw", "2", "4"]
    assert [r.split(",")[0] for r in r_rows] == ["R", "Raw", "1", "2"]
    # single-point grid agrees with infer + eval
    eval_psnr = (tmp_path / "eval" / "metrics.csv").read_text()
    recon = np.stack([read_slice(f) for f in files])
    assert recon.shape == (3, 16, 16)
    assert float(r_rows[2].split(",")[1]) == pytest.approx(_mean_psnr(eval_psnr), rel=1e-9)
    assert main(["ablate"] + base) == 3
    assert main(["ablate", "--force"] + base + ["--ablate.R_grid=[]"]) == 2


def _mean_psnr(csv_text):
    lines = csv_text.splitlines()
    col = lines[0].split(",").index("psnr")
    vals = [float(l.split(",")[col]) for l in lines[1:]]
    return float(np.mean(vals))


def test_trajectory_dump(tmp_path):
    base = ["-c", str(DESK)] + tiny(tmp_path, **{"train.epochs": 0, "sample.record_trajectory": "true"})
    for cmd in ("phantom", "train", "infer"):
        assert main([cmd] + base) == 0
    pid = load_manifest(tmp_path / "data" / "valid").ids[0]
    steps = sorted(p.name for p in (tmp_path / "recon" / "trajectory" / pid).iterdir())
    assert steps == [f"x_{s:05d}.cmrs" for s in range(4)]
