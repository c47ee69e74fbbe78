import csv
import json

import numpy as np
import pytest
import yaml

from ged.cli import build_parser, main
from ged.errors import ConfigError
from ged.pipeline import RunConfig, load_config

TINY_RUN = {
    "train_years": [2020, 2020],
    "test_years": [2021, 2021],
    "filter": "none",
    "widths": [8, 16],
    "blocks_per_level": 1,
    "n_members": 3,
    "n_steps": 3,
    "test_stride": 25,
    "batch_size": 2,
    "epochs": 1,
    "steps_per_epoch": 15,
    "learning_rate": 1e-3,
    "finetune_epochs": 1,
    "postprocess_pool": 6,
    "postprocess_steps_per_epoch": 5,
    "baseline_steps_per_epoch": 10,
    "log_every": 5,
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump(TINY_RUN))
    store, ckpt = root / "store", root / "ckpt"
    assert main(["synth", "--out", str(store), "--hours", "600", "--start", "2020-12-20T00",
                 "--grid", "24", "28", "--crop", "16", "16", "--seed", "5"]) == 0
    assert main(["train-diffusion", "--store", str(store), "--out", str(ckpt), "--config", str(cfg)]) == 0
    return root, store, ckpt


def test_train_diffusion_outputs(trained):
    _, _, ckpt = trained
    assert (ckpt / "denoiser.safetensors").exists()
    doc = json.loads((ckpt / "run.json").read_text())
    assert doc["config"]["widths"] == [8, 16]
    assert doc["stats"]["train_max"] > 0
    with open(ckpt / "history_diffusion.csv") as f:
        assert len(list(csv.reader(f))) == 16


def test_nowcast_bit_identical(trained, tmp_path):
    _, _, ckpt = trained
    outs = []
    for k in range(2):
        out = tmp_path / f"n{k}"
        assert main(["nowcast", "--checkpoint", str(ckpt), "--at", "2021-01-05T07", "--out", str(out)]) == 0
        outs.append(out)
    for name in ("forecast.npy", "members.npy", "observed.npy"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    fc = np.load(outs[0] / "forecast.npy")
    assert fc.shape == (16, 16, 3) and fc.min() >= 0
    assert np.load(outs[0] / "members.npy").shape == (3, 16, 16, 3)
    assert len(list(outs[0].glob("forecast_lead*.png"))) == 3


def test_nowcast_seed_changes_members(trained, tmp_path):
    _, _, ckpt = trained
    base = ["nowcast", "--checkpoint", str(ckpt), "--at", "2021-01-05T07", "--no-plots", "--agg", "single"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--seed", "9"]) == 0
    a, b = np.load(tmp_path / "a" / "forecast.npy"), np.load(tmp_path / "b" / "forecast.npy")
    assert not np.array_equal(a, b)


def test_nowcast_at_end_of_record(trained, tmp_path):
    _, _, ckpt = trained
    # the last stored hour has history but no targets
    assert main(["nowcast", "--checkpoint", str(ckpt), "--at", "2021-01-13T23",
                 "--out", str(tmp_path), "--no-plots"]) == 0
    assert (tmp_path / "forecast.npy").exists()
    assert not (tmp_path / "observed.npy").exists()


def test_nowcast_errors(trained, tmp_path, capsys):
    _, _, ckpt = trained
    assert main(["nowcast", "--checkpoint", str(ckpt), "--at", "2030-01-01T00", "--out", str(tmp_path)]) == 2
    assert "not in the store" in capsys.readouterr().err
    assert main(["nowcast", "--checkpoint", str(tmp_path), "--at", "2021-01-05T07", "--out", str(tmp_path)]) == 2


def test_full_chain(trained, tmp_path, capsys):
    _, _, ckpt = trained
    assert main(["finetune", "--checkpoint", str(ckpt)]) == 0
    maes = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(maes) == {"noise_mae_before", "noise_mae_after"}
    assert (ckpt / "denoiser_pre_finetune.safetensors").exists()
    assert main(["train-postprocess", "--checkpoint", str(ckpt)]) == 0
    assert main(["train-baseline", "--checkpoint", str(ckpt)]) == 0
    ev = tmp_path / "eval"
    models = "single,mean,postprocess,persistence,baseline"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--models", models, "--out", str(ev),
                 "--rain-threshold", "1e-4"]) == 0
    assert sorted(p.name for p in ev.glob("eval_*.npz")) == sorted(f"eval_{m}.npz" for m in models.split(","))
    rep = tmp_path / "report"
    assert main(["report", str(ev), "--out", str(rep)]) == 0
    summary = json.loads((rep / "summary.json").read_text())
    assert set(summary) == set(models.split(","))
    assert summary["persistence"]["threshold"] == 1e-4
    assert len(list(rep.glob("monthly_mse_lead*.png"))) == 3


def test_evaluate_rejects_unknown_model(trained, tmp_path):
    _, _, ckpt = trained
    assert main(["evaluate", "--checkpoint", str(ckpt), "--models", "oracle", "--out", str(tmp_path)]) == 2


def test_report_needs_inputs(tmp_path):
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_global_flags_anywhere():
    p = build_parser()
    a = p.parse_args(["--seed", "3", "nowcast", "--checkpoint", "c", "--at", "t", "--out", "o"])
    b = p.parse_args(["nowcast", "--checkpoint", "c", "--at", "t", "--out", "o", "--seed", "3"])
    assert a.seed == b.seed == 3
    with pytest.raises(SystemExit):
        p.parse_args(["--filter", "eu30", "report", "x", "--out", "y"])


def test_config_layering(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 4, "n_members": 5, "learning_rate": 3e-4, "baseline_epochs": 2}))
    cfg = load_config(f, base={"seed": 1, "filter": "eu50"}, seed=None, filter="none")
    assert cfg.seed == 4 and cfg.filter == "none" and cfg.n_members == 5
    assert cfg.train_config().learning_rate == 3e-4
    assert cfg.train_config("baseline").epochs == 2
    assert cfg.train_config("diffusion").epochs == 40
    assert RunConfig.from_mapping(cfg.to_mapping()) == cfg


@pytest.mark.parametrize("bad", [
    {"colour": "red"},
    {"train_years": [2016, 2021], "test_years": [2021, 2021]},
    {"batch_size": 0},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(bad)


def test_config_must_be_flat(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("train:\n  epochs: 3\n")
    with pytest.raises(ConfigError):
        load_config(f)
