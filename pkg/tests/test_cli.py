import csv

import numpy as np
import pytest

from statechain.cli import build_parser, main
from statechain.config import load_config
from statechain.io import load_checkpoint, read_pgm, read_tensor
from statechain.verify import SUITES, format_table, run_suite

TINY_TOML = """
seed = 3

[network]
depth = 2
d_model = 8
d_state = 4
height = 4
width = 4
time_freq_dim = 8
time_hidden = 16

[sampler]
nfe_budget = 8

[trainer]
steps = 6
batch_size = 4
log_every = 3
loss_window = 2
n_train = 64
n_heldout = 16
n_eval = 8
n_ema_loss = 8
sample_batch = 4
"""


@pytest.fixture
def tiny_toml(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY_TOML)
    return p


@pytest.mark.parametrize("suite", SUITES)
def test_verify_suites_pass(suite):
    results = run_suite(suite)
    assert results and all(ok for _, ok, _ in results), format_table(results)


def test_verify_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("nope")


def test_verify_exit_code(capsys):
    assert main(["verify", "--suite", "schedule"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_train_writes_artifacts(tmp_path, tiny_toml, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_toml), "--out-dir", str(out), "--arcee", "on", "--k", "2"]) == 0
    for name in ("config.toml", "metrics.csv", "checkpoint.npz", "ema.npz", "samples.arc", "samples.pgm"):
        assert (out / name).is_file()
    cfg = load_config(out / "config.toml")
    assert cfg.network.arcee_enabled and cfg.network.k == 2 and cfg.seed == 3
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [int(r["step"]) for r in rows] == [3, 6]
    assert rows[-1]["nfe"] == "8"
    samples = read_tensor(out / "samples.arc")
    assert samples.shape == (8, 16)
    # 8 samples of 4x4 -> 3 columns x 3 rows of tiles
    grid = read_pgm(out / "samples.pgm")
    assert grid.shape == (12, 12)


def test_train_is_byte_deterministic(tmp_path, tiny_toml):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        main(["train", "--config", str(tiny_toml), "--out-dir", str(o)])
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "samples.arc").read_bytes() == (outs[1] / "samples.arc").read_bytes()


def test_seed_flag_changes_run(tmp_path, tiny_toml):
    main(["train", "--config", str(tiny_toml), "--out-dir", str(tmp_path / "a")])
    main(["train", "--config", str(tiny_toml), "--out-dir", str(tmp_path / "b"), "--seed", "4"])
    assert load_config(tmp_path / "b" / "config.toml").seed == 4
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_sample_from_checkpoint(tmp_path, tiny_toml, capsys):
    run = tmp_path / "run"
    main(["train", "--config", str(tiny_toml), "--out-dir", str(run)])
    out = tmp_path / "s"
    assert main(["sample", "--checkpoint", str(run / "ema.npz"), "-n", "5", "--out-dir", str(out),
                 "--sampler", "rk4", "--nfe", "12"]) == 0
    x = read_tensor(out / "samples.arc")
    assert x.shape == (5, 16) and np.all(np.isfinite(x))
    assert "nfe=12" in capsys.readouterr().out
    params, text = load_checkpoint(run / "ema.npz")
    assert "[network]" in text and params


def test_sample_dopri5(tmp_path, tiny_toml):
    run = tmp_path / "run"
    main(["train", "--config", str(tiny_toml), "--out-dir", str(run)])
    assert main(["sample", "--checkpoint", str(run / "checkpoint.npz"), "-n", "2", "--out-dir",
                 str(tmp_path / "s"), "--sampler", "dopri5"]) == 0
    assert read_tensor(tmp_path / "s" / "samples.arc").shape == (2, 16)


def test_ablate_rows(tmp_path, tiny_toml, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(tiny_toml), "--k", "1,2", "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert len(rows) == 4
    assert [(r["k"], r["arcee"]) for r in rows] == [("1", "off"), ("1", "on"), ("2", "off"), ("2", "on")]
    # on/off pairs share a training budget; different k are different budgets
    assert rows[0]["budget_hash"] == rows[1]["budget_hash"] != rows[2]["budget_hash"] == rows[3]["budget_hash"]
    assert len({r["n_params"] for r in rows}) == 1
    assert (out / "k2_on_s3" / "metrics.csv").is_file()


def test_ablate_seeds_and_single_variant(tiny_toml, capsys):
    assert main(["ablate", "--config", str(tiny_toml), "--k", "1", "--arcee", "on", "--seeds", "0,1"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n1,on,") == 2 and "k=1 arcee=on" in out


def test_parser_rejects_bad_flags():
    p = build_parser()
    with pytest.raises(SystemExit):
        p.parse_args(["train", "--sampler", "euler"])
    with pytest.raises(SystemExit):
        p.parse_args(["ablate", "--k", "1,x"])
