import json
import subprocess
import sys

import numpy as np
import pytest

from continuum import cli
from continuum.node import adjoint_backward
from continuum.unet import ContinuousUNet, build, UNetConfig

TINY = {"model": {"levels": 2, "filters": [2, 4], "block_kind": "DB"},
        "train": {"epochs": 1, "batch_size": 4},
        "data": {"source": "blobs", "n": 10, "size": 16, "seed": 0}}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_solver_bench_rows_and_bytes(tmp_path):
    assert cli.main(["solver-bench", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["solver-bench", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "solver_bench.csv").read_bytes()
    assert a == (tmp_path / "b" / "solver_bench.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "solver,problem,fitted_order" and len(lines) == 9
    orders = {(r.split(",")[0], r.split(",")[1]): float(r.split(",")[2]) for r in lines[1:]}
    assert abs(orders["euler", "decay"] - 1) <= 0.15 and abs(orders["rk4", "decay"] - 4) <= 0.35


def test_train_zero_epochs_checkpoint_is_init(tmp_path):
    cfg = dict(TINY, train={"epochs": 0})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == 0
    net = ContinuousUNet.load(tmp_path / "checkpoint.cntm")
    init = build(UNetConfig.from_dict(TINY["model"]), 0)
    assert all(np.array_equal(net.params[k], init.params[k]) for k in init.params)
    assert (tmp_path / "train_log.csv").read_text() == "epoch,loss,val_dice,lr\n"


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"model": {"block_kind": "ZZ"}}')
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["launch"])
    assert info.value.code == 2


def test_train_eval_noise_pipeline(tmp_path, config):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config), "--out", str(out), "--seeds", "0"]) == 0
    log = (out / "train_log.csv").read_text().splitlines()
    assert len(log) == 2
    ck = str(out / "checkpoint.cntm")
    assert cli.main(["eval", "--config", str(config), "--checkpoint", ck, "--out", str(out)]) == 0
    assert cli.main(["noise-bench", "--config", str(config), "--checkpoint", ck, "--out", str(out)]) == 0
    rows = (out / "noise_bench.csv").read_text().splitlines()
    assert rows[0] == "sigma,dice,accuracy,ahd" and len(rows) == 5
    eval_rows = [r.split(",") for r in (out / "eval.csv").read_text().splitlines()[1:]]
    clean = np.mean([float(r[1]) for r in eval_rows])
    assert float(rows[1].split(",")[1]) == clean
    first = (out / "noise_bench.csv").read_bytes()
    assert cli.main(["noise-bench", "--config", str(config), "--checkpoint", ck, "--out", str(out),
                     "--sigmas", "0,0.2"]) == 0
    assert len((out / "noise_bench.csv").read_text().splitlines()) == 3
    assert cli.main(["noise-bench", "--config", str(config), "--checkpoint", ck, "--out", str(out)]) == 0
    assert (out / "noise_bench.csv").read_bytes() == first


def test_checkpoint_config_mismatch_exits_2(tmp_path, config):
    ck = tmp_path / "pln.cntm"
    build(UNetConfig.from_dict({**TINY["model"], "block_kind": "PLN"}), 0).save(ck)
    assert cli.main(["noise-bench", "--config", str(config), "--checkpoint", str(ck), "--out", str(tmp_path)]) == 2
    assert cli.main(["eval", "--config", str(config), "--checkpoint", str(tmp_path / "none"),
                     "--out", str(tmp_path)]) == 2


def test_block_compare_single_kind(tmp_path, config):
    assert cli.main(["block-compare", "--config", str(config), "--kinds", "PLN", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "block_compare.csv").read_text().splitlines()
    assert lines[0] == "kind,dice,acc,ahd,epochs_to_tau" and len(lines) == 2
    assert cli.main(["block-compare", "--config", str(config), "--kinds", "PLN,XX", "--out", str(tmp_path)]) == 2


def test_block_compare_is_byte_stable(tmp_path, config):
    for d in ("a", "b"):
        assert cli.main(["block-compare", "--config", str(config), "--kinds", "DB,PLN",
                         "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "block_compare.csv").read_bytes() == (tmp_path / "b" / "block_compare.csv").read_bytes()


def test_multiple_seeds_write_suffixed_files(tmp_path, config):
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path), "--seeds", "1,2"]) == 0
    assert (tmp_path / "train_log_seed1.csv").exists() and (tmp_path / "checkpoint_seed2.cntm").exists()


def test_nan_training_exits_1(tmp_path, monkeypatch, config):
    from continuum.data import SegSample

    def poisoned(_cfg):
        return [SegSample(np.full((1, 16, 16), np.nan), np.zeros((1, 16, 16))) for _ in range(5)]

    monkeypatch.setattr(cli, "load_dataset", poisoned)
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path)]) == 1


def test_gradcheck_passes(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "adjoint_backward" in out
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "check,max_rel_error,tolerance,passed"
    assert all(float(r.split(",")[1]) >= 0 for r in rows[1:])


def test_gradcheck_catches_corrupted_adjoint(tmp_path, capsys):
    def flipped(*args, **kw):
        g = adjoint_backward(*args, **kw)
        return g._replace(accel={k: -v for k, v in g.accel.items()})

    spec = cli.ExperimentSpec("gradcheck", None, tmp_path)
    assert cli.cmd_gradcheck(spec, None, adjoint=flipped) == 1
    err = capsys.readouterr().err
    assert "adjoint_backward" in err and "max_rel_error=" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "continuum", "solver-bench", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "solver_bench.csv").exists()
