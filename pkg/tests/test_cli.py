import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from tape.cli import EXIT_FAIL, EXIT_IO, EXIT_OK, EXIT_USAGE, RunConfig, main, toeplitz_deviation
from tape.model import ConfigError
from tape.tasks import AccuracyGrid


def write_cfg(tmp_path, text=""):
    p = tmp_path / "run.cfg"
    p.write_text(f"out=out\n{text}")
    return str(p)


def jsonl(path):
    return [json.loads(s) for s in path.read_text().splitlines()]


# ---------------------------------------------------------------- config

def test_config_roundtrip_and_hash():
    rc = RunConfig.parse("seed=7\nmodel.dim=32  # width\ntrain.baseline=off\n")
    assert rc["seed"] == 7 and rc["model.dim"] == 32 and rc["train.baseline"] is False
    back = RunConfig.parse(rc.serialize())
    assert back.values == rc.values and back.hash == rc.hash
    assert RunConfig.parse("seed=8").hash != rc.hash


@pytest.mark.parametrize("text", ["nope=1", "model.dim=abc", "justakey", "train.baseline=maybe"])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    rc = RunConfig.load(write_cfg(tmp_path, "checkpoint=ck/a.tapa\n"))
    assert rc.path("checkpoint") == tmp_path / "ck" / "a.tapa"
    assert rc.path("data.cache") is None


def test_seed_precedence(tmp_path, monkeypatch, capsys):
    cfg = write_cfg(tmp_path, "seed=5\n")
    monkeypatch.setenv("TAPE_SEED", "11")
    assert main(["config", "--config", cfg]) == EXIT_OK
    assert "seed=11\n" in capsys.readouterr().out
    assert main(["config", "--config", cfg, "--seed", "12"]) == EXIT_OK
    assert "seed=12\n" in capsys.readouterr().out
    monkeypatch.setenv("TAPE_SEED", "-1")
    assert main(["config", "--config", cfg]) == EXIT_USAGE


def test_usage_exit_codes(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["props", "--config", cfg, "--trials", "0"]) == EXIT_USAGE
    assert main(["props", "--config", cfg, "--seed", str(2**64)]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["props", "--config", write_cfg(tmp_path, "unknown.key=1\n")]) == EXIT_USAGE
    assert main(["props", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO


# ---------------------------------------------------------------- props and nc1

def test_props_pass_and_break(tmp_path):
    cfg = write_cfg(tmp_path, "props.trials=3\nprops.rope_instances=3\nmodel.depth=1\n")
    assert main(["props", "--config", cfg]) == EXIT_OK
    rows = jsonl(tmp_path / "out" / "props.jsonl")
    assert all(r["config_hash"] == rows[0]["config_hash"] for r in rows)
    assert rows[-1]["passed"] is True
    assert main(["props", "--config", cfg, "--break-equivariance"]) == EXIT_FAIL


def test_nc1_trivial_and_corrupted(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "nc1.lengths=1,8\nnc1.instances=50\n")
    assert main(["nc1", "--config", cfg]) == EXIT_OK
    csv = (tmp_path / "out" / "nc1_sweep.csv").read_text().splitlines()
    assert csv[0].startswith("# config_hash=") and len([l for l in csv if not l.startswith("#")]) == 3
    assert main(["nc1", "--config", cfg, "--corrupt-weights"]) == EXIT_FAIL
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["corrupt_weights"] and summary["first_fail"] == 8


# ---------------------------------------------------------------- train, eval, dump-pe

def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--config", write_cfg(tmp_path)]) == EXIT_IO


def test_train_then_eval_smoke(tmp_path):
    cfg = write_cfg(tmp_path, "model.dim=16\nmodel.depth=1\nmodel.n_ctx=24\ndata.max_len=2\n"
                              "data.train_size=64\ntrain.steps=2\ntrain.batch_size=4\n"
                              "eval.max_len=3\neval.samples_per_cell=2\n")
    assert main(["train", "--config", cfg]) == EXIT_OK
    out = tmp_path / "out"
    assert (out / "tape.tapa").exists() and (out / "rope.tapa").exists()
    assert (out / "tape_run" / "loss.csv").read_text().startswith("# config_hash=")
    assert main(["eval", "--config", cfg]) == EXIT_OK
    rows = jsonl(out / "eval.jsonl")
    assert {r["variant"] for r in rows if "variant" in r} == {"tape", "rope"}
    grid = AccuracyGrid.from_csv(out / "grid_tape.csv", 2)
    assert grid.acc.shape == (3, 3)


def test_dump_pe_layers(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model.depth=2\nmodel.dim=16\nmodel.init_std=0.3\ndump.layers=0,2\ndump.length=12\n")
    assert main(["dump-pe", "--config", cfg]) == EXIT_OK
    devs = [json.loads(s)["toeplitz_dev"] for s in capsys.readouterr().out.splitlines()]
    assert devs[0] < 1e-12 and devs[1] > 1e-3  # contextualized layers lose the Toeplitz pattern
    files = sorted(p.name for p in (tmp_path / "out").glob("pe_dots_layer*.csv"))
    assert files == ["pe_dots_layer0.csv", "pe_dots_layer2.csv"]
    assert main(["dump-pe", "--config", write_cfg(tmp_path, "dump.layers=9\n")]) == EXIT_USAGE


def test_dump_pe_paths_off_stays_toeplitz(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model.dim=16\nmodel.attn_path=false\nmodel.mlp_path=false\n"
                              "dump.layers=0,1,2\ndump.length=10\n")
    assert main(["dump-pe", "--config", cfg]) == EXIT_OK
    rows = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
    assert len(rows) == 3 and max(r["toeplitz_dev"] for r in rows) < 1e-12


def test_toeplitz_deviation():
    t = np.add.outer(-np.arange(4), np.arange(4)).astype(float)
    assert toeplitz_deviation(t) == 0.0
    t[0, 0] = 5.0
    assert toeplitz_deviation(t) > 0.5


@pytest.mark.slow
def test_smoke_config_under_five_minutes(tmp_path):
    src = Path(__file__).resolve().parent.parent / "demos" / "configs" / "smoke.cfg"
    cfg = tmp_path / "cfg" / "smoke.cfg"
    cfg.parent.mkdir()
    shutil.copy(src, cfg)
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    assert main(["eval", "--config", str(cfg)]) == EXIT_OK
    assert time.perf_counter() - t0 < 300
    rows = jsonl(tmp_path / "out" / "smoke" / "train.jsonl")
    assert [r["steps"] for r in rows if "steps" in r] == [200, 200]
