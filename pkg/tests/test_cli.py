import csv
import json

import numpy as np
import pytest
import yaml

from helpers import write_mnist
from neurossm import cli
from neurossm.config import ConfigError, load_config

TINY = {
    "dataset": {"name": "smnist"},
    "model": {"model_dim": 6, "state_dim": 4, "num_blocks": 2},
    "train": {"epochs": 1, "batch_size": 20, "learning_rate": 0.01},
    "qaft": {"epochs": 1, "batch_size": 20, "learning_rate": 0.0001},
    "calib_size": 20,
    "bench_samples": 10,
    "eval_stream_samples": 4,
    "strict_counts": False,
}


@pytest.fixture
def workspace(tmp_path):
    data = write_mnist(tmp_path / "data", n_train=40, n_test=12)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "data_dir": str(data), "output_dir": str(tmp_path / "run")}))
    return tmp_path, cfg


def run(cfg, *args):
    return cli.main([args[0], "-c", str(cfg), *args[1:]])


def report(ws, name):
    return json.loads((ws / "run" / f"{name}.json").read_text())


def test_full_pipeline(workspace, capsys):
    ws, cfg = workspace
    for cmd in ("train", "ptq", "qaft", "eval"):
        assert run(cfg, cmd) == 0, cmd
    tr, pq, qa, ev = (report(ws, n) for n in ("train", "ptq", "qaft", "eval"))
    assert tr["param_count"] == 6 + 6 + 2 * (6 * 6 * 4 + 6 + 6 + 36 + 6) + 60 + 10
    assert qa["config_hash"] != pq["config_hash"]
    assert set(ev["results"]) == {"float", "ptq", "qaft"}
    assert 0 <= ev["results"]["float"]["stream_accuracy"] <= 1
    assert ev["results"]["float"]["conv_accuracy"] == pytest.approx(tr["accuracy"])
    assert run(cfg, "simulate", "--samples", "3") == 0
    sim = report(ws, "simulate")
    assert sim["bit_exact"] and sim["depth"] == 8 and sim["network"] == "qaft"
    assert run(cfg, "bench") == 0
    rows = list(csv.DictReader(open(ws / "run" / "bench.csv")))
    assert [(r["schedule"], r["regime"]) for r in rows] == [
        ("fall_through", "token"), ("fall_through", "sample"), ("pipelined", "token"), ("pipelined", "sample")]
    for r in rows:
        assert float(r["edp_uJs"]) == pytest.approx(float(r["energy_mJ"]) * float(r["latency_ms"]), rel=1e-9)
    thr = {(r["schedule"], r["regime"]): float(r["throughput_per_s"]) for r in rows}
    assert thr[("pipelined", "token")] > thr[("fall_through", "token")]
    assert (ws / "run" / "bench.png").stat().st_size > 0
    assert report(ws, "bench")["timing"]["host_stream_tokens_per_s"] > 0


def test_rerun_gives_identical_report_hash(workspace):
    ws, cfg = workspace
    assert run(cfg, "train") == 0
    h1 = report(ws, "train")["content_hash"]
    assert run(cfg, "train") == 0
    assert report(ws, "train")["content_hash"] == h1


def test_missing_prerequisite_and_hash_mismatch(workspace, capsys):
    ws, cfg = workspace
    assert run(cfg, "ptq") == cli.EXIT_USAGE
    assert "missing prerequisite" in capsys.readouterr().err
    assert run(cfg, "train") == 0
    assert run(cfg, "ptq", "--set", "train.epochs=2") == cli.EXIT_USAGE
    assert "rerun" in capsys.readouterr().err


def test_exit_codes(workspace, tmp_path, capsys):
    ws, cfg = workspace
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == cli.EXIT_USAGE
    assert run(cfg, "train", "--data-dir", str(tmp_path / "nowhere")) == cli.EXIT_DATA
    assert run(cfg, "train", "--set", "model.model_dim=0") == cli.EXIT_USAGE
    assert run(cfg, "train", "--set", "train.learning_rate=1e9") == cli.EXIT_NUMERIC


def test_random_init_eval_and_synthetic_simulation(workspace):
    ws, cfg = workspace
    assert run(cfg, "eval", "--random-init") == 0
    ev = report(ws, "eval")["results"]
    assert set(ev) == {"float", "random"}
    assert run(cfg, "simulate", "--random-init", "--synthetic", "--samples", "2",
               "--set", "schedule=fall_through") == 0
    sim = report(ws, "simulate")
    assert sim["bit_exact"] and sim["schedule"]["kind"] == "fall_through" and sim["accuracy"] is None


def test_cost_file_flag(workspace, tmp_path):
    ws, cfg = workspace
    ini = tmp_path / "c.ini"
    ini.write_text("[cost]\nt_step_base = 1e-6\n\n[schedule]\nkind = custom\nperiod = 3\n")
    assert run(cfg, "simulate", "--random-init", "--synthetic", "--samples", "1", "--cost-file", str(ini)) == 0
    sim = report(ws, "simulate")
    assert sim["schedule"] == {"kind": "custom", "period": 3}
    assert sim["metrics"]["latency_per_token"] == pytest.approx(8e-6)


def test_fit_cost_command(tmp_path):
    assert cli.main(["fit-cost", "-o", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["passed"] and fit["max_gated_error"] <= 0.30
    assert (tmp_path / "cost.ini").exists() and (tmp_path / "fit.png").exists()
    assert len(list(csv.DictReader(open(tmp_path / "fit.csv")))) == 6


def test_config_precedence_and_validation(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"seed": 3, "train": {"epochs": 4}}))
    cfg = load_config(f, ["train.epochs=7"])
    assert cfg.seed == 3 and cfg.train.epochs == 7 and cfg.train.batch_size == 50
    assert load_config(None, ["dataset.name=scifar"]).model.input_dim == 3
    with pytest.raises(ConfigError):
        load_config(None, ["dataset.name=scifar", "model.preset=small"])
    with pytest.raises(ConfigError):
        load_config(None, ["train.epohcs=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["noequals"])


def test_eval_untrained_is_chance(mnist_dir, tmp_path):
    rc = cli.main(["eval", "--random-init", "--data-dir", mnist_dir, "-o", str(tmp_path),
                   "--set", "dataset.test_subset_size=1000", "--set", "dataset.subset_size=256",
                   "--set", "eval_stream_samples=8", "--set", "strict_counts=false"])
    assert rc == 0
    res = json.loads((tmp_path / "eval.json").read_text())["results"]
    assert res["float"]["conv_accuracy"] == pytest.approx(0.10, abs=0.02)


def test_bundled_configs_load():
    from neurossm.config import bundled_configs

    names = bundled_configs()
    assert {"smnist_desk", "smnist", "psmnist", "scifar"} <= set(names)
    for n in names:
        load_config(n)
    desk = load_config("smnist_desk", ["train.epochs=1"])
    assert desk.dataset.subset_size == 10_000 and desk.train.epochs == 1
    assert load_config("scifar").model.input_dim == 3
