import csv
import json

import pytest

from slacksched.cli import ExperimentConfig, ConfigError, component_seed, main, parse_sparse

TASKSET = {"tasks": [{"id": 1, "period": 8, "wcet": 3}, {"id": 2, "period": 5, "wcet": 2},
                     {"id": 3, "period": 6, "wcet": 2}]}


@pytest.fixture
def taskset(tmp_path):
    p = tmp_path / "set.json"
    p.write_text(json.dumps(TASKSET))
    return str(p)


def small_config(tmp_path, **extra):
    cfg = {"encoder": {"L": 1, "H": 2, "d": 16}, "quantizer": {"Q": 8},
           "train": {"episodes": 2, "warmup": 16, "batch_size": 8}, "horizon": 40, **extra}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_generate_and_simulate(tmp_path, taskset):
    out = tmp_path / "gen.json"
    assert main(["generate", "--n", "4", "--util", "0.7", "--out", str(out), "--seed", "2"]) == 0
    assert len(json.loads(out.read_text())["tasks"]) == 4
    run = tmp_path / "sim"
    assert main(["simulate", "--taskset", taskset, "--policy", "edf", "--horizon", "120", "--out", str(run)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["compliance_rate"] == pytest.approx(0.798, abs=0.01)
    assert (run / "trace.csv").read_text().startswith("t,task_id,event,core")
    assert json.loads((run / "config.json").read_text())["policy"] == "edf"


def test_train_eval_distill_pipeline(tmp_path, taskset):
    cfg = small_config(tmp_path)
    tr = tmp_path / "train"
    assert main(["train", "--config", cfg, "--taskset", taskset, "--out", str(tr), "--seed", "1"]) == 0
    curve = (tr / "learning_curve.csv").read_text()
    assert len(curve.splitlines()) == 3
    # identical config, identical bytes
    tr2 = tmp_path / "train2"
    assert main(["train", "--config", cfg, "--taskset", taskset, "--out", str(tr2), "--seed", "1"]) == 0
    assert (tr2 / "learning_curve.csv").read_text() == curve

    ev = tmp_path / "eval"
    ck = str(tr / "checkpoint.json")
    assert main(["eval", "--config", cfg, "--taskset", taskset, "--checkpoint", ck, "--out", str(ev),
                 "--mitigate", "on", "--sparse", "auto", "--dump-attention"]) == 0
    header = (ev / "diagnostics.csv").read_text().splitlines()[0]
    assert header == "t,entropy,align_top1,align_topk,p,alpha"
    assert (ev / "attention.csv").exists() and (ev / "heatmap.csv").exists()

    ds = tmp_path / "distill"
    assert main(["distill", "--config", cfg, "--taskset", taskset, "--checkpoint", ck, "--out", str(ds)]) == 0
    d = json.loads((ds / "distill.json").read_text())
    assert 0 <= d["alpha"] <= 1 and d["agreement_rule"] == pytest.approx(d["agreement"])


def test_bench_attn(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench-attn", "--sizes", "16,32,64,128", "--repeats", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "bench_attn.csv").open()))
    assert [int(r["N"]) for r in rows] == [16, 32, 64, 128]
    assert "wall_exponent" in json.loads((out / "bench_fit.json").read_text())


def test_sweep(tmp_path, taskset, monkeypatch):
    monkeypatch.setenv("TEMPONET_THREADS", "2")
    cfg = small_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--taskset", taskset, "--grid", "Q=4,8", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [r["value"] for r in rows] == ["4", "8"]


@pytest.mark.parametrize("argv", [
    ["simulate", "--taskset", "/nonexistent.json"],
    ["simulate", "--policy", "edf"],
    ["bench-attn", "--sparse", "1,2"],
    ["bench-attn", "--sizes", "a..b"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + (["--out", str(tmp_path)] if argv[0] != "bench-attn" else [])) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_config_file(tmp_path, taskset):
    bad = tmp_path / "bad.json"
    bad.write_text('{"nonsense": 1}')
    assert main(["simulate", "--config", str(bad), "--taskset", taskset, "--out", str(tmp_path)]) == 2
    bad.write_text('{"horizon": ')
    assert main(["simulate", "--config", str(bad), "--taskset", taskset, "--out", str(tmp_path)]) == 2


def test_helpers():
    assert parse_sparse("dense") == ("dense", None)
    assert parse_sparse("4,1,2") == ("block_topk", (4, 1, 2))
    with pytest.raises(ConfigError):
        parse_sparse("0,1,1")
    assert component_seed(3, "a") == component_seed(3, "a") != component_seed(3, "b")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
