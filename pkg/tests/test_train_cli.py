import json
from dataclasses import replace

import numpy as np
import pytest

from camsnet.cli import EXIT_CHECK, EXIT_INVALID, EXIT_OK, ConfigError, load_run_config, main
from camsnet.data import PhantomSpec, generate_phantom, load_dataset
from camsnet.network import TINY_CONFIG
from camsnet.optim import halving_lr
from camsnet.train import RunConfig, Sample, train

TINY_RUN = {"network": TINY_CONFIG.to_dict(), "lr": 3e-3, "weight_decay": 0.0, "epochs": 3,
            "halve_every": 1, "batch_size": 2, "eval_every": 3}


def samples(n=4, size=32):
    spec = PhantomSpec(size=size, seed=0)
    return [Sample(f"s{i}", *generate_phantom(spec, i), fold=i % 5) for i in range(n)]


def test_training_is_deterministic_and_logs(tmp_path):
    run = RunConfig.from_dict(TINY_RUN)
    a = train(run, samples(), tmp_path / "a")
    b = train(run, samples())
    assert a.losses == b.losses and len(a.losses) == 6
    recs = [json.loads(l) for l in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(1, 7))
    assert all(r["lr"] == halving_lr(3e-3, r["epoch"], 1) for r in recs)
    assert (tmp_path / "a" / "checkpoint" / "manifest.json").exists()
    assert len((tmp_path / "a" / "eval_log.jsonl").read_text().splitlines()) == 1


def test_training_reduces_loss():
    run = RunConfig.from_dict({**TINY_RUN, "epochs": 15, "halve_every": 100, "eval_every": 15})
    losses = train(run, samples()).losses
    assert np.mean(losses[-4:]) < np.mean(losses[:4])


def test_train_rejects_mismatched_samples():
    with pytest.raises(ValueError, match="16x16"):
        train(RunConfig.from_dict(TINY_RUN), samples(size=16))
    with pytest.raises(ValueError):
        train(RunConfig.from_dict(TINY_RUN), [])


def test_run_config_round_trip_and_validation():
    run = RunConfig.from_dict(TINY_RUN)
    assert RunConfig.from_dict(json.loads(json.dumps(run.to_dict()))) == run
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        RunConfig(lr=-1.0)
    abl = run.with_ablation(msa_on=False, bidirectional=False, share_weights=False, pos_embed=False)
    net = abl.network
    assert (net.msa_on, net.scan_mode, net.share_weights, net.use_pos_embed) == (False, "unidirectional",
                                                                                 False, False)


def test_config_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    run = load_run_config(path, ["--lr", "0.01", "--network.num_classes=4", "--batch-size", "3"])
    assert run.lr == 0.01 and run.network.num_classes == 4 and run.batch_size == 3
    with pytest.raises(ConfigError, match="unknown config field"):
        load_run_config(path, ["--depth", "3"])
    with pytest.raises(ConfigError, match="needs a value"):
        load_run_config(path, ["--lr"])
    path.write_text('{"lr": 1e-3,\n "epochs": }')
    with pytest.raises(ConfigError, match=r"run.json:2:\d+"):
        load_run_config(path, [])


def test_cli_end_to_end(tmp_path, capsys):
    data, out = tmp_path / "data", tmp_path / "out"
    assert main(["synth-data", "--count", "4", "--size", "32", "--seed", "1", "--out", str(data)]) == EXIT_OK
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({**TINY_RUN, "epochs": 2}))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--lr", "0.002"]) == EXIT_OK
    assert json.loads((out / "run_config.json").read_text())["lr"] == 0.002
    capsys.readouterr()
    report = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--data", str(data), "--json", str(report)]) == 0
    text = capsys.readouterr().out
    assert "Dice %" in text and "Avg" in text
    assert set(json.loads(report.read_text())["dice"]) == {"LA", "RA", "LV", "RV", "avg"}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(replace(TINY_CONFIG, num_classes=3).to_dict()))
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--data", str(data), "--config", str(bad)]) == 2


def test_cli_validation_failures(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path)]) == EXIT_INVALID
    assert "bad.json:1:" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path)]) == EXIT_INVALID
    assert main(["count-params"]) == EXIT_INVALID
    assert main(["bench-scan", "--lengths", "64,32"]) == EXIT_INVALID


def test_cli_count_params(capsys):
    assert main(["count-params", "--reference", "all"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "11,776" in out and "4,608" in out and "9,184" in out and "FAIL" not in out
    assert main(["count-params", "--reference", "lifm", "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["lifm"]["total"] == 9_184
    code = main(["count-params", "--full", "--input", "256", "--json"])
    rep = json.loads(capsys.readouterr().out)["network"]
    assert rep["total"] == 16_073_989
    assert code == (EXIT_OK if rep["passed"] else EXIT_CHECK)


def test_cli_gradcheck_and_seed(capsys, monkeypatch):
    assert main(["gradcheck", "--scope", "op", "--name", "silu"]) == EXIT_OK
    assert "silu/x" in capsys.readouterr().out
    monkeypatch.setenv("CAMS_SEED", "5")
    assert main(["gradcheck", "--scope", "op", "--name", "mul", "--json"]) == EXIT_OK
    first = json.loads(capsys.readouterr().out)
    assert main(["gradcheck", "--scope", "op", "--name", "mul", "--seed", "5", "--json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == first
    assert main(["gradcheck", "--scope", "op", "--name", "nope"]) == EXIT_INVALID


def test_cli_bench_scan(tmp_path, capsys):
    csv_path = tmp_path / "bench.csv"
    assert main(["bench-scan", "--lengths", "64,128", "--repeats", "2", "--out", str(csv_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("L,mean_ms,std_ms,median_ms\n64,")
    assert "log-log slope" in out
    assert csv_path.read_text().count("\n") == 3


def test_cli_synth_data_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth-data", "--count", "6", "--size", "16", "--out", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "a/manifest.jsonl").read_text() == (tmp_path / "b/manifest.jsonl").read_text()
    assert (tmp_path / "a/images/phantom_00004.ctf").read_bytes() == (tmp_path / "b/images/phantom_00004.ctf").read_bytes()
    assert len(load_dataset(tmp_path / "a")) == 6
