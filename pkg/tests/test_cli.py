import json

import numpy as np
import pytest

from repdet import cli, quantsim
from repdet.netdef import load_weights, read_checkpoint


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line)


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    assert cli.main(["build", "--variant", "n", "--num-classes", "3", "--seed", "1", "--out", str(d / "m.rdet")]) == 0
    assert cli.main(["fuse", "--in", str(d / "m.rdet"), "--out", str(d / "f.rdet"), "--verify",
                     "--samples", "4"]) == 0
    return d


def test_count_variant_n_reports_both_conventions(capsys):
    code, out, _ = run(capsys, "count", "--variant", "n", "--kv")
    assert code == 0
    v = kv(out)
    assert int(v["params"]) == 4_289_662
    assert int(v["flops"]) == 2 * int(v["macs"])
    assert abs(int(v["params"]) - 4.3e6) / 4.3e6 < 0.15
    code, out, _ = run(capsys, "count", "--variant", "n")
    assert "params: 4,289,662" in out and "M" in out


def test_unknown_subcommand_and_flags_exit_one(capsys):
    code, _, err = run(capsys, "explode")
    assert code == 1 and "usage" in err
    code, _, err = run(capsys, "count", "--variant", "n", "--bogus")
    assert code == 1 and "usage" in err
    code, _, err = run(capsys)
    assert code == 1


def test_missing_checkpoint_is_a_precondition_failure(capsys, tmp_path):
    code, _, err = run(capsys, "fuse", "--in", str(tmp_path / "none.rdet"), "--out", str(tmp_path / "x.rdet"))
    assert code == 1 and "no such checkpoint" in err and len(err.strip().splitlines()) == 1
    (tmp_path / "bad.rdet").write_bytes(b"nonsense")
    code, _, err = run(capsys, "count", "--in", str(tmp_path / "bad.rdet"))
    assert code == 1 and "bad magic" in err


def test_fuse_verify_on_fresh_build(capsys, ckpts):
    code, out, _ = run(capsys, "fuse", "--in", str(ckpts / "m.rdet"), "--out", str(ckpts / "f2.rdet"),
                       "--verify", "--samples", "3")
    assert code == 0 and "PASS" in out
    _, meta = read_checkpoint(ckpts / "f2.rdet")
    assert meta["fused"] == "1"
    code, _, err = run(capsys, "fuse", "--in", str(ckpts / "f2.rdet"), "--out", str(ckpts / "f3.rdet"))
    assert code == 1 and "already fused" in err


def test_fuse_verify_failure_exits_two(capsys, ckpts, monkeypatch):
    monkeypatch.setattr(cli, "FUSE_TOL", -1.0)
    code, out, _ = run(capsys, "fuse", "--in", str(ckpts / "m.rdet"), "--out", str(ckpts / "never.rdet"),
                       "--verify", "--samples", "1")
    assert code == 2 and "FAIL" in out
    assert not (ckpts / "never.rdet").exists()


def test_count_checkpoint_and_eval(capsys, ckpts):
    code, out, _ = run(capsys, "count", "--in", str(ckpts / "f.rdet"), "--input", "64", "--kv")
    assert code == 0 and kv(out)["fused"] == "1"
    for mode in ("resize", "border"):
        code, out, _ = run(capsys, "eval", "--in", str(ckpts / "f.rdet"), "--data", "synth:4:3", "--mode", mode)
        v = kv(out)
        assert code == 0 and 0 <= float(v["ap"]) <= float(v["ap50"]) <= 1
        assert int(v["input"]) == (96 if mode == "border" else 64)
    code, _, err = run(capsys, "eval", "--in", str(ckpts / "f.rdet"), "--data", "coco:val")
    assert code == 1 and "synth:N:SEED" in err


def test_quantize_writes_report_and_reloadable_checkpoint(capsys, ckpts):
    q, rep = ckpts / "q.rdet", ckpts / "report.tsv"
    code, out, _ = run(capsys, "quantize", "--in", str(ckpts / "f.rdet"), "--calib", "synth:4:1",
                       "--keep-float", "2", "--out", str(q), "--report", str(rep))
    assert code == 0
    report = quantsim.SensitivityReport.from_text(rep.read_text())
    assert len(report.kept_float) == 2
    m = quantsim.load_quantized(q)
    installed = [n for n, c in quantsim.quantizable_layers(m) if c.quant is not None]
    assert sorted(set(n for n, _ in quantsim.quantizable_layers(m)) - set(installed)) == sorted(report.kept_float)
    assert 0 < float(kv(out)["cosine"]) <= 1
    code, _, err = run(capsys, "quantize", "--in", str(ckpts / "m.rdet"), "--calib", "synth:2:1",
                       "--out", str(q), "--report", str(rep))
    assert code == 1 and "not fused" in err


def test_bench_reports_both_graphs(capsys, ckpts):
    code, out, _ = run(capsys, "bench", "--in", str(ckpts / "m.rdet"), "--repeat", "2", "--input", "64", "--border")
    assert code == 0
    lines = out.strip().splitlines()
    assert [line.split()[0] for line in lines] == ["graph=unfused", "graph=fused", "graph=fused+border"]
    for line in lines:
        v = dict(tok.split("=") for tok in line.split())
        assert float(v["p50_ms"]) > 0 and float(v["mean_ms"]) > 0
    assert "grids=8x8,4x4,2x2" in lines[0] and "grids=12x12,6x6,3x3" in lines[2]


def test_train_subcommand_with_config_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"variant": "n"},
                               "train": {"epochs": 5, "batch_size": 4, "val_size": 2, "warmup_epochs": 0}}))
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--data", "synth:4:0", "--out", str(tmp_path / "run"),
                       "--epochs", "1")
    assert code == 0
    log = (tmp_path / "run" / "metrics.tsv").read_text().splitlines()
    assert len(log) == 2  # --epochs 1 beat the file's 5
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["train"]["epochs"] == 1 and saved["train"]["batch_size"] == 4
    assert load_weights(tmp_path / "run" / "ema.rdet").ema
    cfg.write_text(json.dumps({"train": {"epochz": 1}}))
    code, _, err = run(capsys, "train", "--config", str(cfg), "--data", "synth:4:0", "--out", str(tmp_path / "r2"))
    assert code == 1 and "epochz" in err
