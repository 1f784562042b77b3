import csv
import json
from pathlib import Path

import pytest

from parallax_lab import bench
from parallax_lab.cli import main

TINY_TRAIN = {
    "schema_version": 1,
    "kind": "train",
    "model": {"layers": 1, "d_model": 16, "heads": 2, "vocab": 16, "seq_len": 16, "mlp_ratio": 2.0,
              "mixer": "parallax", "gate": True},
    "task": {"vocab": 16, "seq_len": 16, "kv_pairs": 2, "batch_size": 4},
    "optimizer": {"lr": 0.003},
    "steps": 4,
    "eval_every": 2,
    "snapshot_every": 2,
    "eval_batches": 1,
}
TINY_BENCH = {
    "schema_version": 1,
    "kind": "bench",
    "grid": {"L_q": [1, 16], "L_kv": [16, 40], "d_h": [4], "B_r": [8], "B_c": [8], "dtype": ["f64"]},
}


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def trained(tmp_path):
    cfg = write(tmp_path, "train.json", TINY_TRAIN)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--threads", "1", "--out", str(out)]) == 0
    return cfg, out


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["verify", "nonsense"]) == 2
    assert main(["verify", "prop1", "--dtype", "f32"]) == 2
    assert main(["train"]) == 2
    assert main(["train", "--config", "no-such-preset"]) == 2
    assert main(["train", "--config", "bench-default"]) == 2
    assert main(["verify", "prop1", "--threads", "0"]) == 2
    assert main(["diag", str(tmp_path / "missing")]) == 2
    assert main(["--help"]) == 0


def test_presets_listed(capsys):
    assert main(["presets"]) == 0
    assert "micro-icr-parallax-muon" in capsys.readouterr().out.split()


def test_verify_writes_json(tmp_path, capsys):
    assert main(["verify", "scores", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert doc["pass"] is True and set(doc["suites"]) == {"scores"}
    assert json.loads(capsys.readouterr().out) == doc


def test_train_outputs(trained):
    _, out = trained
    assert header(out / "loss.csv") == ["step", "loss", "lr", "rel_update"]
    assert header(out / "eval.csv") == ["step", "accuracy"]
    assert header(out / "snapshots.csv") == ["step", "layer", "metric", "quantile", "value"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["steps"] == 4 and [e["step"] for e in rep["evals"]] == [0, 2, 4]
    assert rep["chance"] == 1 / 16 and rep["config"]["model"]["mixer"] == "parallax"
    assert (out / "checkpoint" / "manifest.json").is_file()


def test_train_seed_override(tmp_path, trained):
    cfg, out = trained
    other = tmp_path / "seed1"
    assert main(["train", "--config", cfg, "--threads", "1", "--seed", "1", "--out", str(other)]) == 0
    assert json.loads((other / "report.json").read_text())["config"]["seed"] == 1
    assert (other / "loss.csv").read_bytes() != (out / "loss.csv").read_bytes()


def test_diag_outputs_and_errors(tmp_path, trained):
    _, out = trained
    d = tmp_path / "diag"
    assert main(["diag", str(out / "checkpoint"), "--threads", "1", "--out", str(d)]) == 0
    for metric in ("cor", "cpa", "rho_norm", "corr", "sink_sa", "sink_plx", "entropy", "s_min", "s_max"):
        assert header(d / f"{metric}.csv") == ["layer", "head", "position_bucket", "quantile", "value"]
    assert header(d / "spectra.csv") == ["layer", "W_Q", "W_K", "W_V", "W_O", "W_R", "W_QK", "W_OV", "W_RK"]
    summary = json.loads((d / "summary.json").read_text())
    assert summary["mixer"] == "parallax" and summary["checkpoint_steps"] == 4

    sa = dict(TINY_TRAIN, model=dict(TINY_TRAIN["model"], mixer="softmax"), steps=1)
    sa_out = tmp_path / "sa"
    assert main(["train", "--config", write(tmp_path, "sa.json", sa), "--out", str(sa_out)]) == 0
    diag_cfg = write(tmp_path, "d.json", {"schema_version": 1, "kind": "diag", "metrics": ["W_RK"]})
    assert main(["diag", str(sa_out / "checkpoint"), "--config", diag_cfg, "--out", str(tmp_path / "x")]) == 2


def test_bench_csv(tmp_path):
    cfg = write(tmp_path, "bench.json", TINY_BENCH)
    assert main(["bench", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert tuple(header(tmp_path / "bench.csv")) == bench.COLUMNS
    with open(tmp_path / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    square = [r for r in rows if r["L_q"] == r["L_kv"] == "16"][0]
    assert square["dtype"] == "f64"
    # two row blocks: (L + 4L) / (L + 2L)
    assert float(square["ai_plx"]) / float(square["ai_fa"]) == pytest.approx(5 / 3, rel=1e-12)
    assert int(square["measured_reads"]) == (2 * 16 + 2 * 2 * 16) * 4


def test_train_and_diag_deterministic(tmp_path, trained):
    cfg, out = trained
    again = tmp_path / "again"
    assert main(["train", "--config", cfg, "--threads", "1", "--out", str(again)]) == 0
    assert tree_bytes(out) == tree_bytes(again)
    d1, d2 = tmp_path / "d1", tmp_path / "d2"
    for d in (d1, d2):
        assert main(["diag", str(out / "checkpoint"), "--threads", "1", "--seed", "3", "--out", str(d)]) == 0
    assert tree_bytes(d1) == tree_bytes(d2)


def test_verify_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "prop1", "--threads", "1", "--out", str(a)]) == 0
    assert main(["verify", "prop1", "--threads", "1", "--out", str(b)]) == 0
    assert (a / "verify.json").read_bytes() == (b / "verify.json").read_bytes()
