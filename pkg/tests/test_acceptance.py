"""One test per acceptance criterion. Each prints a single PASS/FAIL line."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from parallax_lab import bench, verify
from parallax_lab.cli import main
from parallax_lab.config import load_config
from parallax_lab.optim import MuonState, muon_update, newton_schulz_polar
from parallax_lab.streaming import analytic_reads
from parallax_lab.tensor import as_dtype, jacobi_eigh
from parallax_lab.train import train_loop


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def run(suite):
    return verify.run_suite(suite, seed=0)[suite]


def errs(res, *names):
    return ", ".join(f"{n}={res[n]['max_err']:.2e}" for n in names)


def test_criterion_1_three_form_equivalence(report):
    res = run("equivalence")
    ok = res["three_form"]["pass"] and res["three_form"]["tol"] == 1e-12
    assert report(1, ok, errs(res, "three_form", "shift_cancellation") + " (200 instances, tol 1e-12)")


def test_criterion_2_streaming_fidelity(report):
    res = run("equivalence")
    names = ("stream_vs_dense_float64", "stream_vs_dense_float32", "decode_split")
    tols = (1e-12, 1e-4, 1e-6)
    ok = all(res[n]["pass"] and res[n]["tol"] == t for n, t in zip(names, tols))
    assert report(2, ok, errs(res, *names))


def test_criterion_3_limit_suite(report):
    res = run("limits")
    want = {"lla_large_ridge_is_softmax": 1e-6, "parallax_zero_probe_is_softmax": 0.0,
            "parallax_flat_is_affine_linear": 1e-5, "lla_flat_is_affine_mesanet": 1e-4,
            "affine_zero_probe_is_value_averaging": 0.0}
    ok = all(res[n]["pass"] and res[n]["tol"] == t for n, t in want.items())
    gap = res["lla_flat_fixed_ridge_gap"]["max_err"]
    assert report(3, ok, errs(res, *want) + f"; fixed-ridge convention gap {gap:.3f} (info)")


def test_criterion_4_boundary_amplification(report):
    res = run("prop1")
    ok = (res["eta_routes_agree"]["pass"] and res["eta_routes_agree"]["tol"] == 1e-9
          and res["prop1"]["max_eta_min"] >= -1e-12 and res["tbar_in_unit_interval"]["pass"])
    t = res["tbar_in_unit_interval"]
    assert report(4, ok, f"eta agreement {res['eta_routes_agree']['max_err']:.2e}, "
                         f"min eta {res['prop1']['max_eta_min']:.2e}, tbar in [{t['tbar_min']:.2e}, {t['tbar_max']:.6f}]")


def test_criterion_5_gradcheck(report):
    res = run("gradcheck")
    want = {"finite_difference": 1e-5, "stream_vs_dense": 1e-12, "model_softmax": 1e-4, "model_parallax": 1e-4}
    ok = all(res[n]["pass"] and res[n]["tol"] == t for n, t in want.items())
    assert report(5, ok, errs(res, *want))


def test_criterion_6_traffic_model(report):
    res = run("io")
    # the shipped bench grid on top of the suite's own grid
    grid = load_config("bench-default", "bench").grid
    rows = bench.run_bench(grid.cells(), repeats=1)
    bench_exact = all(r["measured_reads"] == analytic_reads(r["L_q"], r["L_kv"], r["d_h"], r["B_r"])
                      and r["measured_reads_softmax"] == analytic_reads(r["L_q"], r["L_kv"], r["d_h"], r["B_r"], False)
                      for r in rows)
    flop = [r["measured_flops"] / r["measured_flops_softmax"] for r in rows if min(r["L_q"], r["L_kv"]) >= 512]
    ok = (res["reads_parallax"]["pass"] and res["reads_softmax"]["pass"] and bench_exact
          and res["flop_ratio"]["pass"] and all(1.9 <= f <= 2.1 for f in flop)
          and res["decode_ai_ratio"]["pass"] and res["decode_ai_ratio"]["tol"] == 0.01)
    d = res["decode_ai_ratio"]
    assert report(6, ok, f"reads exact on {len(rows)} bench cells + suite grid, flop ratio dev "
                         f"{res['flop_ratio']['max_err']:.3f}, decode AI ratio {d['ai_plx'] / d['ai_fa']:.4f}")


def test_criterion_7_score_structure(report):
    res = run("scores")
    ok = all(v["pass"] for v in res.values()) and res["weights_sum_to_one"]["tol"] == 1e-12
    assert report(7, ok, f"row sums {res['weights_sum_to_one']['max_err']:.2e}, "
                         f"most negative weight {res['negative_weight_exists']['max_err']:.3f}")


def ns_singular_values(B):
    X = newton_schulz_polar(B)
    w, _ = jacobi_eigh(X.T @ X if X.shape[0] >= X.shape[1] else X @ X.T)
    return np.sqrt(np.maximum(w, 0.0))


def test_criterion_8_muon(report):
    rng = np.random.default_rng(0)
    lo, hi, n_out = np.inf, -np.inf, 0
    for _ in range(200):
        m, n = int(rng.integers(2, 65)), int(rng.integers(2, 33))
        sv = ns_singular_values(rng.standard_normal((m, n)))
        lo, hi = min(lo, sv.min()), max(hi, sv.max())
        n_out += int(sv.min() < 0.65 or sv.max() > 1.2)
    band_ok = n_out == 0

    cond = 0.0
    for _ in range(20):
        G = rng.standard_normal((int(rng.integers(8, 65)), int(rng.integers(8, 33))))
        sv = np.linalg.svd(muon_update(G, MuonState.like(G)), compute_uv=False)
        cond = max(cond, sv.max() / sv.min())
    cond_ok = cond <= 1.7

    eq = {o: verify.zero_probe_step_equivalence(0, o) for o in ("muon", "adamw")}
    eq_err = max(max(v.values()) for v in eq.values())
    eq_ok = eq_err <= 1e-12

    ok = band_ok and cond_ok and eq_ok
    assert report(8, ok, f"NS singular values in [{lo:.4f}, {hi:.4f}] ({n_out}/200 outside [0.65, 1.2]); "
                         f"update condition number {cond:.3f} (<= 1.7); W_R=0 one-step gap {eq_err:.1e}")


@pytest.mark.slow
def test_criterion_9_directional_recall(report):
    acc = {}
    for mixer in ("parallax", "softmax"):
        run_cfg = load_config(f"micro-icr-{mixer}-muon", "train")
        acc[mixer] = []
        for seed in (0, 1, 2):
            task = dataclasses.replace(run_cfg.task, seed=seed)
            rep = train_loop(run_cfg.model, task, run_cfg.optimizer, run_cfg.steps, seed=seed,
                             n_eval_batches=run_cfg.eval_batches, dtype=as_dtype(run_cfg.dtype))
            acc[mixer].append(rep.final_accuracy)
    chance = run_cfg.task.chance
    plx, sa = float(np.mean(acc["parallax"])), float(np.mean(acc["softmax"]))
    ok = plx >= sa - 0.02 and plx > 5 * chance and sa > 5 * chance
    assert report(9, ok, f"parallax {acc['parallax']} mean {plx:.4f}; softmax {acc['softmax']} mean {sa:.4f}; "
                         f"5x chance {5 * chance:.4f}")


TINY_TRAIN = {
    "schema_version": 1, "kind": "train",
    "model": {"layers": 1, "d_model": 16, "heads": 2, "vocab": 16, "seq_len": 16, "mlp_ratio": 2.0,
              "mixer": "parallax", "gate": True},
    "task": {"vocab": 16, "seq_len": 16, "kv_pairs": 2, "batch_size": 8},
    "optimizer": {"lr": 0.003}, "steps": 10, "eval_every": 5, "snapshot_every": 5, "eval_batches": 2,
}


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(report, tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    same = {}
    for name, argv in {
        "train": ["train", "--config", str(cfg), "--seed", "4"],
        "verify": ["verify", "prop1"],
        "diag": ["diag", str(tmp_path / "train-a" / "checkpoint"), "--seed", "4"],
    }.items():
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}-{tag}"
            assert main(argv + ["--threads", "1", "--out", str(out)]) == 0
            outs.append(tree_bytes(out))
        same[name] = outs[0] == outs[1] and len(outs[0]) > 0
    ok = all(same.values())
    assert report(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
