"""Benchmark sweep: analytic arithmetic intensity next to measured counters
and wall time of the streaming Parallax and softmax-only forwards."""

from __future__ import annotations

import csv
import time

import numpy as np

from .family import AttnInputs
from .streaming import TileConfig, ai_model, parallax_stream_forward, softmax_stream_forward
from .tensor import as_dtype

COLUMNS = (
    "L_q", "L_kv", "d_h", "B_r", "B_c", "dtype",
    "ai_fa", "ai_plx",
    "measured_flops", "measured_reads",
    "measured_flops_softmax", "measured_reads_softmax",
    "wall_ns_plx", "wall_ns_softmax",
)


def _time_ns(fn, repeats):
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return best


def bench_cell(L_q, L_kv, d_h, B_r, B_c, dtype="f32", repeats=1, seed=0) -> dict:
    """One grid cell. Square cells run causal self-attention; ``L_q != L_kv``
    runs unmasked queries against the whole cache (the decode setting)."""
    dt = as_dtype(dtype)
    rng = np.random.default_rng([seed, L_q, L_kv, d_h])
    inp = AttnInputs(
        q=rng.standard_normal((L_q, d_h)).astype(dt),
        r=(0.1 * rng.standard_normal((L_q, d_h))).astype(dt),
        k=rng.standard_normal((L_kv, d_h)).astype(dt),
        v=rng.standard_normal((L_kv, d_h)).astype(dt),
        causal=L_q == L_kv,
    )
    cfg = TileConfig(B_r, B_c)
    _, _, led = parallax_stream_forward(inp, cfg)
    _, led_sa = softmax_stream_forward(inp, cfg)
    ai_fa, ai_plx = ai_model(L_q, L_kv, d_h, B_r)
    return {
        "L_q": L_q, "L_kv": L_kv, "d_h": d_h, "B_r": B_r, "B_c": B_c, "dtype": dtype,
        "ai_fa": ai_fa, "ai_plx": ai_plx,
        "measured_flops": led.flops, "measured_reads": led.elements_read,
        "measured_flops_softmax": led_sa.flops, "measured_reads_softmax": led_sa.elements_read,
        "wall_ns_plx": _time_ns(lambda: parallax_stream_forward(inp, cfg), repeats),
        "wall_ns_softmax": _time_ns(lambda: softmax_stream_forward(inp, cfg), repeats),
    }


def run_bench(cells, repeats=1, seed=0, log=None) -> list[dict]:
    rows = []
    for cell in cells:
        rows.append(bench_cell(*cell, repeats=repeats, seed=seed))
        if log:
            r = rows[-1]
            log(f"L_q={r['L_q']} L_kv={r['L_kv']} d_h={r['d_h']} B_r={r['B_r']} B_c={r['B_c']} "
                f"ai ratio {r['ai_plx'] / r['ai_fa']:.4f}  wall plx/sa {r['wall_ns_plx'] / r['wall_ns_softmax']:.2f}")
    return rows


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
