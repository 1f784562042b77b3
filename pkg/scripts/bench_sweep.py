"""Arithmetic-intensity sweep over context length and row-block size.

Writes bench.csv through the library and prints the analytic and measured
Parallax/softmax ratios per cell.

    python3 scripts/bench_sweep.py --L 256 1024 4096 --block-rows 16 64 --out sweep
"""

import argparse
import sys
from pathlib import Path

from parallax_lab import bench
from parallax_lab.config import BenchGrid


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--L", type=int, nargs="+", default=[256, 1024, 4096])
    p.add_argument("--d-head", type=int, default=64)
    p.add_argument("--block-rows", type=int, nargs="+", default=[64])
    p.add_argument("--block-cols", type=int, default=64)
    p.add_argument("--decode", action="store_true", help="L_q = 1 against each L instead of square cells")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default="bench-sweep")
    return p.parse_args(argv)


def run(args) -> int:
    cells = []
    for L in args.L:
        for br in args.block_rows:
            lq = 1 if args.decode else L
            cells += BenchGrid(L_q=[lq], L_kv=[L], d_h=[args.d_head], B_r=[br], B_c=[args.block_cols]).cells()
    rows = bench.run_bench(cells, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_csv(out / "bench.csv", rows)
    print(f"{'L_q':>6} {'L_kv':>6} {'B_r':>4}  {'AI ratio':>8}  {'flop ratio':>10}  {'read ratio':>10}  {'wall ratio':>10}")
    for r in rows:
        print(f"{r['L_q']:>6} {r['L_kv']:>6} {r['B_r']:>4}  {r['ai_plx'] / r['ai_fa']:>8.4f}"
              f"  {r['measured_flops'] / r['measured_flops_softmax']:>10.4f}"
              f"  {r['measured_reads'] / r['measured_reads_softmax']:>10.4f}"
              f"  {r['wall_ns_plx'] / r['wall_ns_softmax']:>10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(run(parse_args()))
