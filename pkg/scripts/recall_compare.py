"""Train the Parallax and softmax presets of one recall task over several
seeds and write a per-run accuracy table plus the per-mixer mean.

    python3 scripts/recall_compare.py --task icr --seeds 0 1 2 --out runs/icr
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from parallax_lab.cli import main as plx


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--task", default="icr", choices=("icr", "ncr", "sc"))
    p.add_argument("--size", default="micro", choices=("micro", "mad"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="recall-compare")
    return p.parse_args(argv)


def run(args) -> int:
    out = Path(args.out)
    rows = []
    for mixer in ("parallax", "softmax"):
        preset = f"{args.size}-{args.task}-{mixer}-muon"
        for seed in args.seeds:
            run_dir = out / f"{mixer}-seed{seed}"
            code = plx(["train", "--config", preset, "--seed", str(seed),
                        "--threads", str(args.threads), "--out", str(run_dir)])
            if code:
                return code
            rep = json.loads((run_dir / "report.json").read_text())
            rows.append((mixer, seed, rep["final_accuracy"], rep["chance"]))
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mixer", "seed", "accuracy", "chance"))
        w.writerows(rows)
    for mixer in ("parallax", "softmax"):
        acc = [r[2] for r in rows if r[0] == mixer]
        print(f"{mixer:9s} mean {np.mean(acc):.4f}  runs {acc}")
    return 0


if __name__ == "__main__":
    sys.exit(run(parse_args()))
