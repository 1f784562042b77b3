"""``plx``: verify / train / bench / diag.

Exit codes: 0 success, 1 a property or run failed, 2 bad usage or config.
Outputs carry no timestamps or host details, so with ``--threads 1`` a
repeated command writes the same bytes (bench wall times excepted).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench, verify
from .config import ConfigError, DiagRun, TrainRun, load_config, preset_names
from .diagnostics import QUANTILES, model_diagnostics
from .tasks import TaskSpec, eval_batches
from .tensor import as_dtype
from .train import TrainingDivergedError, load_checkpoint, save_checkpoint, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# verify ---------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.dtype is not None:
        raise UsageError("verify suites fix their own precisions; --dtype does not apply")
    if args.suite != "all" and args.suite not in verify.SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from all, {', '.join(verify.SUITES)}")
    summary = verify.run_suite(args.suite, seed=args.seed or 0)
    ok = verify.all_pass(summary)
    doc = {"pass": ok, "suites": summary}
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _dump_json(_out_dir(args, args.out) / "verify.json", doc)
    for suite, props in summary.items():
        for name, res in props.items():
            if not res["pass"]:
                _log(f"FAIL {suite}.{name}: {res.get('max_err')} (tol {res.get('tol')})")
    return EXIT_OK if ok else EXIT_FAIL


# train ----------------------------------------------------------------------

def _apply_overrides(run: TrainRun, args) -> TrainRun:
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed, task=dataclasses.replace(run.task, seed=args.seed))
    if args.dtype is not None:
        run = dataclasses.replace(run, dtype=args.dtype)
    return run


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config (a file or one of: " + ", ".join(preset_names()) + ")")
    run = _apply_overrides(load_config(args.config, "train"), args)
    dtype = as_dtype(run.dtype)
    out = _out_dir(args, "plx-train")
    try:
        rep = train_loop(run.model, run.task, run.optimizer, run.steps, seed=run.seed,
                         eval_every=run.eval_every, snapshot_every=run.snapshot_every,
                         n_eval_batches=run.eval_batches, dtype=dtype, log=_log)
    except TrainingDivergedError as err:
        _log(str(err))
        return EXIT_FAIL
    doc = {
        "config": {"model": dataclasses.asdict(run.model), "task": dataclasses.asdict(run.task),
                   "optimizer": dataclasses.asdict(run.optimizer), "steps": run.steps, "seed": run.seed,
                   "dtype": run.dtype},
        "chance": run.task.chance,
        **rep.to_json(),
    }
    _dump_json(out / "report.json", doc)
    _write_rows(out / "loss.csv", ("step", "loss", "lr", "rel_update"),
                [(i, float(l), float(lr), float(u)) for i, (l, lr, u) in
                 enumerate(zip(rep.losses, rep.lrs, rep.rel_updates))])
    _write_rows(out / "eval.csv", ("step", "accuracy"), [(e["step"], e["accuracy"]) for e in rep.evals])
    rows = []
    for snap in rep.snapshots:
        for metric in ("cor", "cpa", "rho_norm"):
            for qv, val in zip(QUANTILES, snap[metric]):
                rows.append((snap["step"], snap["layer"], metric, qv, val))
    _write_rows(out / "snapshots.csv", ("step", "layer", "metric", "quantile", "value"), rows)
    save_checkpoint(out / "checkpoint", rep.params, run.model,
                    extra={"task": dataclasses.asdict(run.task), "steps": run.steps, "seed": run.seed})
    _log(f"final accuracy {rep.final_accuracy:.4f} (chance {run.task.chance:.4f}); wrote {out}")
    return EXIT_OK


# bench ----------------------------------------------------------------------

def cmd_bench(args) -> int:
    run = load_config(args.config or "bench-default", "bench")
    grid = run.grid
    if args.dtype is not None:
        grid = dataclasses.replace(grid, dtype=[args.dtype])
    cells = grid.cells()
    rows = bench.run_bench(cells, repeats=run.repeats, seed=run.seed if args.seed is None else args.seed, log=_log)
    out = _out_dir(args, "plx-bench")
    bench.write_csv(out / "bench.csv", rows)
    _log(f"wrote {len(rows)} rows to {out / 'bench.csv'}")
    return EXIT_OK


# diag -----------------------------------------------------------------------

def cmd_diag(args) -> int:
    run = load_config(args.config, "diag") if args.config else DiagRun()
    ckpt = args.checkpoint or run.checkpoint
    if not ckpt:
        raise UsageError("diag needs a checkpoint directory (positional or in the config)")
    try:
        params, cfg, manifest = load_checkpoint(ckpt)
    except (FileNotFoundError, ValueError) as err:
        raise UsageError(f"cannot load checkpoint {ckpt}: {err}") from err
    if args.dtype is not None:
        params = {k: v.astype(as_dtype(args.dtype)) for k, v in params.items()}
    task = run.task
    if task is None:
        if "task" in manifest:
            task = TaskSpec(**manifest["task"])
        else:
            task = TaskSpec(vocab=cfg.vocab, seq_len=cfg.seq_len)
    seed = run.seed if args.seed is None else args.seed
    task = dataclasses.replace(task, batch_size=run.batch_size, seed=seed)
    tokens = eval_batches(task, 1)[0][0]
    rep = model_diagnostics(params, cfg, tokens, metrics=run.metrics, jitter=run.jitter, n_buckets=run.buckets)
    out = _out_dir(args, "plx-diag")
    for metric in sorted(rep.rows):
        _write_rows(out / f"{metric}.csv", ("layer", "head", "position_bucket", "quantile", "value"), rep.rows[metric])
    names = ("W_Q", "W_K", "W_V", "W_O", "W_R", "W_QK", "W_OV", "W_RK")
    _write_rows(out / "spectra.csv", ("layer",) + names,
                [[row["layer"]] + ["" if row[n] is None else row[n] for n in names] for row in rep.spectra])
    _dump_json(out / "summary.json", {"mixer": cfg.mixer, "checkpoint_steps": manifest.get("steps"),
                                      "batch_size": run.batch_size, "seed": seed, **rep.summary()})
    _log(f"wrote {len(rep.rows)} metric tables to {out}")
    return EXIT_OK


# entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config path or preset name")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit; 1 for bitwise reproducibility")
    common.add_argument("--dtype", choices=("f32", "f64"), help="override the working precision")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="plx", description="Parallax attention lab")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run property suites")
    v.add_argument("suite", nargs="?", default="all", help="all | " + " | ".join(verify.SUITES))
    sub.add_parser("train", parents=[common], help="train a model on a recall task")
    sub.add_parser("bench", parents=[common], help="arithmetic-intensity and wall-time sweep")
    d = sub.add_parser("diag", parents=[common], help="diagnostics for a checkpoint")
    d.add_argument("checkpoint", nargs="?", help="checkpoint directory written by train")
    sub.add_parser("presets", help="list shipped presets")
    return p


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "bench": cmd_bench, "diag": cmd_diag}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "presets":
        print("\n".join(preset_names()))
        return EXIT_OK
    if args.threads is not None and args.threads < 1:
        _log("--threads must be >= 1")
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        _log(f"error: {err}")
        return EXIT_USAGE
    except ValueError as err:
        _log(f"error: {err}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
