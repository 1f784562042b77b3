"""Training loop, evaluation and checkpoints for the recall tasks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plxt
from .diagnostics import probe_snapshot
from .model import ModelConfig, check_params, init_params, model_loss_and_grads, param_groups, predict
from .optim import Optimizer, OptimSpec
from .tasks import TaskSpec, eval_batches, gen_task


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    rel_updates: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    params: dict | None = None

    @property
    def final_accuracy(self) -> float:
        return self.evals[-1]["accuracy"]

    def to_json(self) -> dict:
        return {
            "final_accuracy": self.final_accuracy,
            "evals": self.evals,
            "snapshots": self.snapshots,
            "steps": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
        }


def eval_accuracy(params: dict, cfg: ModelConfig, batches) -> float:
    """Fraction of supervised positions whose argmax equals the target."""
    hit = total = 0
    for tokens, targets in batches:
        pred = predict(params, cfg, tokens, targets)
        y = targets[targets >= 0]
        hit += int(np.sum(pred == y))
        total += y.size
    if total == 0:
        raise ValueError("evaluation batches contain no supervised positions")
    return hit / total


def train_loop(model_cfg: ModelConfig, task: TaskSpec, optim: OptimSpec, steps: int, seed: int = 0,
               eval_every: int = 0, snapshot_every: int = 0, n_eval_batches: int = 4,
               dtype=np.float32, snapshot_batch: int = 2, log=None) -> TrainReport:
    """Run ``steps`` optimizer steps and return the report.

    Evaluation happens at step 0, every ``eval_every`` steps and at the end,
    always on the same held-out batches. Probe snapshots (COR, CPA, probe
    norm per layer) are taken every ``snapshot_every`` steps on the first
    ``snapshot_batch`` eval sequences.
    """
    if task.vocab != model_cfg.vocab or task.seq_len != model_cfg.seq_len:
        raise ValueError("task and model disagree on vocab or seq_len")
    params = init_params(model_cfg, seed, dtype)
    opt = Optimizer(optim, param_groups(model_cfg), steps)
    held = eval_batches(task, n_eval_batches)
    snap_tokens = held[0][0][:snapshot_batch]
    rep = TrainReport()

    def evaluate(step):
        rep.evals.append({"step": step, "accuracy": eval_accuracy(params, model_cfg, held)})
        if log:
            log(f"step {step:5d}  eval acc {rep.evals[-1]['accuracy']:.4f}")

    def snapshot(step):
        for row in probe_snapshot(params, model_cfg, snap_tokens):
            rep.snapshots.append({"step": step, **row})

    evaluate(0)
    if snapshot_every:
        snapshot(0)
    for step in range(steps):
        tokens, targets = gen_task(task, step)
        try:
            loss, grads = model_loss_and_grads(params, model_cfg, tokens, targets)
        except (FloatingPointError, ValueError) as err:
            raise TrainingDivergedError(step, str(err)) from err
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, "loss is non-finite")
        stats = opt.step(params, grads)
        rep.losses.append(loss)
        rep.lrs.append(stats["lr"])
        rep.rel_updates.append(stats["rel_update"])
        done = step + 1
        if eval_every and done % eval_every == 0 and done != steps:
            evaluate(done)
        if snapshot_every and done % snapshot_every == 0:
            snapshot(done)
    if steps:
        evaluate(steps)
    rep.params = params
    return rep


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: dict, model_cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write one PLXT file per tensor plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    check_params(params, model_cfg)
    files = {}
    for name in sorted(params):
        fname = name + ".plxt"
        plxt.save(path / fname, params[name])
        files[name] = fname
    manifest = {"format": "plxt-checkpoint", "version": 1, "model": asdict(model_cfg), "tensors": files}
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(params, model_cfg, manifest)``."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "plxt-checkpoint":
        raise ValueError("manifest is not a PLXT checkpoint")
    cfg = ModelConfig(**manifest["model"])
    params = {name: plxt.load(path / fname) for name, fname in manifest["tensors"].items()}
    check_params(params, cfg)
    return params, cfg, manifest
