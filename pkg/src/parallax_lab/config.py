"""JSON run configs for the command line.

Each document carries ``schema_version`` and ``kind`` (``train``, ``bench``
or ``diag``). Unknown fields are rejected with the dotted path of the
offending key; basic scalar types are checked against the dataclass
annotations.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import ModelConfig
from .optim import OptimSpec
from .tasks import TaskSpec

SCHEMA_VERSION = 1
MAX_BENCH_CELLS = 10_000


class ConfigError(ValueError):
    pass


def _check_type(value, tp, where):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return
        for a in args:
            if a is type(None):
                continue
            try:
                _check_type(value, a, where)
                return
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {tp}")
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif tp is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {getattr(tp, '__name__', tp)}, got {type(value).__name__}")


def from_dict(cls, data, where: str):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field {where}.{unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, f"{where}.{key}")
            continue
        _check_type(value, tp, f"{where}.{key}")
        kwargs[key] = float(value) if tp is float else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass
class TrainRun:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    steps: int = 1000
    seed: int = 0
    eval_every: int = 0
    snapshot_every: int = 0
    eval_batches: int = 4
    dtype: str = "f32"


@dataclass
class BenchGrid:
    L_q: list = field(default_factory=lambda: [1])
    L_kv: list = field(default_factory=lambda: [1024])
    d_h: list = field(default_factory=lambda: [64])
    B_r: list = field(default_factory=lambda: [64])
    B_c: list = field(default_factory=lambda: [64])
    dtype: list = field(default_factory=lambda: ["f32"])

    def cells(self):
        sizes = [len(getattr(self, f.name)) for f in dataclasses.fields(self)]
        n = 1
        for s in sizes:
            n *= s
        if n > MAX_BENCH_CELLS:
            raise ConfigError(f"bench grid has {n} cells; the limit is {MAX_BENCH_CELLS}")
        if n == 0:
            raise ConfigError("bench grid is empty")
        out = []
        for lq in self.L_q:
            for lkv in self.L_kv:
                for dh in self.d_h:
                    for br in self.B_r:
                        for bc in self.B_c:
                            for dt in self.dtype:
                                if min(lq, lkv, dh, br, bc) < 1:
                                    raise ConfigError("bench sizes must be positive")
                                if dt not in ("f32", "f64"):
                                    raise ConfigError(f"grid.dtype: unknown precision {dt!r}")
                                out.append((lq, lkv, dh, br, bc, dt))
        return out


@dataclass
class BenchRun:
    grid: BenchGrid = field(default_factory=BenchGrid)
    repeats: int = 1
    seed: int = 0


@dataclass
class DiagRun:
    checkpoint: str = ""
    task: TaskSpec | None = None
    batch_size: int = 4
    metrics: list | None = None
    jitter: float | None = None
    buckets: int = 4
    seed: int = 0


KINDS = {"train": TrainRun, "bench": BenchRun, "diag": DiagRun}


def parse_config(doc: dict, expect: str | None = None):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {sorted(KINDS)}, got {kind!r}")
    if expect is not None and kind != expect:
        raise ConfigError(f"expected a {expect} config, got {kind}")
    body = {k: v for k, v in doc.items() if k not in ("schema_version", "kind")}
    if kind == "diag" and isinstance(body.get("task"), dict):
        body = dict(body)
        task = from_dict(TaskSpec, body.pop("task"), "task")
        run = from_dict(DiagRun, body, kind)
        run.task = task
        return run
    return from_dict(KINDS[kind], body, kind)


def preset_names() -> list[str]:
    root = resources.files("parallax_lab") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str, expect: str | None = None):
    """Load a config from a file path or a shipped preset name."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("parallax_lab") / "presets" / f"{ref}.json"
        if not res.is_file():
            raise ConfigError(f"no config file or preset named {ref!r} (presets: {', '.join(preset_names())})")
        text = res.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON in {ref}: {err}") from err
    return parse_config(doc, expect)
