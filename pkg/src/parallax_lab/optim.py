"""Muon and AdamW with WSD/cosine schedules and weight-decay annealing.

Matrix parameters go through Muon (momentum, Newton-Schulz polar factor,
RMS-matched scale); everything else takes an Adam-style scalar update.
Weight decay is decoupled and applied to the matrix group only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import check_finite

NS_COEFFS = (3.4445, -4.7750, 2.0315)
RMS_MATCH = 0.2
GROUPS = ("matrix", "embed", "norm")


def newton_schulz_polar(B: np.ndarray, steps: int = 5, coeffs=NS_COEFFS) -> np.ndarray:
    """Approximate polar factor by the quintic Newton-Schulz iteration.

    ``X <- a X + b (X X^T) X + c (X X^T)^2 X`` from ``X0 = B / ||B||_F``. Tall
    inputs are transposed so the Gram matrix is the small one.
    """
    B = np.asarray(B)
    if B.ndim != 2:
        raise ValueError(f"Newton-Schulz needs a matrix, got shape {B.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    norm = np.linalg.norm(B)
    if norm == 0.0:
        raise ValueError("Newton-Schulz of a zero matrix is undefined")
    a, b, c = coeffs
    tall = B.shape[0] > B.shape[1]
    X = (B.T if tall else B) / norm
    for _ in range(steps):
        G = X @ X.T
        X = a * X + (b * G + c * G @ G) @ X
    return X.T if tall else X


def update_scale(shape, mode: str = "rms") -> float:
    m, n = shape
    if mode == "rms":
        return RMS_MATCH * math.sqrt(max(m, n))
    if mode == "spectral":
        return math.sqrt(max(1.0, m / n))
    raise ValueError(f"unknown Muon scale mode {mode!r}")


@dataclass
class MuonState:
    B: np.ndarray
    beta: float = 0.95
    ns_steps: int = 5
    wd: float = 0.0
    scale_mode: str = "rms"

    @classmethod
    def like(cls, W, **kw):
        return cls(B=np.zeros_like(W), **kw)


def muon_update(G: np.ndarray, state: MuonState) -> np.ndarray:
    """Advance the momentum buffer and return the scaled polar update."""
    if G.ndim != 2:
        raise ValueError(f"Muon only updates matrices; got a {G.ndim}-D parameter (use the Adam path)")
    state.B = state.beta * state.B + G
    if not np.any(state.B):
        return np.zeros_like(G)
    return update_scale(G.shape, state.scale_mode) * newton_schulz_polar(state.B, state.ns_steps)


def muon_step(W, G, state: MuonState, lr: float, wd_mult: float = 1.0) -> np.ndarray:
    U = muon_update(G, state)
    return W - lr * U - lr * state.wd * wd_mult * W


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    wd: float = 0.0
    t: int = 0

    @classmethod
    def like(cls, W, **kw):
        return cls(m=np.zeros_like(W), v=np.zeros_like(W), **kw)


def adamw_step(W, G, state: AdamState, lr: float, wd_mult: float = 1.0) -> np.ndarray:
    """Bias-corrected Adam step with decoupled weight decay."""
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * G
    state.v = state.beta2 * state.v + (1 - state.beta2) * G * G
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    return W - lr * mhat / (np.sqrt(vhat) + state.eps) - lr * state.wd * wd_mult * W


@dataclass
class ScheduleSpec:
    kind: str = "wsd"
    total_steps: int = 1000
    peak_lr: float = 5e-3
    warmup_frac: float | None = None
    decay_start_frac: float = 0.8
    wda_gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("wsd", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.warmup_frac is None:
            self.warmup_frac = 0.0 if self.kind == "wsd" else 0.01
        if not 0 <= self.warmup_frac <= self.decay_start_frac <= 1:
            raise ValueError("need 0 <= warmup_frac <= decay_start_frac <= 1")
        if self.total_steps < 0 or self.wda_gamma < 0:
            raise ValueError("total_steps and wda_gamma must be non-negative")


def lr_and_wd_at(step: int, spec: ScheduleSpec):
    """Learning rate and weight-decay multiplier at ``step``.

    WSD holds the peak after warmup until ``decay_start_frac`` and then decays
    linearly to zero; cosine decays over everything after warmup. The decay
    multiplier is ``(1 - t)^gamma`` with ``t`` the progress through the decay
    stage, and 1 before it.
    """
    T = spec.total_steps
    if not 0 <= step <= T:
        raise ValueError(f"step {step} outside [0, {T}]")
    if T == 0:
        return spec.peak_lr, 1.0
    warm = spec.warmup_frac * T
    if spec.kind == "wsd":
        start = spec.decay_start_frac * T
    else:
        start = warm
    if step < warm:
        return spec.peak_lr * step / warm, 1.0
    if step < start or T == start:
        return spec.peak_lr, 1.0
    t = (step - start) / (T - start)
    if spec.kind == "wsd":
        lr = spec.peak_lr * (1.0 - t)
    else:
        lr = spec.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    wd_mult = (1.0 - t) ** spec.wda_gamma if spec.wda_gamma > 0 else 1.0
    return lr, wd_mult


def clip_grad_norm(grads: dict, max_norm: float | None):
    """Scale all gradients by ``min(1, max_norm / ||g||)``; returns ``(grads, norm)``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        raise FloatingPointError("gradient norm is non-finite")
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: (g * s).astype(g.dtype) for k, g in grads.items()}, norm


@dataclass
class OptimSpec:
    optimizer: str = "muon"
    lr: float = 5e-3
    wd: float = 0.1
    schedule: str = "wsd"
    warmup_frac: float | None = None
    decay_start_frac: float = 0.8
    wda_gamma: float = 0.0
    ns_steps: int = 5
    momentum: float = 0.95
    muon_scale: str = "rms"
    clip: float | None = 1.0
    embed_lr_mult: float = 0.3
    norm_lr_mult: float = 0.015

    def __post_init__(self):
        if self.optimizer not in ("muon", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        update_scale((1, 1), self.muon_scale)

    def schedule_spec(self, total_steps: int) -> ScheduleSpec:
        return ScheduleSpec(self.schedule, total_steps, self.lr, self.warmup_frac,
                            self.decay_start_frac, self.wda_gamma)


@dataclass
class Optimizer:
    """Group-aware optimizer over a flat ``{name: array}`` parameter dict.

    ``groups`` maps every parameter name to ``matrix``, ``embed`` or ``norm``.
    """

    spec: OptimSpec
    groups: dict
    total_steps: int
    states: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        bad = {g for g in self.groups.values() if g not in GROUPS}
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")
        self.schedule = self.spec.schedule_spec(self.total_steps)

    def lr_mult(self, group: str) -> float:
        if self.spec.optimizer == "adamw" or group == "matrix":
            return 1.0
        return self.spec.embed_lr_mult if group == "embed" else self.spec.norm_lr_mult

    def _state(self, name, W):
        st = self.states.get(name)
        if st is not None:
            return st
        group = self.groups[name]
        wd = self.spec.wd if group == "matrix" else 0.0
        if self.spec.optimizer == "muon" and group == "matrix":
            st = MuonState.like(W, beta=self.spec.momentum, ns_steps=self.spec.ns_steps,
                                wd=wd, scale_mode=self.spec.muon_scale)
        elif self.spec.optimizer == "muon":
            st = AdamState.like(W, beta1=0.8, beta2=0.95, eps=1e-7, wd=wd)
        else:
            st = AdamState.like(W, beta1=0.9, beta2=0.95, eps=1e-8, wd=wd)
        self.states[name] = st
        return st

    def step(self, params: dict, grads: dict) -> dict:
        """Update ``params`` in place; returns step statistics."""
        if set(params) != set(self.groups) or set(grads) != set(self.groups):
            raise KeyError("parameters, gradients and groups must share the same names")
        lr, wd_mult = lr_and_wd_at(min(self.step_count, self.total_steps), self.schedule)
        grads, gnorm = clip_grad_norm(grads, self.spec.clip)
        num = den = 0.0
        for name in sorted(params):
            W = params[name]
            st = self._state(name, W)
            eff = lr * self.lr_mult(self.groups[name])
            if isinstance(st, MuonState):
                new = muon_step(W, grads[name], st, eff, wd_mult)
            else:
                new = adamw_step(W, grads[name], st, eff, wd_mult)
            new = check_finite(new.astype(W.dtype), f"updated {name}")
            if self.groups[name] == "matrix":
                num += float(np.sum((new - W) ** 2))
                den += float(np.sum(W.astype(np.float64) ** 2))
            params[name] = new
        self.step_count += 1
        return {"lr": lr, "wd_mult": wd_mult, "grad_norm": gnorm,
                "rel_update": math.sqrt(num / den) if den > 0 else 0.0}
