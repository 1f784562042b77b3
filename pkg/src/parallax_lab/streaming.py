"""Tiled one-pass Parallax forward with online softmax.

The kernel keeps two accumulation branches that share the running max and
the K/V tiles: the usual softmax branch ``(m, d1, O1)`` and the probe branch
``(d2, O2)`` built from ``P2 = P1 * (R K^T)``. Exponentials are base 2 with
logits pre-multiplied by ``log2(e)``; ``m`` lives in that frame.

Every pass fills an :class:`IoLedger` counting tensor elements moved and
flops spent, so the arithmetic-intensity model can be checked against what
the loop actually does. Fully masked tiles are still loaded and counted,
which is what the analytic traffic model assumes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .family import AttnInputs
from .tensor import NonFiniteError

LOG2E = 1.4426950408889634
LN2 = 0.6931471805599453


@dataclass(frozen=True)
class TileConfig:
    block_rows: int = 64
    block_cols: int = 64
    split: int = 1

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("tile sizes must be >= 1")
        if self.split < 1 or self.split & (self.split - 1):
            raise ValueError(f"split must be a power of two, got {self.split}")


@dataclass
class IoLedger:
    elements_read: int = 0
    elements_written: int = 0
    cache_written: int = 0
    flops: int = 0

    def __iadd__(self, other: "IoLedger"):
        self.elements_read += other.elements_read
        self.elements_written += other.elements_written
        self.cache_written += other.cache_written
        self.flops += other.flops
        return self

    def bytes_read(self, itemsize: int) -> int:
        return self.elements_read * itemsize


@dataclass
class BackwardCache:
    """Per-row forward residue consumed by the backward passes.

    ``tbar`` is in the key frame (``rho . k_j`` without the query shift) and
    ``m`` is the natural-log row max, so ``p_ij = exp(s q_i.k_j - m_i) / omega_i``.
    """

    o: np.ndarray
    vbar: np.ndarray
    tbar: np.ndarray
    omega: np.ndarray
    m: np.ndarray


@dataclass
class StreamState:
    """Running online-softmax state for a block of rows."""

    m: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    O1: np.ndarray
    O2: np.ndarray

    @classmethod
    def empty(cls, lead: tuple, rows: int, dv: int, dtype) -> "StreamState":
        return cls(
            m=np.full(lead + (rows,), -np.inf, dtype=dtype),
            d1=np.zeros(lead + (rows,), dtype=dtype),
            d2=np.zeros(lead + (rows,), dtype=dtype),
            O1=np.zeros(lead + (rows, dv), dtype=dtype),
            O2=np.zeros(lead + (rows, dv), dtype=dtype),
        )

    def finalize(self) -> np.ndarray:
        d1 = self.d1[..., None]
        return self.O1 / d1 * (1.0 + self.d2[..., None] / d1) - self.O2 / d1


def _rescale(m_old, m_new):
    # exp2(-inf - m) is 0 as wanted; -inf - -inf would be nan, and those rows
    # carry zero mass anyway.
    safe_new = np.where(np.isneginf(m_new), 0.0, m_new)
    return np.exp2(m_old - safe_new), safe_new


def _absorb_tile(st: StreamState, S1, Rk, Vc, probe: bool):
    m_new = np.maximum(st.m, S1.max(axis=-1))
    alpha, m_safe = _rescale(st.m, m_new)
    S1 -= m_safe[..., None]
    P1 = np.exp2(S1, out=S1)
    st.m = m_new
    st.d1 = alpha * st.d1 + P1.sum(axis=-1)
    st.O1 = alpha[..., None] * st.O1 + P1 @ Vc
    if probe:
        P2 = P1 * Rk
        st.d2 = alpha * st.d2 + P2.sum(axis=-1)
        st.O2 = alpha[..., None] * st.O2 + P2 @ Vc


def _tile_flops(br, bc, dk, dv, probe):
    # GEMMs count 2 flops per MAC; elementwise ops count one each.
    f = 2 * br * bc * dk + 2 * br * bc * dv + 4 * br * bc + br * dv + 3 * br
    if probe:
        f += 2 * br * bc * dk + 2 * br * bc * dv + 2 * br * bc + br * dv + 2 * br
    return f


def _row_block(inp: AttnInputs, r0: int, r1: int, cfg: TileConfig, probe: bool):
    lead = inp.q.shape[:-2]
    n_lead = int(np.prod(lead, dtype=np.int64))
    dk, dv = inp.q.shape[-1], inp.v.shape[-1]
    dtype = inp.dtype
    br = r1 - r0
    led = IoLedger()

    Qr = inp.q[..., r0:r1, :] * (inp.scale * LOG2E)
    Rr = inp.r[..., r0:r1, :]
    led.elements_read += n_lead * br * dk * (2 if probe else 1)
    st = StreamState.empty(lead, br, dv, dtype)
    rows = np.arange(r0, r1)[:, None]
    for c0 in range(0, inp.n_kv, cfg.block_cols):
        c1 = min(c0 + cfg.block_cols, inp.n_kv)
        bc = c1 - c0
        Kc = inp.k[..., c0:c1, :]
        Vc = inp.v[..., c0:c1, :]
        led.elements_read += n_lead * bc * (dk + dv)
        S1 = Qr @ np.swapaxes(Kc, -1, -2)
        if inp.causal:
            S1 += np.where(np.arange(c0, c1)[None, :] <= rows, 0.0, -np.inf).astype(S1.dtype)
        Rk = Rr @ np.swapaxes(Kc, -1, -2) if probe else None
        _absorb_tile(st, S1, Rk, Vc, probe)
        led.flops += n_lead * _tile_flops(br, bc, dk, dv, probe)
        if not (np.all(np.isfinite(st.d1)) and np.all(np.isfinite(st.O1))
                and np.all(np.isfinite(st.d2)) and np.all(np.isfinite(st.O2))):
            raise NonFiniteError(f"running state became non-finite at row block {r0}:{r1}, column block {c0}:{c1}")

    if probe:
        O = st.finalize()
        led.flops += n_lead * br * (3 * dv + 2)
    else:
        O = st.O1 / st.d1[..., None]
        led.flops += n_lead * br * dv
    led.elements_written += n_lead * br * dv
    cache = None
    if probe:
        cache = BackwardCache(
            o=O, vbar=st.O1 / st.d1[..., None], tbar=st.d2 / st.d1, omega=st.d1, m=st.m * LN2,
        )
        led.cache_written += n_lead * br * (2 * dv + 3)
    return O, cache, led


def _stream(inp: AttnInputs, cfg: TileConfig, probe: bool, workers: int):
    blocks = [(r0, min(r0 + cfg.block_rows, inp.n_q)) for r0 in range(0, inp.n_q, cfg.block_rows)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda b: _row_block(inp, b[0], b[1], cfg, probe), blocks))
    else:
        parts = [_row_block(inp, r0, r1, cfg, probe) for r0, r1 in blocks]
    ledger = IoLedger()
    for _, _, led in parts:
        ledger += led
    O = np.concatenate([p[0] for p in parts], axis=-2)
    cache = None
    if probe:
        caches = [p[1] for p in parts]
        cache = BackwardCache(
            o=np.concatenate([c.o for c in caches], axis=-2),
            vbar=np.concatenate([c.vbar for c in caches], axis=-2),
            tbar=np.concatenate([c.tbar for c in caches], axis=-1),
            omega=np.concatenate([c.omega for c in caches], axis=-1),
            m=np.concatenate([c.m for c in caches], axis=-1),
        )
    return O, cache, ledger


def parallax_stream_forward(inp: AttnInputs, cfg: TileConfig = TileConfig(), workers: int = 1):
    """Streaming Parallax forward. Returns ``(O, cache, ledger)``."""
    return _stream(inp, cfg, True, workers)


def softmax_stream_forward(inp: AttnInputs, cfg: TileConfig = TileConfig(), workers: int = 1):
    """The same loop with the probe branch removed (FlashAttention traffic).
    Returns ``(O, ledger)``."""
    O, _, ledger = _stream(inp, cfg, False, workers)
    return O, ledger


# decode -------------------------------------------------------------------

def shard_tiles(n_tiles: int, split: int) -> list[range]:
    """Contiguous tile ranges for ``split`` workers; trailing shards may be empty."""
    per, extra = divmod(n_tiles, split)
    out, start = [], 0
    for s in range(split):
        n = per + (1 if s < extra else 0)
        out.append(range(start, start + n))
        start += n
    return out


def decode_partial(q, rho, K, V, tiles: range, cfg: TileConfig, scale: float):
    """Unnormalized state of one shard over its KV tiles."""
    lead = q.shape[:-1]
    st = StreamState.empty(lead, 1, V.shape[-1], np.result_type(q, rho, K, V))
    Qr = q[..., None, :] * (scale * LOG2E)
    Rr = rho[..., None, :]
    for t in tiles:
        c0, c1 = t * cfg.block_cols, min((t + 1) * cfg.block_cols, K.shape[-2])
        Kc = K[..., c0:c1, :]
        _absorb_tile(st, Qr @ np.swapaxes(Kc, -1, -2), Rr @ np.swapaxes(Kc, -1, -2), V[..., c0:c1, :], True)
    return st


def merge_partials(partials) -> StreamState:
    """Log-sum-exp merge of ``(shard_index, StreamState)`` pairs.

    Partials are combined in shard-index order whatever order they arrive
    in, so the result is bitwise reproducible. Empty shards carry
    ``m = -inf`` and contribute nothing.
    """
    ordered = [st for _, st in sorted(partials, key=lambda p: p[0])]
    m_g = ordered[0].m
    for st in ordered[1:]:
        m_g = np.maximum(m_g, st.m)
    out = StreamState(m=m_g, d1=np.zeros_like(ordered[0].d1), d2=np.zeros_like(ordered[0].d2),
                      O1=np.zeros_like(ordered[0].O1), O2=np.zeros_like(ordered[0].O2))
    for st in ordered:
        a, _ = _rescale(st.m, m_g)
        out.d1 = out.d1 + a * st.d1
        out.d2 = out.d2 + a * st.d2
        out.O1 = out.O1 + a[..., None] * st.O1
        out.O2 = out.O2 + a[..., None] * st.O2
    return out


def decode_step(q, rho, K, V, cfg: TileConfig = TileConfig(), scale: float | None = None,
                workers: int = 1) -> np.ndarray:
    """Single-query Parallax over all keys with the KV loop split ``cfg.split`` ways."""
    q, rho, K, V = map(np.asarray, (q, rho, K, V))
    if K.shape[-2] < 1:
        raise ValueError("decode needs at least one key")
    if scale is None:
        scale = q.shape[-1] ** -0.5
    n_tiles = math.ceil(K.shape[-2] / cfg.block_cols)
    shards = shard_tiles(n_tiles, cfg.split)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = {s: ex.submit(decode_partial, q, rho, K, V, tiles, cfg, scale) for s, tiles in enumerate(shards)}
            partials = [(s, f.result()) for s, f in futs.items()]
    else:
        partials = [(s, decode_partial(q, rho, K, V, tiles, cfg, scale)) for s, tiles in enumerate(shards)]
    return merge_partials(partials).finalize()[..., 0, :]


# analytic model -----------------------------------------------------------

def n_row_blocks(n_q: int, block_rows: int) -> int:
    return math.ceil(n_q / block_rows)


def analytic_reads(n_q: int, n_kv: int, d_h: int, block_rows: int, probe: bool = True) -> int:
    """Element reads of the tiled forward: Q (and R) once, K and V once per row block."""
    n_r = n_row_blocks(n_q, block_rows)
    return ((2 if probe else 1) * n_q + 2 * n_r * n_kv) * d_h


def ai_model(n_q: int, n_kv: int, d_h: int, block_rows: int):
    """Arithmetic intensity (flops per byte at 2 bytes/element) of the
    softmax-only and the Parallax forward. ``d_h`` cancels."""
    if min(n_q, n_kv, d_h, block_rows) < 1:
        raise ValueError("all sizes must be positive")
    n_r = n_row_blocks(n_q, block_rows)
    ai_fa = 2 * n_q * n_kv / (n_q + 2 * n_r * n_kv)
    ai_plx = 2 * n_q * n_kv / (n_q + n_r * n_kv)
    return ai_fa, ai_plx
