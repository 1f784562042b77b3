"""Synthetic recall tasks: in-context recall, noisy recall, selective copying.

Every generator returns ``(tokens, targets)`` as int64 ``[batch, seq_len]``
arrays. ``targets[b, i]`` is the token the model must predict at position
``i`` (a next-token target) or ``-1`` where the position is not supervised.

Token layouts
  icr  keys come from ``[0, V/2)``, values from ``[V/2, V)``. The sequence
       opens with every (key, value) pair, then repeats (key, value) queries
       drawn from those pairs until ``seq_len`` is filled. Supervision sits
       on each query key, whose target is its value; with ``n_queries`` set,
       only the first ``n_queries`` queries are supervised.
  ncr  the top ``max(1, V // 4)`` ids are noise tokens; keys and values
       split the rest. Noise tokens are inserted between (key, value) units,
       never inside one. ``noise_frac = 0`` is exactly ``icr``.
  sc   ``V - 1`` is the blank and ``V - 2`` the copy marker. Content tokens
       sit at random sorted positions among blanks, then the marker, then the
       content is replayed; targets are the content tokens in order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("icr", "ncr", "sc")
TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "icr"
    vocab: int = 16
    seq_len: int = 64
    kv_pairs: int = 4
    noise_frac: float = 0.0
    seed: int = 0
    batch_size: int = 64
    n_queries: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.noise_frac < 1.0:
            raise ValueError("noise_frac must be in [0, 1)")
        if self.batch_size < 1 or self.seq_len < 2 or self.kv_pairs < 1:
            raise ValueError("batch_size >= 1, seq_len >= 2 and kv_pairs >= 1 are required")
        _layout(self)

    @property
    def chance(self) -> float:
        return 1.0 / self.vocab


def _split_vocab(spec: TaskSpec):
    """``(key ids, value ids, noise ids)`` for the recall tasks."""
    V = spec.vocab
    n_noise = max(1, V // 4) if spec.kind == "ncr" and spec.noise_frac > 0 else 0
    content = V - n_noise
    half = content // 2
    return np.arange(half), np.arange(half, content), np.arange(content, V)


def _layout(spec: TaskSpec):
    """Validate feasibility and return the per-kind size tuple."""
    L, P = spec.seq_len, spec.kv_pairs
    if spec.kind == "sc":
        if spec.vocab < 3:
            raise ValueError("selective copying needs vocab >= 3")
        room = L - 1 - P
        if room < P:
            raise ValueError(f"seq_len {L} cannot hold {P} content tokens plus their copy")
        return (room,)
    keys, values, _ = _split_vocab(spec)
    if len(keys) < P:
        raise ValueError(f"vocab {spec.vocab} has only {len(keys)} key ids for {P} pairs")
    if len(values) < 1:
        raise ValueError("no value ids left in the vocabulary")
    n_noise = int(round(spec.noise_frac * L)) if spec.kind == "ncr" else 0
    body = L - n_noise - 2 * P
    n_q = (body + 1) // 2 if spec.n_queries is None else spec.n_queries
    if n_q < 1 or 2 * P + 2 * n_q - 1 > L - n_noise:
        raise ValueError(f"seq_len {L} cannot hold {P} pairs, {n_q} queries and {n_noise} noise tokens")
    return n_noise, n_q


def _rng(spec: TaskSpec, step: int, stream: int):
    return np.random.default_rng(np.random.SeedSequence([spec.seed, stream, step]))


def _recall_row(rng, spec: TaskSpec, n_noise: int, n_q: int):
    keys, values, noise = _split_vocab(spec)
    P, L = spec.kv_pairs, spec.seq_len
    k = rng.choice(keys, size=P, replace=False)
    v = rng.choice(values, size=P, replace=True)
    n_units = (L - n_noise + 1) // 2 - P
    qi = rng.integers(0, P, size=n_units)
    units = [(k[i], v[i], -1) for i in range(P)]
    # queries past n_q only pad the sequence and are not supervised
    units += [(k[i], v[i], v[i] if u < n_q else -1) for u, i in enumerate(qi)]
    toks, tgts = [], []
    if n_noise:
        # noise goes into the gaps between units (including both ends)
        slots = np.sort(rng.integers(0, len(units) + 1, size=n_noise))
        fill = rng.choice(noise, size=n_noise)
    else:
        slots = np.zeros(0, dtype=np.int64)
    s = 0
    for u, (kk, vv, tt) in enumerate(units):
        while s < len(slots) and slots[s] == u:
            toks.append(fill[s])
            tgts.append(-1)
            s += 1
        toks += [kk, vv]
        tgts += [tt, -1]
    while s < len(slots):
        toks.append(fill[s])
        tgts.append(-1)
        s += 1
    # an odd body leaves the final query's value off the end; its key stays supervised
    toks, tgts = toks[:L], tgts[:L]
    if len(toks) < L:
        raise AssertionError("recall layout underfilled the sequence")
    return toks, tgts


def _sc_row(rng, spec: TaskSpec, room: int):
    V, P = spec.vocab, spec.kv_pairs
    blank, marker = V - 1, V - 2
    content = rng.integers(0, V - 2, size=P)
    pos = np.sort(rng.choice(room, size=P, replace=False))
    toks = np.full(spec.seq_len, blank, dtype=np.int64)
    toks[pos] = content
    toks[room] = marker
    toks[room + 1:] = content
    tgts = np.full(spec.seq_len, -1, dtype=np.int64)
    tgts[room:room + P] = content
    return toks, tgts


def gen_task(spec: TaskSpec, step: int = 0, stream: int = TRAIN_STREAM):
    """One deterministic batch for ``(seed, stream, step)``."""
    rng = _rng(spec, step, stream)
    tokens = np.empty((spec.batch_size, spec.seq_len), dtype=np.int64)
    targets = np.empty_like(tokens)
    sizes = _layout(spec)
    for b in range(spec.batch_size):
        if spec.kind == "sc":
            t, y = _sc_row(rng, spec, *sizes)
        else:
            t, y = _recall_row(rng, spec, *sizes)
        tokens[b] = t
        targets[b] = y
    return tokens, targets


def eval_batches(spec: TaskSpec, n_batches: int):
    """Fixed held-out batches drawn from the evaluation stream."""
    return [gen_task(spec, i, EVAL_STREAM) for i in range(n_batches)]
