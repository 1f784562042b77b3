"""Probe-utilization, score-structure and weight-spectrum diagnostics.

Per-query metrics take an :class:`AttnInputs` with any leading axes and
return arrays shaped like ``q[..., :, 0]``.

  cor       ||Sigma_KV rho|| / ||o_SA||
  corr      ||Sigma_VV^{-1/2} Sigma_KV Sigma_KK^{-1/2}||_F
  cpa       ||Sigma_KV rho|| / (||rho|| ||Sigma_KV||_2), 0 where rho = 0
  sink_sa   p_i1
  sink_plx  s_i1^2 / sum_j s_ij^2
  entropy   -sum_j p_ij ln p_ij
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .family import AttnInputs, kv_covariance, parallax_weights, softmax_probs
from .model import ModelConfig, forward
from .tensor import NonFiniteError, stable_rank, sym_eigh, sym_inv_sqrt

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
PROBE_METRICS = ("cor", "cpa", "rho_norm", "sink_plx", "s_min", "s_max")
SHARED_METRICS = ("corr", "sink_sa", "entropy")
CIRCUITS = ("W_Q", "W_K", "W_V", "W_O", "W_R", "W_QK", "W_OV", "W_RK")


def probe_correction(inp: AttnInputs, P=None) -> np.ndarray:
    """``Sigma_KV rho`` per query, as ``sum_j p_ij (t_ij - tbar_i) v_j``."""
    if P is None:
        P, _, _ = softmax_probs(inp)
    t = np.einsum("...id,...jd->...ij", inp.r, inp.k)
    tbar = np.sum(P * t, axis=-1, keepdims=True)
    return (P * (t - tbar)) @ inp.v


def cor(inp: AttnInputs) -> np.ndarray:
    P, _, _ = softmax_probs(inp)
    o_sa = np.linalg.norm(P @ inp.v, axis=-1)
    if np.any(o_sa == 0):
        raise NonFiniteError("softmax output has zero norm; COR is undefined there")
    return np.linalg.norm(probe_correction(inp, P), axis=-1) / o_sa


def _default_jitter(C, second):
    d = C.shape[-1]
    # the relative term regularizes; the second-moment term sits above the
    # round-off left in C after centering
    return (1e-6 * np.trace(C, axis1=-2, axis2=-1) + 1e-12 * second) / d


def _weighted_cov(P, X, Y):
    """Softmax-weighted cross-covariance ``[..., L_q, d_x, d_y]``."""
    return kv_covariance(P, Y, X)


def corr_matrix(inp: AttnInputs, jitter: float | None = None) -> np.ndarray:
    """Whitened cross-covariance ``Sigma_VV^{-1/2} Sigma_KV Sigma_KK^{-1/2}``.

    ``jitter=None`` adds ``1e-6 * trace / d`` (plus a round-off floor) to each
    diagonal; a number adds that constant.
    """
    P, _, _ = softmax_probs(inp)
    S_kv = kv_covariance(P, inp.k, inp.v)
    # a query whose visible keys (or values) coincide has zero covariance up
    # to round-off; its correlation is defined as zero rather than left undefined
    degenerate = np.zeros(S_kv.shape[:-2], dtype=bool)
    out = []
    for X in (inp.v, inp.k):
        C = _weighted_cov(P, X, X)
        second = np.einsum("...ij,...j->...i", P, np.sum(X * X, axis=-1))
        tr = np.trace(C, axis1=-2, axis2=-1)
        j = _default_jitter(C, second) if jitter is None else np.full(C.shape[:-2], float(jitter))
        degenerate |= (tr <= 1e-12 * second) | (tr + j <= 0)
        out.append(C + j[..., None, None] * np.eye(C.shape[-1]))
    eye = [np.eye(C.shape[-1]) for C in out]
    out = [np.where(degenerate[..., None, None], I, C) for C, I in zip(out, eye)]
    corr = sym_inv_sqrt(out[0]) @ S_kv @ sym_inv_sqrt(out[1])
    return np.where(degenerate[..., None, None], 0.0, corr)


def spectral_norm_batched(X: np.ndarray) -> np.ndarray:
    """Exact largest singular value of each matrix in a batch."""
    X = np.asarray(X, dtype=np.float64)
    G = np.swapaxes(X, -1, -2) @ X if X.shape[-2] >= X.shape[-1] else X @ np.swapaxes(X, -1, -2)
    w, _ = sym_eigh(G)
    return np.sqrt(np.maximum(w[..., -1], 0.0))


def corr_cpa(inp: AttnInputs, jitter: float | None = None):
    """``(||Corr_i||_F, CPA_i)`` per query."""
    P, _, _ = softmax_probs(inp)
    corr_fro = np.linalg.norm(corr_matrix(inp, jitter), axis=(-2, -1))
    S_kv = kv_covariance(P, inp.k, inp.v)
    num = np.linalg.norm(probe_correction(inp, P), axis=-1)
    den = np.linalg.norm(inp.r, axis=-1) * spectral_norm_batched(S_kv)
    cpa = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return corr_fro, cpa


def sink_entropy_range(inp: AttnInputs) -> dict:
    P, _, _ = softmax_probs(inp)
    s = parallax_weights(inp, frame="k")
    mask = inp.mask()
    plogp = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    s2 = s * s
    return {
        "sink_sa": P[..., 0],
        "sink_plx": s2[..., 0] / s2.sum(axis=-1),
        "entropy": -plogp.sum(axis=-1),
        "s_min": np.where(mask, s, np.inf).min(axis=-1),
        "s_max": np.where(mask, s, -np.inf).max(axis=-1),
    }


def _srank_or_none(X):
    if not np.any(X):
        return None
    return stable_rank(X)


def weight_spectra(params: dict, cfg: ModelConfig) -> list[dict]:
    """Stable ranks per layer: whole projections plus per-head bilinear
    circuits ``W_Q^h^T W_K^h``, ``W_O^h W_V^h``, ``W_R^h^T W_K^h`` averaged
    over heads. Missing or all-zero matrices are reported as ``None``."""
    dh = cfg.d_head
    table = []
    for i in range(cfg.layers):
        p = f"l{i}."
        get = params.get
        row = {"layer": i}
        for name, key in (("W_Q", "wq"), ("W_K", "wk"), ("W_V", "wv"), ("W_O", "wo"), ("W_R", "wr")):
            W = get(p + key)
            row[name] = None if W is None else _srank_or_none(W)
        heads = [slice(h * dh, (h + 1) * dh) for h in range(cfg.heads)]
        wq, wk, wv, wo, wr = (get(p + k) for k in ("wq", "wk", "wv", "wo", "wr"))

        def circuit(make):
            vals = [_srank_or_none(make(h)) for h in heads]
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else None

        row["W_QK"] = circuit(lambda h: wq[h].T @ wk[h])
        row["W_OV"] = circuit(lambda h: wo[:, h] @ wv[h])
        row["W_RK"] = None if wr is None else circuit(lambda h: wr[h].T @ wk[h])
        table.append(row)
    return table


def quantiles(x) -> list[float]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        return [float("nan")] * len(QUANTILES)
    return [float(v) for v in np.quantile(x, QUANTILES)]


@dataclass
class DiagReport:
    """Long-format metric rows plus per-layer weight spectra."""

    rows: dict = field(default_factory=dict)
    spectra: list = field(default_factory=list)

    def add(self, metric, layer, head, bucket, values):
        for qv, val in zip(QUANTILES, quantiles(values)):
            self.rows.setdefault(metric, []).append((layer, head, bucket, qv, val))

    def summary(self) -> dict:
        out = {}
        for metric, rows in self.rows.items():
            med = [v for (_, head, bucket, qv, v) in rows if head == "all" and bucket == "all" and qv == 0.5]
            out[metric] = {"median_by_layer": med}
        out["spectra"] = self.spectra
        return out


def _buckets(L: int, n: int):
    edges = np.linspace(0, L, n + 1).round().astype(int)
    return [(f"{a}-{b - 1}", slice(a, b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def layer_metrics(inp: AttnInputs, probe: bool, jitter: float | None = None) -> dict:
    """Every per-query metric for one layer, each ``[B, H, L]``."""
    out = {}
    if probe:
        out["cor"] = cor(inp)
        corr_fro, out["cpa"] = corr_cpa(inp, jitter)
        out["rho_norm"] = np.linalg.norm(inp.r, axis=-1)
    else:
        corr_fro = np.linalg.norm(corr_matrix(inp, jitter), axis=(-2, -1))
    out["corr"] = corr_fro
    ser = sink_entropy_range(inp)
    for k in ("sink_sa", "entropy"):
        out[k] = ser[k]
    if probe:
        for k in ("sink_plx", "s_min", "s_max"):
            out[k] = ser[k]
    return out


def model_diagnostics(params: dict, cfg: ModelConfig, tokens: np.ndarray,
                      metrics=None, jitter: float | None = None, n_buckets: int = 4) -> DiagReport:
    """Run the model on ``tokens`` and summarize each metric per layer, per
    head and per position bucket (plus ``all``) at fixed quantiles.

    ``metrics`` may also name weight circuits (``W_RK`` etc.) to assert they
    exist; probe metrics and the ``W_R`` circuits on a softmax model raise.
    """
    probe = cfg.has_probe
    allowed = SHARED_METRICS + (PROBE_METRICS if probe else ())
    circuits = CIRCUITS if probe else tuple(c for c in CIRCUITS if "R" not in c[2:])
    metrics = tuple(allowed) if metrics is None else tuple(metrics)
    for m in metrics:
        if m not in SHARED_METRICS + PROBE_METRICS + CIRCUITS:
            raise ValueError(f"unknown metric {m!r}")
        if m not in allowed + circuits:
            raise ValueError(f"metric {m!r} needs a parallax checkpoint; this one uses {cfg.mixer}")
    # circuit names select nothing extra: spectra are always reported
    metrics = tuple(m for m in metrics if m not in CIRCUITS)
    _, tape = forward(params, cfg, tokens)
    rep = DiagReport()
    buckets = _buckets(tokens.shape[1], n_buckets)
    for li, t in enumerate(tape["blocks"]):
        inp = t["inp"]
        inp = inp.with_(**{k: np.asarray(getattr(inp, k), dtype=np.float64) for k in "qrkv"})
        vals = layer_metrics(inp, probe, jitter)
        for m in metrics:
            x = vals[m]
            rep.add(m, li, "all", "all", x)
            for h in range(cfg.heads):
                rep.add(m, li, h, "all", x[:, h])
            for name, sl in buckets:
                rep.add(m, li, "all", name, x[..., sl])
    rep.spectra = weight_spectra(params, cfg)
    return rep


def probe_snapshot(params: dict, cfg: ModelConfig, tokens: np.ndarray) -> list[dict]:
    """Per-layer COR / CPA / probe-norm quantiles for training-time logging."""
    if not cfg.has_probe:
        return []
    _, tape = forward(params, cfg, tokens)
    out = []
    for li, t in enumerate(tape["blocks"]):
        inp = t["inp"]
        inp = inp.with_(**{k: np.asarray(getattr(inp, k), dtype=np.float64) for k in "qrkv"})
        P, _, _ = softmax_probs(inp)
        corr_num = np.linalg.norm(probe_correction(inp, P), axis=-1)
        S_kv = kv_covariance(P, inp.k, inp.v)
        rn = np.linalg.norm(inp.r, axis=-1)
        den = rn * spectral_norm_batched(S_kv)
        cpa = np.divide(corr_num, den, out=np.zeros_like(corr_num), where=den > 0)
        out.append({
            "layer": li,
            "cor": quantiles(corr_num / np.linalg.norm(P @ inp.v, axis=-1)),
            "cpa": quantiles(cpa),
            "rho_norm": quantiles(rn),
        })
    return out
