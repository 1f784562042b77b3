"""Closed-form Parallax gradients, dense and streamed.

Starting from the reweighted form ``o_i = sum_j p_ij (1 + tbar_i - t_ij) v_j``
with projections of the upstream gradient

    tau_i = dO_i.o_i   beta_i = dO_i.vbar_i   a_ij = dO_i.v_j   delta_ij = a_ij - beta_i

the query and probe channels get

    g1_ij = p_ij [a_ij - tau_i + (tbar_i - t_ij) delta_ij]     g2_ij = -p_ij delta_ij

and ``dQ = s g1 K``, ``dR = g2 K``, ``dK = s g1^T Q + g2^T R``,
``dV = (p (1 + tbar - t))^T dO`` with ``s`` the logit scale.

``t`` is taken in the key frame (``rho_i.k_j``); only ``tbar - t`` enters,
so the query shift of the regression frame drops out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .family import AttnInputs, parallax_dense, softmax_probs
from .streaming import BackwardCache, TileConfig
from .tensor import NonFiniteError, causal_mask, check_finite

__all__ = [
    "BackwardCache",
    "CacheMismatchError",
    "GradBundle",
    "finite_diff_grad",
    "parallax_dense_backward",
    "parallax_stream_backward",
    "recompute_cache",
    "softmax_dense_backward",
]


class CacheMismatchError(ValueError):
    pass


@dataclass
class GradBundle:
    dq: np.ndarray
    dr: np.ndarray
    dk: np.ndarray
    dv: np.ndarray

    def as_tuple(self):
        return self.dq, self.dr, self.dk, self.dv

    def max_abs_diff(self, other: "GradBundle") -> float:
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(self.as_tuple(), other.as_tuple()))


def recompute_cache(inp: AttnInputs) -> BackwardCache:
    """Build the cache the streaming forward would write, from the dense path."""
    P, m, omega = softmax_probs(inp)
    t = np.einsum("...id,...jd->...ij", inp.r, inp.k)
    return BackwardCache(
        o=parallax_dense(inp, "scoring", frame="k"),
        vbar=P @ inp.v,
        tbar=np.sum(P * t, axis=-1),
        omega=omega,
        m=m,
    )


def _causal_bias(r0, r1, c0, c1):
    """Additive ``0 / -inf`` mask for the tile ``[r0:r1, c0:c1]``."""
    return np.where(causal_mask(r1 - r0, c1 - c0, r0, c0), 0.0, -np.inf)


def _probs_from_cache(S, m, omega, mask):
    P = np.exp(S - m[..., None]) / omega[..., None]
    return np.where(mask, P, 0.0)


def _check_cache(P, t, cache, v, dtype):
    tol = 1e-8 if dtype == np.float64 else 1e-3
    checks = {
        "omega": (P.sum(axis=-1), 1.0),
        "vbar": (P @ v, cache.vbar),
        "tbar": (np.sum(P * t, axis=-1), cache.tbar),
    }
    coef = P * (1.0 + cache.tbar[..., None] - t)
    checks["o"] = (coef @ v, cache.o)
    for name, (got, want) in checks.items():
        err = np.max(np.abs(got - want) / (1.0 + np.abs(want)), initial=0.0)
        if not err <= tol:
            raise CacheMismatchError(f"cache field {name!r} disagrees with the inputs (rel err {err:.2e})")


def _coefficients(P, t, tbar, tau, beta, a):
    delta = a - beta[..., None]
    g1 = P * (a - tau[..., None] + (tbar[..., None] - t) * delta)
    g2 = -P * delta
    return g1, g2


def _f64(*xs):
    return [np.asarray(x, dtype=np.float64) for x in xs]


def parallax_dense_backward(inp: AttnInputs, cache: BackwardCache, dO: np.ndarray, check: bool = True) -> GradBundle:
    """Gradients of a scalar loss w.r.t. Q, R, K, V given ``dL/dO``.

    Softmax weights are rebuilt from the cached ``(m, omega)``. With
    ``check`` the cache is validated against the inputs first. Accumulation
    is in float64; results are cast back to the input dtype.
    """
    dtype = inp.dtype
    q, r, k, v, dO = _f64(inp.q, inp.r, inp.k, inp.v, dO)
    o, vbar, tbar, omega, m = _f64(cache.o, cache.vbar, cache.tbar, cache.omega, cache.m)
    check_finite(dO, "dO")
    mask = inp.mask()
    P = _probs_from_cache(inp.scale * np.einsum("...id,...jd->...ij", q, k), m, omega, mask)
    t = np.einsum("...id,...jd->...ij", r, k)
    if check:
        _check_cache(P, t, BackwardCache(o, vbar, tbar, omega, m), v, np.dtype(dtype))
    tau = np.einsum("...iv,...iv->...i", dO, o)
    beta = np.einsum("...iv,...iv->...i", dO, vbar)
    a = np.einsum("...iv,...jv->...ij", dO, v)
    g1, g2 = _coefficients(P, t, tbar, tau, beta, a)
    g1T, g2T = np.swapaxes(g1, -1, -2), np.swapaxes(g2, -1, -2)
    coef = P * (1.0 + tbar[..., None] - t)
    out = GradBundle(
        dq=inp.scale * g1 @ k,
        dr=g2 @ k,
        dk=inp.scale * g1T @ q + g2T @ r,
        dv=np.swapaxes(coef, -1, -2) @ dO,
    )
    for name, g in zip("QRKV", out.as_tuple()):
        check_finite(g, f"d{name}")
    return GradBundle(*(g.astype(dtype) for g in out.as_tuple()))


def parallax_stream_backward(inp: AttnInputs, cache: BackwardCache, dO: np.ndarray,
                             cfg: TileConfig = TileConfig(), check: bool = True) -> GradBundle:
    """Two-pass tiled backward.

    The row pass walks K/V column blocks for each row block and accumulates
    dQ, dR; the column pass walks Q/R/dO row blocks in reverse for each
    column block and accumulates dK, dV. Softmax tiles are recomputed from
    the cached ``(m, omega)``; no L x L matrix is stored.
    """
    dtype = inp.dtype
    q, r, k, v, dO = _f64(inp.q, inp.r, inp.k, inp.v, dO)
    o, vbar, tbar, omega, m = _f64(cache.o, cache.vbar, cache.tbar, cache.omega, cache.m)
    check_finite(dO, "dO")
    if check:
        # cheap O(L d) consistency probe on the per-row scalars; the full
        # check needs the dense matrix and lives in the dense backward
        if np.any(~(omega > 0)):
            raise CacheMismatchError("cache omega must be positive")
    s = inp.scale
    tau = np.einsum("...iv,...iv->...i", dO, o)
    beta = np.einsum("...iv,...iv->...i", dO, vbar)
    n_q, n_kv = inp.n_q, inp.n_kv
    rows = [(a, min(a + cfg.block_rows, n_q)) for a in range(0, n_q, cfg.block_rows)]
    cols = [(a, min(a + cfg.block_cols, n_kv)) for a in range(0, n_kv, cfg.block_cols)]

    # log of the per-row normalizer folded into the exponent
    shift = m + np.log(omega)
    qs = s * q

    def tile(r0, r1, c0, c1):
        """Recompute one tile. Returns ``(P, tbar - t, g1, -g2)``; the
        second slot is consumed in place by :func:`column_update`."""
        Kc = np.swapaxes(k[..., c0:c1, :], -1, -2)
        P = qs[..., r0:r1, :] @ Kc
        P -= shift[..., r0:r1, None]
        if inp.causal:
            P += _causal_bias(r0, r1, c0, c1)
        np.exp(P, out=P)
        u = r[..., r0:r1, :] @ Kc
        np.subtract(tbar[..., r0:r1, None], u, out=u)
        a = dO[..., r0:r1, :] @ np.swapaxes(v[..., c0:c1, :], -1, -2)
        delta = a - beta[..., r0:r1, None]
        neg_g2 = P * delta
        delta *= u
        a -= tau[..., r0:r1, None]
        a += delta
        a *= P
        return P, u, a, neg_g2

    dq = np.zeros_like(q)
    dr = np.zeros_like(r)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)

    def row_update(r0, r1, c0, c1, g1, neg_g2):
        Kc = k[..., c0:c1, :]
        dq[..., r0:r1, :] += s * (g1 @ Kc)
        dr[..., r0:r1, :] -= neg_g2 @ Kc

    def column_update(r0, r1, c0, c1, P, u, g1, neg_g2):
        u += 1.0
        u *= P
        dk[..., c0:c1, :] += s * (np.swapaxes(g1, -1, -2) @ q[..., r0:r1, :])
        dk[..., c0:c1, :] -= np.swapaxes(neg_g2, -1, -2) @ r[..., r0:r1, :]
        dv[..., c0:c1, :] += np.swapaxes(u, -1, -2) @ dO[..., r0:r1, :]

    if len(rows) == 1:
        # one row block: both passes visit each tile exactly once, in the
        # same order, so a single sweep gives identical sums
        r0, r1 = rows[0]
        for c0, c1 in cols:
            P, u, g1, neg_g2 = tile(r0, r1, c0, c1)
            row_update(r0, r1, c0, c1, g1, neg_g2)
            column_update(r0, r1, c0, c1, P, u, g1, neg_g2)
        rows = cols = []

    for r0, r1 in rows:
        for c0, c1 in cols:
            _, _, g1, neg_g2 = tile(r0, r1, c0, c1)
            row_update(r0, r1, c0, c1, g1, neg_g2)

    for c0, c1 in cols:
        for r0, r1 in reversed(rows):
            column_update(r0, r1, c0, c1, *tile(r0, r1, c0, c1))

    out = GradBundle(dq, dr, dk, dv)
    for name, g in zip("QRKV", out.as_tuple()):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"d{name} is non-finite")
    return GradBundle(*(g.astype(dtype) for g in out.as_tuple()))


def softmax_dense_backward(inp: AttnInputs, dO: np.ndarray):
    """Textbook attention backward, ``(dQ, dK, dV)``."""
    P, _, _ = softmax_probs(inp)
    o = P @ inp.v
    dP = dO @ np.swapaxes(inp.v, -1, -2)
    dS = P * (dP - np.sum(dO * o, axis=-1, keepdims=True))
    dq = inp.scale * dS @ inp.k
    dk = inp.scale * np.swapaxes(dS, -1, -2) @ inp.q
    dv = np.swapaxes(P, -1, -2) @ dO
    return dq, dk, dv


def finite_diff_grad(f, X: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one float64 array."""
    X = np.array(X, dtype=np.float64)
    if X.dtype != np.float64:
        raise TypeError("finite differences are float64 only")
    G = np.zeros_like(X)
    flat = X.reshape(-1)
    gflat = G.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = float(f(X))
        flat[idx] = orig - step
        fm = float(f(X))
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite near element {idx}")
        gflat[idx] = (fp - fm) / (2.0 * step)
    return G
