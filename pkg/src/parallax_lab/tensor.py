"""Small dense numerics shared by every other module.

Arrays are plain row-major numpy arrays; higher modules index them as
``[batch, head, seq, dim]``. Every public function here rejects non-finite
input instead of propagating NaN/Inf.
"""

from __future__ import annotations

import math

import numpy as np

RMS_EPS = 1e-6
ROPE_BASE = 1e6

_DTYPES = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot} is {value:.3e}")
        self.pivot = pivot
        self.value = value


class RankDeficientError(np.linalg.LinAlgError):
    pass


def as_dtype(name: str):
    """Map ``"f32"``/``"f64"`` to a numpy dtype."""
    try:
        return _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected f32 or f64") from None


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.asarray(x)))
        raise NonFiniteError(f"{what} has non-finite entries (first at index {tuple(bad[0])})")
    return x


def causal_mask(n_q: int, n_kv: int, q_offset: int = 0, kv_offset: int = 0) -> np.ndarray:
    """Boolean ``[n_q, n_kv]`` mask, True where key index <= query index."""
    qi = np.arange(q_offset, q_offset + n_q)[:, None]
    kj = np.arange(kv_offset, kv_offset + n_kv)[None, :]
    return kj <= qi


def safe_softmax_rows(S: np.ndarray, causal: bool = False):
    """Max-shifted softmax over the last axis.

    Returns ``(P, m, omega)`` where ``m`` is the row max of the masked logits
    and ``omega = sum_j exp(S_ij - m_i)`` is the unnormalized mass in the
    shifted frame. Leading axes are treated as batch.
    """
    S = np.asarray(S)
    check_finite(S, "logits")
    if causal:
        if S.shape[-1] != S.shape[-2]:
            raise ValueError("causal softmax needs square logits")
        mask = causal_mask(S.shape[-2], S.shape[-1])
        S = np.where(mask, S, -np.inf)
    m = S.max(axis=-1)
    E = np.exp(S - m[..., None])
    omega = E.sum(axis=-1)
    return E / omega[..., None], m, omega


def _cholesky(A: np.ndarray) -> np.ndarray:
    d = A.shape[-1]
    L = np.zeros_like(A)
    for j in range(d):
        piv = A[..., j, j] - np.einsum("...k,...k->...", L[..., j, :j], L[..., j, :j])
        if np.any(~(piv > 0)):
            idx = np.argwhere(~(piv > 0).reshape(-1))[0, 0]
            raise NotPositiveDefiniteError(j, float(piv.reshape(-1)[idx]))
        L[..., j, j] = np.sqrt(piv)
        if j + 1 < d:
            below = A[..., j + 1:, j] - np.einsum("...ik,...k->...i", L[..., j + 1:, :j], L[..., j, :j])
            L[..., j + 1:, j] = below / L[..., j, j][..., None]
    return L


def spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` by Cholesky.

    Batched over leading axes. Raises :class:`NotPositiveDefiniteError`
    carrying the index of the first non-positive pivot.
    """
    A = np.asarray(A)
    b = np.asarray(b)
    check_finite(A, "A")
    check_finite(b, "b")
    L = _cholesky(A)
    d = A.shape[-1]
    y = np.zeros(np.broadcast_shapes(A.shape[:-1], b.shape), dtype=np.result_type(A, b))
    for i in range(d):
        acc = b[..., i] - np.einsum("...k,...k->...", L[..., i, :i], y[..., :i])
        y[..., i] = acc / L[..., i, i]
    x = np.zeros_like(y)
    for i in reversed(range(d)):
        acc = y[..., i] - np.einsum("...k,...k->...", L[..., i + 1:, i], x[..., i + 1:])
        x[..., i] = acc / L[..., i, i]
    return x


def jacobi_eigh(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of small symmetric matrices.

    Accepts ``[..., n, n]`` and rotates every matrix of the batch in lockstep.
    Returns ``(w, V)`` with ascending eigenvalues and ``A = V diag(w) V^T``.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError("jacobi_eigh needs square matrices")
    check_finite(A, "A")
    n = A.shape[-1]
    lead = A.shape[:-2]
    A = A.reshape(-1, n, n).copy()
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    scale = np.maximum(np.linalg.norm(A, axis=(-2, -1)), 1e-300)
    diag = np.arange(n)
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.where(offdiag, A * A, 0.0), axis=(-2, -1)))
        if np.all(off <= tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[:, p, q]
                live = np.abs(apq) > 1e-300
                if not np.any(live):
                    continue
                safe = np.where(live, apq, 1.0)
                theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                big = np.abs(theta) > 1e150
                th = np.where(big, 1.0, theta)
                t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                             np.copysign(1.0, th) / (np.abs(th) + np.sqrt(th * th + 1.0)))
                t = np.where(live, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                c2, s2 = c[:, None], sn[:, None]
                ap = A[:, :, p].copy()
                aq = A[:, :, q].copy()
                A[:, :, p] = c2 * ap - s2 * aq
                A[:, :, q] = s2 * ap + c2 * aq
                ap = A[:, p, :].copy()
                aq = A[:, q, :].copy()
                A[:, p, :] = c2 * ap - s2 * aq
                A[:, q, :] = s2 * ap + c2 * aq
                vp = V[:, :, p].copy()
                vq = V[:, :, q].copy()
                V[:, :, p] = c2 * vp - s2 * vq
                V[:, :, q] = s2 * vp + c2 * vq
    w = A[:, diag, diag]
    order = np.argsort(w, axis=-1)
    w = np.take_along_axis(w, order, axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    return w.reshape(lead + (n,)), V.reshape(lead + (n, n))


def sym_eigh(A: np.ndarray):
    """Batched symmetric eigendecomposition: Jacobi up to 32x32, LAPACK above."""
    if A.shape[-1] <= 32:
        return jacobi_eigh(A)
    return np.linalg.eigh(np.asarray(A, dtype=np.float64))


def sym_inv_sqrt(A: np.ndarray) -> np.ndarray:
    """``A^{-1/2}`` for symmetric positive definite ``A`` (batched)."""
    w, V = sym_eigh(A)
    if np.any(w[..., 0] <= 0):
        raise NotPositiveDefiniteError(0, float(np.min(w[..., 0])))
    return (V / np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def polar_oracle(B: np.ndarray) -> np.ndarray:
    """Exact polar factor ``U V^T`` of a full-rank matrix (test scale only).

    Computed as ``B (B^T B)^{-1/2}`` (or ``(B B^T)^{-1/2} B`` for wide input)
    through :func:`jacobi_eigh`.
    """
    B = np.asarray(B, dtype=np.float64)
    check_finite(B, "B")
    m, n = B.shape
    if min(m, n) > 32:
        raise ValueError("polar_oracle is limited to min(m, n) <= 32")
    wide = m < n
    G = B @ B.T if wide else B.T @ B
    w, V = jacobi_eigh(G)
    if w[0] <= 1e-10 * max(w[-1], 1e-300):
        raise RankDeficientError(f"matrix is rank deficient (eigenvalue ratio {w[0] / max(w[-1], 1e-300):.2e})")
    inv_sqrt = (V / np.sqrt(w)) @ V.T
    return inv_sqrt @ B if wide else B @ inv_sqrt


def rmsnorm(x: np.ndarray, gamma: np.ndarray | None = None, eps: float = RMS_EPS) -> np.ndarray:
    x = np.asarray(x)
    y = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return y if gamma is None else y * gamma


def rmsnorm_backward(x, gamma, dy, eps: float = RMS_EPS):
    """Adjoint of :func:`rmsnorm`. Returns ``(dx, dgamma)``; gamma is
    reduced over every leading axis."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    g = dy if gamma is None else dy * gamma
    dx = inv * (g - xhat * np.sum(g * xhat, axis=-1, keepdims=True) / d)
    dgamma = None if gamma is None else np.sum((dy * xhat).reshape(-1, d), axis=0)
    return dx, dgamma


def rope_angles(n_pos: int, d: int, base: float = ROPE_BASE, offset: int = 0) -> np.ndarray:
    """``[n_pos, d/2]`` rotation angles ``pos * base^(-2k/d)``."""
    if d % 2:
        raise ValueError(f"RoPE needs an even feature dimension, got {d}")
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pos = np.arange(offset, offset + n_pos, dtype=np.float64)
    return pos[:, None] * inv_freq[None, :]


def rope_apply(X: np.ndarray, base: float = ROPE_BASE, offset: int = 0, inverse: bool = False) -> np.ndarray:
    """Rotate interleaved feature pairs ``(2k, 2k+1)`` of ``X[..., L, d]``.

    ``(x0, x1) -> (x0 cos a - x1 sin a, x0 sin a + x1 cos a)``. ``inverse``
    applies the transpose rotation, which is also the adjoint.
    """
    X = np.asarray(X)
    L, d = X.shape[-2], X.shape[-1]
    ang = rope_angles(L, d, base, offset)
    cos = np.cos(ang).astype(X.dtype)
    sin = np.sin(ang).astype(X.dtype)
    if inverse:
        sin = -sin
    x0 = X[..., 0::2]
    x1 = X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def spectral_norm(X: np.ndarray, rtol: float = 1e-6, max_iter: int = 500) -> float:
    """Largest singular value by power iteration on ``X^T X``."""
    X = np.asarray(X, dtype=np.float64)
    G = X.T @ X if X.shape[0] >= X.shape[1] else X @ X.T
    v = np.random.default_rng(0).standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= rtol * abs(new):
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


def stable_rank(X: np.ndarray, rtol: float = 1e-6, max_iter: int = 500) -> float:
    """``||X||_F^2 / ||X||_2^2``."""
    X = np.asarray(X, dtype=np.float64)
    check_finite(X, "X")
    fro2 = float(np.sum(X * X))
    if fro2 == 0.0:
        raise ValueError("stable rank of a zero matrix is undefined")
    s = spectral_norm(X, rtol=rtol, max_iter=max_iter)
    return fro2 / (s * s)
