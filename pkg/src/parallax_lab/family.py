"""Dense quadratic references for the attention family.

Everything here materializes the full score matrix and is meant as ground
truth for the streaming kernel, the backward pass and the diagnostics.
Arrays are ``[..., L, d]``; leading axes are batch/head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, causal_mask, check_finite, safe_softmax_rows, spd_solve

VARIANTS = (
    "value-averaging",
    "affine-linear-attention",
    "affine-mesanet",
    "linear-attention",
    "mesanet",
    "softmax-attention",
    "parallax",
    "lla",
)


@dataclass
class AttnInputs:
    """One attention problem: queries, probes, keys, values.

    ``scale`` multiplies ``q k^T`` and plays the role of the inverse
    bandwidth. ``causal`` masks keys after the query (self-attention); with
    ``causal=False`` every query sees every key, which is the decode setting.
    """

    q: np.ndarray
    r: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: float | None = None
    causal: bool = True

    def __post_init__(self):
        self.q = np.asarray(self.q)
        self.k = np.asarray(self.k)
        self.v = np.asarray(self.v)
        self.r = np.zeros_like(self.q) if self.r is None else np.asarray(self.r)
        if self.scale is None:
            self.scale = self.q.shape[-1] ** -0.5
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.r.shape != self.q.shape:
            raise ValueError(f"probe shape {self.r.shape} != query shape {self.q.shape}")
        if self.k.shape[-1] != self.q.shape[-1]:
            raise ValueError("query and key feature sizes differ")
        if self.k.shape[:-1] != self.v.shape[:-1]:
            raise ValueError("keys and values disagree on sequence length")
        if self.causal and self.q.shape[-2] != self.k.shape[-2]:
            raise ValueError("causal attention needs L_q == L_kv")
        for name in "qrkv":
            check_finite(getattr(self, name), name)

    @property
    def n_q(self) -> int:
        return self.q.shape[-2]

    @property
    def n_kv(self) -> int:
        return self.k.shape[-2]

    @property
    def dtype(self):
        return np.result_type(self.q, self.r, self.k, self.v)

    def mask(self) -> np.ndarray:
        if self.causal:
            return causal_mask(self.n_q, self.n_kv)
        return np.ones((self.n_q, self.n_kv), dtype=bool)

    def with_(self, **kw) -> "AttnInputs":
        d = dict(q=self.q, r=self.r, k=self.k, v=self.v, scale=self.scale, causal=self.causal)
        d.update(kw)
        return AttnInputs(**d)


def logits(inp: AttnInputs) -> np.ndarray:
    return inp.scale * np.einsum("...id,...jd->...ij", inp.q, inp.k)


def softmax_probs(inp: AttnInputs):
    """``(P, m, omega)`` of the scaled, masked logits."""
    return safe_softmax_rows(logits(inp), causal=inp.causal)


def softmax_attention_dense(inp: AttnInputs) -> np.ndarray:
    P, _, _ = softmax_probs(inp)
    return check_finite(P @ inp.v, "softmax attention output")


def kv_covariance(P: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax-weighted cross-covariance ``[..., L_q, d_v, d_k]``."""
    vbar = P @ v
    kbar = P @ k
    second = np.einsum("...ij,...jv,...jk->...ivk", P, v, k)
    return second - np.einsum("...iv,...ik->...ivk", vbar, kbar)


def probe_scores(inp: AttnInputs, P: np.ndarray | None = None, frame: str = "z"):
    """Per-pair probe scores ``t_ij`` and their softmax mean ``tbar_i``.

    ``frame="z"`` uses ``rho_i . (k_j - q_i)``; ``frame="k"`` drops the query
    shift, which cancels in every quantity that depends on ``t - tbar``.
    """
    if P is None:
        P, _, _ = softmax_probs(inp)
    t = np.einsum("...id,...jd->...ij", inp.r, inp.k)
    if frame == "z":
        t = t - np.einsum("...id,...id->...i", inp.r, inp.q)[..., None]
    elif frame != "k":
        raise ValueError(f"unknown frame {frame!r}")
    tbar = np.sum(P * t, axis=-1)
    return t, tbar


def parallax_weights(inp: AttnInputs, frame: str = "z") -> np.ndarray:
    """Signed per-token weights ``s_ij = p_ij (1 - t_ij + tbar_i)``; rows sum to 1."""
    P, _, _ = softmax_probs(inp)
    t, tbar = probe_scores(inp, P, frame)
    return np.where(inp.mask(), P * (1.0 - t + tbar[..., None]), 0.0)


def parallax_dense(inp: AttnInputs, mode: str = "covariance", frame: str = "z") -> np.ndarray:
    """Parallax output through one of three algebraically equal routes.

    scoring     sum_j p_ij (1 - t_ij + tbar_i) v_j
    covariance  o_SA - Sigma_KV rho
    expanded    o_SA (1 + sum_j p_ij k_j.rho) - sum_j (p_ij k_j.rho) v_j
    """
    P, _, _ = softmax_probs(inp)
    if mode == "scoring":
        t, tbar = probe_scores(inp, P, frame)
        out = (P * (1.0 - t + tbar[..., None])) @ inp.v
    elif mode == "covariance":
        cov = kv_covariance(P, inp.k, inp.v)
        out = P @ inp.v - np.einsum("...ivk,...ik->...iv", cov, inp.r)
    elif mode == "expanded":
        comp = P * np.einsum("...id,...jd->...ij", inp.r, inp.k)
        out = (P @ inp.v) * (1.0 + comp.sum(axis=-1))[..., None] - comp @ inp.v
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return check_finite(out, f"parallax ({mode}) output")


@dataclass
class LocalStats:
    """Per-query kernel-regression statistics of exact LLA.

    Quantities carrying kernel mass (``omega``, ``mu``, ``Sigma``, ``A``) are
    stored in the max-shifted frame ``w_ij * exp(-m_i)``; ``lam_frame`` is the
    ridge expressed in that same frame so that ``Sigma = A + omega zbar zbar^T``
    holds exactly.
    """

    zbar: np.ndarray
    mu: np.ndarray
    omega: np.ndarray
    Sigma: np.ndarray
    A: np.ndarray
    Sigma_kv: np.ndarray
    vbar: np.ndarray
    kbar: np.ndarray
    tbar: np.ndarray
    m: np.ndarray
    lam_frame: np.ndarray


def lla_exact_dense(inp: AttnInputs, lam: float, shift: bool = True):
    """Exact local linear attention with a direct SPD solve per query.

    Returns ``(O, rho_star, stats)``. With ``shift=True`` the kernel weights
    are max-shifted per row and the ridge is rescaled by the same factor, so
    ``rho_star`` is identical to the unshifted definition.
    """
    if not lam > 0:
        raise ValueError(f"ridge must be positive, got {lam}")
    S = logits(inp)
    mask = inp.mask()
    S = np.where(mask, S, -np.inf)
    m = S.max(axis=-1) if shift else np.zeros(S.shape[:-1])
    w = np.exp(S - m[..., None])
    check_finite(w, "kernel weights")
    omega = w.sum(axis=-1)
    z = inp.k[..., None, :, :] - inp.q[..., :, None, :]  # [..., i, j, d]
    mu = np.einsum("...ij,...ijd->...id", w, z)
    d = inp.q.shape[-1]
    lam_frame = lam * np.exp(-m)
    Szz = np.einsum("...ij,...ijd,...ije->...ide", w, z, z)
    Sigma = Szz + lam_frame[..., None, None] * np.eye(d)
    rho = spd_solve(Sigma, mu)
    denom = omega - np.einsum("...id,...id->...i", mu, rho)
    if np.any(denom <= 1e-12 * omega):
        raise NonFiniteError("LLA denominator omega - mu.rho collapsed; ridge solve is inconsistent")
    coef = w * (1.0 - np.einsum("...ijd,...id->...ij", z, rho))
    out = check_finite((coef / denom[..., None]) @ inp.v, "LLA output")

    P = w / omega[..., None]
    zbar = mu / omega[..., None]
    A = Sigma - omega[..., None, None] * np.einsum("...id,...ie->...ide", zbar, zbar)
    stats = LocalStats(
        zbar=zbar, mu=mu, omega=omega, Sigma=Sigma, A=A,
        Sigma_kv=kv_covariance(P, inp.k, inp.v), vbar=P @ inp.v, kbar=P @ inp.k,
        tbar=np.einsum("...id,...id->...i", mu, rho) / omega, m=m, lam_frame=lam_frame,
    )
    return out, rho, stats


def lla_eta(stats: LocalStats):
    """Boundary amplification two ways: ``tbar / (1 - tbar)`` and the
    quadratic form ``omega zbar^T A^{-1} zbar``."""
    tbar = stats.tbar
    if np.any(tbar >= 1.0):
        raise ValueError("tbar >= 1: the probe is not the exact ridge solution")
    eta_direct = tbar / (1.0 - tbar)
    eta_quad = stats.omega * np.einsum("...d,...d->...", stats.zbar, spd_solve(stats.A, stats.zbar))
    return eta_direct, eta_quad


def uniform_moments(inp: AttnInputs, lam: float = 0.0):
    """Uniform running statistics over visible keys.

    Returns ``(vbar, kbar, S, H)`` with ``S = mean v k^T`` and
    ``H = mean k k^T + lam I``. ``lam`` may also be one ridge per query.
    """
    W = inp.mask().astype(inp.dtype)
    W = W / W.sum(axis=-1, keepdims=True)
    vbar = W @ inp.v
    kbar = W @ inp.k
    S = np.einsum("ij,...jv,...jk->...ivk", W, inp.v, inp.k)
    lam = np.asarray(lam, dtype=np.float64)[..., None, None]
    H = np.einsum("ij,...ja,...jb->...iab", W, inp.k, inp.k) + lam * np.eye(inp.k.shape[-1])
    return vbar, kbar, S, H


def family_limit_eval(variant: str, inp: AttnInputs, lam: float = 1.0) -> np.ndarray:
    """Evaluate one member of the attention family.

    The uniform-weight rows use running averages over visible keys; the
    centered variants subtract the running means. ``lam`` is the ridge in
    ``H`` (and therefore in the centered ``H``) and in exact LLA.
    """
    if variant == "softmax-attention":
        return softmax_attention_dense(inp)
    if variant == "parallax":
        return parallax_dense(inp)
    if variant == "lla":
        return lla_exact_dense(inp, lam)[0]
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")

    vbar, kbar, S, H = uniform_moments(inp, lam)
    if variant == "value-averaging":
        out = vbar
    elif variant == "affine-linear-attention":
        S_c = S - np.einsum("...iv,...ik->...ivk", vbar, kbar)
        out = vbar - np.einsum("...ivk,...ik->...iv", S_c, inp.r)
    elif variant == "affine-mesanet":
        S_c = S - np.einsum("...iv,...ik->...ivk", vbar, kbar)
        H_c = H - np.einsum("...ia,...ib->...iab", kbar, kbar)
        probe = spd_solve(H_c, kbar - inp.q)
        out = vbar - np.einsum("...ivk,...ik->...iv", S_c, probe)
    elif variant == "linear-attention":
        out = np.einsum("...ivk,...ik->...iv", S, inp.r)
    else:  # mesanet
        out = np.einsum("...ivk,...ik->...iv", S, spd_solve(H, inp.q))
    return check_finite(out, variant)
