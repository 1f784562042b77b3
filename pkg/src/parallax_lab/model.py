"""A small pre-norm transformer with a swappable attention mixer.

Parameters live in a flat ``{name: array}`` dict; layer ``i`` uses the
prefix ``l{i}.``. Projections are stored ``(out, in)`` and applied as
``x @ W.T``. Gradients come from a hand-written reverse pass over the fixed
graph: embedding, RMSNorm, projections, per-head q/k/probe RMSNorm, RoPE,
optional sigmoid probe gate, attention, SwiGLU MLP, tied LM head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import parallax_stream_backward, softmax_dense_backward
from .family import AttnInputs
from .streaming import TileConfig, parallax_stream_forward, softmax_stream_forward
from .tensor import ROPE_BASE, check_finite, rmsnorm, rmsnorm_backward, rope_apply

MIXERS = ("softmax", "parallax")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 128
    heads: int = 4
    d_head: int | None = None
    vocab: int = 16
    seq_len: int = 64
    mixer: str = "parallax"
    rope_on_rho: bool = False
    gate: bool = False
    tie_embeddings: bool = True
    mlp_ratio: float = 4.0
    attn_scale: float | None = None
    rope_base: float = ROPE_BASE
    init_std: float = 0.02
    wr_init: str = "normal"
    block_rows: int = 64
    block_cols: int = 64

    def __post_init__(self):
        if self.mixer not in MIXERS:
            raise ValueError(f"unknown mixer {self.mixer!r}; expected one of {MIXERS}")
        if self.wr_init not in ("normal", "zero"):
            raise ValueError("wr_init must be 'normal' or 'zero'")
        if self.d_head is None:
            if self.d_model % self.heads:
                raise ValueError("d_model must be divisible by heads when d_head is not given")
            object.__setattr__(self, "d_head", self.d_model // self.heads)
        if self.d_head % 2:
            raise ValueError("d_head must be even for RoPE")
        if min(self.layers, self.d_model, self.heads, self.vocab, self.seq_len) < 1:
            raise ValueError("sizes must be positive")

    @property
    def inner(self) -> int:
        return self.heads * self.d_head

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.d_model)))

    @property
    def scale(self) -> float:
        return self.attn_scale if self.attn_scale is not None else self.d_head ** -0.5

    @property
    def has_probe(self) -> bool:
        return self.mixer == "parallax"

    @property
    def has_gate(self) -> bool:
        return self.has_probe and self.gate

    def tiles(self) -> TileConfig:
        return TileConfig(block_rows=self.block_rows, block_cols=self.block_cols)


def _trunc_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return std * x


def param_shapes(cfg: ModelConfig) -> dict:
    D, I, F = cfg.d_model, cfg.inner, cfg.hidden
    shapes = {"embed": (cfg.vocab, D)}
    for i in range(cfg.layers):
        p = f"l{i}."
        shapes.update({
            p + "norm1": (D,), p + "wq": (I, D), p + "wk": (I, D), p + "wv": (I, D), p + "wo": (D, I),
            p + "qnorm": (cfg.d_head,), p + "knorm": (cfg.d_head,),
            p + "norm2": (D,), p + "w_gate": (F, D), p + "w_up": (F, D), p + "w_down": (D, F),
        })
        if cfg.has_probe:
            shapes[p + "wr"] = (I, D)
            shapes[p + "rnorm"] = (cfg.d_head,)
        if cfg.has_gate:
            shapes[p + "wg"] = (cfg.heads, D)
    shapes["final_norm"] = (D,)
    if not cfg.tie_embeddings:
        shapes["head"] = (cfg.vocab, D)
    return shapes


def param_groups(cfg: ModelConfig) -> dict:
    """Optimizer routing: 2-D projections are ``matrix``; embeddings and the
    untied head are ``embed``; norm gains and the gate weights are ``norm``."""
    groups = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if name in ("embed", "head"):
            groups[name] = "embed"
        elif len(shape) == 1 or leaf == "wg":
            groups[name] = "norm"
        else:
            groups[name] = "matrix"
    return groups


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if len(shape) == 1:
            params[name] = np.ones(shape)
        elif leaf == "wg":
            params[name] = np.zeros(shape)
        else:
            # draw even for a zero W_R so every other weight matches across switches
            w = _trunc_normal(rng, shape, cfg.init_std)
            params[name] = np.zeros(shape) if leaf == "wr" and cfg.wr_init == "zero" else w
    return {k: v.astype(dtype) for k, v in params.items()}


def check_params(params: dict, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ValueError(f"parameter names do not match the config (missing {missing}, extra {extra})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")


def _split(t, heads):
    B, L, _ = t.shape
    return t.reshape(B, L, heads, -1).transpose(0, 2, 1, 3)


def _merge(t):
    B, H, L, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _wgrad(dy, x):
    """``sum over rows of dy^T x`` for ``y = x @ W.T``."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _layer(params, i):
    p = f"l{i}."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def block_forward(x: np.ndarray, p: dict, cfg: ModelConfig):
    """One residual block. ``p`` holds this layer's parameters without the
    ``l{i}.`` prefix. Returns ``(out, tape)``."""
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"block input must be [batch, seq, {cfg.d_model}], got {x.shape}")
    H = cfg.heads
    h = rmsnorm(x, p["norm1"])
    qp, kp, v = (_split(h @ p[w].T, H) for w in ("wq", "wk", "wv"))
    q = rope_apply(rmsnorm(qp, p["qnorm"]), cfg.rope_base)
    k = rope_apply(rmsnorm(kp, p["knorm"]), cfg.rope_base)
    tape = dict(x=x, h=h, qp=qp, kp=kp)
    if cfg.has_probe:
        rp = _split(h @ p["wr"].T, H)
        r = rmsnorm(rp, p["rnorm"])
        if cfg.rope_on_rho:
            r = rope_apply(r, cfg.rope_base)
        tape.update(rp=rp, r_ungated=r)
        if cfg.has_gate:
            g = _sigmoid(h @ p["wg"].T).transpose(0, 2, 1)[..., None]
            r = r * g
            tape["g"] = g
    else:
        r = np.zeros_like(q)
    inp = AttnInputs(q, r, k, v, scale=cfg.scale, causal=True)
    if cfg.has_probe:
        O, cache, _ = parallax_stream_forward(inp, cfg.tiles())
        tape["cache"] = cache
    else:
        O, _ = softmax_stream_forward(inp, cfg.tiles())
    Om = _merge(O)
    x2 = x + Om @ p["wo"].T
    h2 = rmsnorm(x2, p["norm2"])
    u = h2 @ p["w_gate"].T
    w = h2 @ p["w_up"].T
    sg = _sigmoid(u)
    mm = u * sg * w
    out = x2 + mm @ p["w_down"].T
    tape.update(inp=inp, Om=Om, x2=x2, h2=h2, u=u, w=w, sg=sg, mm=mm)
    return out, tape


def block_backward(dout: np.ndarray, tape: dict, p: dict, cfg: ModelConfig):
    """Adjoint of :func:`block_forward`. Returns ``(dx, grads)``."""
    g = {}
    dx2 = dout.copy()
    g["w_down"] = _wgrad(dout, tape["mm"])
    dmm = dout @ p["w_down"]
    u, w, sg = tape["u"], tape["w"], tape["sg"]
    dw = dmm * u * sg
    du = dmm * w * sg * (1.0 + u * (1.0 - sg))
    g["w_gate"] = _wgrad(du, tape["h2"])
    g["w_up"] = _wgrad(dw, tape["h2"])
    dh2 = du @ p["w_gate"] + dw @ p["w_up"]
    dn, g["norm2"] = rmsnorm_backward(tape["x2"], p["norm2"], dh2)
    dx2 += dn

    g["wo"] = _wgrad(dx2, tape["Om"])
    dO = _split(dx2 @ p["wo"], cfg.heads)
    inp = tape["inp"]
    if cfg.has_probe:
        gb = parallax_stream_backward(inp, tape["cache"], dO, cfg.tiles(), check=False)
        dq, dr, dk, dv = gb.as_tuple()
    else:
        dq, dk, dv = softmax_dense_backward(inp, dO)

    h = tape["h"]
    dqp, g["qnorm"] = rmsnorm_backward(tape["qp"], p["qnorm"], rope_apply(dq, cfg.rope_base, inverse=True))
    dkp, g["knorm"] = rmsnorm_backward(tape["kp"], p["knorm"], rope_apply(dk, cfg.rope_base, inverse=True))
    dh = np.zeros_like(h)
    for name, d in (("wq", dqp), ("wk", dkp), ("wv", dv)):
        dm = _merge(d)
        g[name] = _wgrad(dm, h)
        dh += dm @ p[name]
    if cfg.has_probe:
        if cfg.has_gate:
            gate = tape["g"]
            dgate = np.sum(dr * tape["r_ungated"], axis=-1)
            dz = (dgate * gate[..., 0] * (1.0 - gate[..., 0])).transpose(0, 2, 1)
            g["wg"] = _wgrad(dz, h)
            dh += dz @ p["wg"]
            dr = dr * gate
        if cfg.rope_on_rho:
            dr = rope_apply(dr, cfg.rope_base, inverse=True)
        drp, g["rnorm"] = rmsnorm_backward(tape["rp"], p["rnorm"], dr)
        dm = _merge(drp)
        g["wr"] = _wgrad(dm, h)
        dh += dm @ p["wr"]
    dx, g["norm1"] = rmsnorm_backward(tape["x"], p["norm1"], dh)
    return dx2 + dx, g


def forward(params: dict, cfg: ModelConfig, tokens: np.ndarray):
    """Final hidden states ``[B, L, D]`` (after the last RMSNorm) and the tape."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be [batch, seq]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id outside the vocabulary")
    x = params["embed"][tokens]
    tapes = []
    for i in range(cfg.layers):
        x, t = block_forward(x, _layer(params, i), cfg)
        tapes.append(t)
    hf = rmsnorm(x, params["final_norm"])
    return hf, {"x_last": x, "blocks": tapes}


def out_weight(params):
    return params.get("head", params["embed"])


def logits_at(params, hf, positions):
    """LM logits at ``positions`` (a boolean ``[B, L]`` mask)."""
    return hf[positions] @ out_weight(params).T


def model_loss_and_grads(params: dict, cfg: ModelConfig, tokens, targets, need_grads: bool = True):
    """Mean cross-entropy over positions with ``targets >= 0`` and its gradients."""
    targets = np.asarray(targets)
    sup = targets >= 0
    n = int(sup.sum())
    if n == 0:
        raise ValueError("batch has no supervised positions")
    hf, tape = forward(params, cfg, tokens)
    Wout = out_weight(params)
    z = hf[sup] @ Wout.T
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=-1))
    y = targets[sup]
    loss = float(np.mean(lse - z[np.arange(n), y]))
    if not np.isfinite(loss):
        raise FloatingPointError("loss is non-finite")
    if not need_grads:
        return loss, None

    dz = np.exp(z - lse[:, None])
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads = {}
    dW = dz.T @ hf[sup]
    dhf = np.zeros_like(hf)
    dhf[sup] = dz @ Wout
    dx, grads["final_norm"] = rmsnorm_backward(tape["x_last"], params["final_norm"], dhf)
    for i in reversed(range(cfg.layers)):
        dx, g = block_backward(dx, tape["blocks"][i], _layer(params, i), cfg)
        for k, v in g.items():
            grads[f"l{i}.{k}"] = v
    dE = np.zeros_like(params["embed"])
    np.add.at(dE, np.asarray(tokens), dx)
    if cfg.tie_embeddings:
        dE += dW
    else:
        grads["head"] = dW
    grads["embed"] = dE
    for k, v in grads.items():
        check_finite(v, f"gradient of {k}")
    return loss, {k: v.astype(params[k].dtype) for k, v in grads.items()}


def predict(params: dict, cfg: ModelConfig, tokens, targets):
    """Argmax predictions at supervised positions, flattened."""
    sup = np.asarray(targets) >= 0
    hf, _ = forward(params, cfg, tokens)
    return np.argmax(logits_at(params, hf, sup), axis=-1)
