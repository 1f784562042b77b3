"""Property suites behind ``plx verify``.

Each suite runs with fixed seeds and returns ``{property: {pass, max_err,
tol, ...}}``. Nothing here draws from global random state, so two runs
produce identical summaries.
"""

from __future__ import annotations

import itertools

import numpy as np

from .backward import (
    finite_diff_grad,
    parallax_dense_backward,
    parallax_stream_backward,
    recompute_cache,
)
from .family import (
    AttnInputs,
    family_limit_eval,
    lla_eta,
    lla_exact_dense,
    parallax_dense,
    parallax_weights,
    softmax_attention_dense,
)
from .model import ModelConfig, init_params, model_loss_and_grads, param_groups
from .optim import OptimSpec, Optimizer
from .diagnostics import sink_entropy_range
from .streaming import (
    TileConfig,
    ai_model,
    analytic_reads,
    decode_step,
    parallax_stream_forward,
    softmax_stream_forward,
)

SUITES = ("equivalence", "limits", "gradcheck", "prop1", "io", "scores")


def random_inputs(rng, L, d_k, d_v=None, causal=True, dtype=np.float64, scale=None, n_q=None) -> AttnInputs:
    d_v = d_k if d_v is None else d_v
    n_q = L if n_q is None else n_q
    return AttnInputs(
        q=rng.standard_normal((n_q, d_k)).astype(dtype),
        r=(0.5 * rng.standard_normal((n_q, d_k))).astype(dtype),
        k=rng.standard_normal((L, d_k)).astype(dtype),
        v=rng.standard_normal((L, d_v)).astype(dtype),
        scale=scale,
        causal=causal,
    )


def _maxdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)), initial=0.0))


def rel_error(a, b) -> float:
    """``||a - b|| / ||b||``. The denominator is floored at 1e-4: central
    differences with step 1e-6 carry ~1e-10 of rounding noise per entry, so
    gradients that vanish exactly (a single-token softmax) are compared in
    absolute terms instead of dividing that noise by zero."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-4))


class _Tracker:
    def __init__(self):
        self.out = {}

    def record(self, name, err, tol, le=True, **extra):
        err = float(err)
        ok = bool(err <= tol) if le else bool(err >= tol)
        prev = self.out.get(name)
        if prev is not None:
            worse = err > prev["max_err"] if le else err < prev["max_err"]
            ok = ok and prev["pass"]
            err = err if worse else prev["max_err"]
        self.out[name] = {"pass": ok, "max_err": err, "tol": tol, **extra}


# suites -------------------------------------------------------------------

def suite_equivalence(seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 1])
    tr = _Tracker()
    for _ in range(200):
        L = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        inp = random_inputs(rng, L, d, int(rng.integers(1, 9)))
        ref = parallax_dense(inp, "scoring")
        tr.record("three_form", max(_maxdiff(parallax_dense(inp, m), ref) for m in ("covariance", "expanded")), 1e-12)
        tr.record("shift_cancellation", _maxdiff(parallax_dense(inp, "scoring", frame="k"), ref), 1e-12)

    for L, d, br, bc in itertools.product((1, 2, 3, 16, 64), (4, 16), (1, 8, 64), (1, 8, 64)):
        for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-4)):
            inp = random_inputs(rng, L, d, dtype=dtype)
            ref = parallax_dense(inp.with_(**{k: getattr(inp, k).astype(np.float64) for k in "qrkv"}), "covariance")
            O, _, _ = parallax_stream_forward(inp, TileConfig(br, bc))
            tr.record(f"stream_vs_dense_{np.dtype(dtype).name}", _maxdiff(O, ref), tol)

    for L in (1, 100, 1024):
        q, rho = rng.standard_normal(16).astype(np.float32), (0.5 * rng.standard_normal(16)).astype(np.float32)
        K, V = rng.standard_normal((L, 16)).astype(np.float32), rng.standard_normal((L, 16)).astype(np.float32)
        base = decode_step(q, rho, K, V, TileConfig(block_cols=64, split=1))
        for S in (1, 2, 4, 8):
            got = decode_step(q, rho, K, V, TileConfig(block_cols=64, split=S))
            tr.record("decode_split", _maxdiff(got, base), 1e-6)
        inp = AttnInputs(q[None].astype(np.float64), rho[None].astype(np.float64), K.astype(np.float64),
                         V.astype(np.float64), causal=False)
        tr.record("decode_vs_dense", _maxdiff(base, parallax_dense(inp)[0]), 1e-4)
    return tr.out


def suite_limits(seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 2])
    tr = _Tracker()
    for _ in range(20):
        L, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        inp = random_inputs(rng, L, d)
        sa = softmax_attention_dense(inp)
        tr.record("lla_large_ridge_is_softmax", _maxdiff(lla_exact_dense(inp, 1e8)[0], sa), 1e-6)
        tr.record("parallax_zero_probe_is_softmax", _maxdiff(parallax_dense(inp.with_(r=np.zeros_like(inp.r))), sa), 0.0)
        flat = inp.with_(scale=1e-8)
        tr.record("parallax_flat_is_affine_linear",
                  _maxdiff(parallax_dense(flat), family_limit_eval("affine-linear-attention", flat)), 1e-5)
        # exact LLA puts the ridge on summed kernel weights while the
        # recurrent form adds it to averaged moments; with uniform weights
        # the two agree when the averaged ridge is lam / (number of keys)
        lla_flat = lla_exact_dense(flat, 1.0)[0]
        n_keys = inp.mask().sum(axis=-1)
        tr.record("lla_flat_is_affine_mesanet",
                  _maxdiff(lla_flat, family_limit_eval("affine-mesanet", flat, lam=1.0 / n_keys)), 1e-4)
        tr.record("lla_flat_fixed_ridge_gap",
                  _maxdiff(lla_flat, family_limit_eval("affine-mesanet", flat, lam=1.0)), np.inf)
        off = inp.with_(r=np.zeros_like(inp.r))
        tr.record("affine_zero_probe_is_value_averaging",
                  _maxdiff(family_limit_eval("affine-linear-attention", off), family_limit_eval("value-averaging", off)), 0.0)
    return tr.out


def model_gradcheck(mixer: str, gate: bool = False, rope_on_rho: bool = False, seed: int = 0) -> float:
    """Worst relative error of every parameter gradient of a one-layer
    micro model against central differences (float64)."""
    cfg = ModelConfig(layers=1, d_model=8, heads=2, vocab=11, seq_len=6, mixer=mixer, gate=gate,
                      rope_on_rho=rope_on_rho, mlp_ratio=2.0, init_std=0.3)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 7])
    for name in params:
        # move the norm gains and gate off their symmetric init values
        if params[name].ndim == 1 or name.endswith("wg"):
            params[name] = params[name] + 0.3 * rng.standard_normal(params[name].shape)
    tokens = rng.integers(0, cfg.vocab, (2, cfg.seq_len))
    targets = rng.integers(0, cfg.vocab, (2, cfg.seq_len))
    targets[0, :2] = -1
    _, grads = model_loss_and_grads(params, cfg, tokens, targets)
    worst = 0.0
    for name in sorted(params):
        def f(X, name=name):
            p = dict(params)
            p[name] = X
            return model_loss_and_grads(p, cfg, tokens, targets, need_grads=False)[0]

        worst = max(worst, rel_error(grads[name], finite_diff_grad(f, params[name])))
    return worst


def zero_probe_step_equivalence(seed: int = 0, optimizer: str = "muon") -> dict:
    """Parallax with ``W_R = 0`` against softmax with the same shared weights,
    before and after one optimizer step on the same batch.

    Returns the largest absolute differences of the loss, of the shared
    parameter gradients and of the shared parameters after the step. The
    step runs without clipping: the probe gradients enter the global norm
    and would rescale only the Parallax side.
    """
    base = dict(layers=2, d_model=16, heads=2, vocab=16, seq_len=12, mlp_ratio=2.0, init_std=0.1)
    plx_cfg = ModelConfig(mixer="parallax", wr_init="zero", **base)
    sa_cfg = ModelConfig(mixer="softmax", **base)
    plx = init_params(plx_cfg, seed)
    sa = {k: plx[k].copy() for k in init_params(sa_cfg, seed)}
    rng = np.random.default_rng([seed, 11])
    tokens = rng.integers(0, 16, (3, 12))
    targets = rng.integers(0, 16, (3, 12))
    out = {}
    lp, gp = model_loss_and_grads(plx, plx_cfg, tokens, targets)
    ls, gs = model_loss_and_grads(sa, sa_cfg, tokens, targets)
    out["loss"] = abs(lp - ls)
    out["grads"] = max(_maxdiff(gp[k], gs[k]) for k in gs)
    spec = OptimSpec(optimizer=optimizer, lr=1e-2, clip=None)
    Optimizer(spec, param_groups(plx_cfg), 10).step(plx, gp)
    Optimizer(spec, param_groups(sa_cfg), 10).step(sa, gs)
    out["params"] = max(_maxdiff(plx[k], sa[k]) for k in sa)
    return out


def suite_gradcheck(seed: int = 0, full_model: bool = True) -> dict:
    rng = np.random.default_rng([seed, 3])
    tr = _Tracker()
    for n in range(50):
        L = (1, 2, 5, 13)[n % 4]
        inp = random_inputs(rng, L, 4, 3)
        G = rng.standard_normal((L, 3))
        cache = recompute_cache(inp)
        grads = parallax_dense_backward(inp, cache, G)
        for name, g in zip("qrkv", grads.as_tuple()):
            def f(X, name=name):
                return float(np.sum(G * parallax_dense(inp.with_(**{name: X}))))

            tr.record("finite_difference", rel_error(g, finite_diff_grad(f, getattr(inp, name))), 1e-5)

    for L, cfgs in ((64, (TileConfig(16, 16), TileConfig(8, 32), TileConfig(64, 64))), (13, (TileConfig(4, 5),))):
        for _ in range(3):
            inp = random_inputs(rng, L, 8, 6)
            G = rng.standard_normal((L, 6))
            _, cache, _ = parallax_stream_forward(inp, TileConfig(16, 16))
            dense = parallax_dense_backward(inp, cache, G)
            for c in cfgs:
                tr.record("stream_vs_dense", parallax_stream_backward(inp, cache, G, c).max_abs_diff(dense), 1e-12)

    if full_model:
        for mixer in ("softmax", "parallax"):
            tr.record(f"model_{mixer}", model_gradcheck(mixer, seed=seed), 1e-4)
    return tr.out


def suite_prop1(seed: int = 0, n: int = 1000) -> dict:
    rng = np.random.default_rng([seed, 4])
    tr = _Tracker()
    eta_min = np.inf
    tbar_lo, tbar_hi = np.inf, -np.inf
    for _ in range(n):
        L, d = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        lam = float(10 ** rng.uniform(-3, 1))
        inp = random_inputs(rng, L, d)
        _, _, stats = lla_exact_dense(inp, lam)
        e_dir, e_quad = lla_eta(stats)
        # tbar close to one loses digits in 1 - tbar, so the agreement is
        # measured relative to the size of eta
        tr.record("eta_routes_agree", np.max(np.abs(e_dir - e_quad) / np.maximum(1.0, np.abs(e_quad))), 1e-9)
        eta_min = min(eta_min, float(min(e_dir.min(), e_quad.min())))
        tbar_lo = min(tbar_lo, float(stats.tbar.min()))
        tbar_hi = max(tbar_hi, float(stats.tbar.max()))
    tr.record("eta_nonnegative", eta_min, -1e-12, le=False)
    tr.out["tbar_in_unit_interval"] = {"pass": bool(tbar_lo >= 0.0 and tbar_hi < 1.0),
                                       "max_err": max(0.0, -tbar_lo), "tol": 0.0,
                                       "tbar_min": tbar_lo, "tbar_max": tbar_hi}
    tr.out["prop1"] = {"pass": all(v["pass"] for v in tr.out.values()), "max_eta_min": eta_min}
    return tr.out


IO_GRID = [(lq, lkv, 16, br) for lq, lkv in ((1, 64), (1, 4096), (64, 64), (100, 100), (512, 512), (64, 700))
           for br in (16, 64)]


def suite_io(seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 5])
    tr = _Tracker()
    for lq, lkv, d, br in IO_GRID:
        causal = lq == lkv
        inp = random_inputs(rng, lkv, d, n_q=lq, causal=causal, dtype=np.float32)
        cfg = TileConfig(br, 64)
        _, _, led = parallax_stream_forward(inp, cfg)
        _, led_sa = softmax_stream_forward(inp, cfg)
        tr.record("reads_parallax", abs(led.elements_read - analytic_reads(lq, lkv, d, br, True)), 0)
        tr.record("reads_softmax", abs(led_sa.elements_read - analytic_reads(lq, lkv, d, br, False)), 0)
        if lq >= 512:
            tr.record("flop_ratio", abs(led.flops / led_sa.flops - 2.0), 0.1)
    fa, plx = ai_model(1, 4096, 16, 64)
    tr.record("decode_ai_ratio", abs(plx / fa - 2.0), 0.01, ai_fa=fa, ai_plx=plx)
    fa, plx = ai_model(256, 256, 16, 256)
    tr.record("square_ai_ratio", abs(plx / fa - 1.5), 1e-12)
    return tr.out


def suite_scores(seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 6])
    tr = _Tracker()
    for _ in range(100):
        L, d = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        inp = random_inputs(rng, L, d)
        s = parallax_weights(inp)
        tr.record("weights_sum_to_one", np.max(np.abs(s.sum(axis=-1) - 1.0)), 1e-12)
        ser = sink_entropy_range(inp)
        sp = ser["sink_plx"]
        tr.record("sink_plx_in_unit_interval", max(0.0, -sp.min(), sp.max() - 1.0), 0.0)
        ent = ser["entropy"]
        bound = np.log(np.arange(1, L + 1))
        tr.record("entropy_bounds", max(0.0, -ent.min(), float(np.max(ent - bound))), 1e-12)
    inp = negative_weight_instance()
    tr.record("negative_weight_exists", float(parallax_weights(inp).min()), -1e-3)
    return tr.out


def negative_weight_instance() -> AttnInputs:
    """Three keys, equal logits, probe aligned with ``k_1 - kbar``: the last
    query gives the first key a negative weight."""
    k = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    q = np.zeros((3, 2))
    kbar = k.mean(axis=0)
    r = np.tile(3.0 * (k[0] - kbar), (3, 1))
    v = np.eye(3)[:, :2]
    return AttnInputs(q, r, k, v)


RUNNERS = {
    "equivalence": suite_equivalence,
    "limits": suite_limits,
    "gradcheck": suite_gradcheck,
    "prop1": suite_prop1,
    "io": suite_io,
    "scores": suite_scores,
}


def run_suite(name: str, seed: int = 0) -> dict:
    if name == "all":
        return {s: RUNNERS[s](seed) for s in SUITES}
    if name not in RUNNERS:
        raise KeyError(name)
    return {name: RUNNERS[name](seed)}


def all_pass(summary: dict) -> bool:
    return all(prop["pass"] for suite in summary.values() for prop in suite.values())
