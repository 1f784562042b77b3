import math

import numpy as np
import pytest

from parallax_lab.model import (
    ModelConfig,
    _layer,
    block_forward,
    check_params,
    forward,
    init_params,
    model_loss_and_grads,
    param_groups,
    param_shapes,
    predict,
)
from parallax_lab.verify import model_gradcheck, zero_probe_step_equivalence

SMALL = dict(layers=2, d_model=16, heads=2, vocab=16, seq_len=10, mlp_ratio=2.0)


def batch(rng, cfg, B=2):
    return rng.integers(0, cfg.vocab, (B, cfg.seq_len)), rng.integers(0, cfg.vocab, (B, cfg.seq_len))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(mixer="mamba")
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(d_model=12, heads=4)  # odd head dim
    with pytest.raises(ValueError):
        ModelConfig(wr_init="ones")
    assert ModelConfig(d_model=64, heads=4).d_head == 16


def test_shapes_and_groups():
    cfg = ModelConfig(mixer="parallax", gate=True, **SMALL)
    shapes = param_shapes(cfg)
    assert shapes["l0.wr"] == (16, 16) and shapes["l1.wg"] == (2, 16)
    groups = param_groups(cfg)
    assert groups["embed"] == "embed" and groups["l0.wq"] == "matrix"
    assert groups["l0.wg"] == "norm" and groups["l0.rnorm"] == "norm"
    sa = param_shapes(ModelConfig(mixer="softmax", gate=True, **SMALL))
    assert not any(k.endswith(("wr", "rnorm", "wg")) for k in sa)
    untied = param_shapes(ModelConfig(tie_embeddings=False, **SMALL))
    assert untied["head"] == (16, 16)


def test_init_deterministic_and_checked():
    cfg = ModelConfig(**SMALL)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["l0.wq"], init_params(cfg, 4)["l0.wq"])
    assert np.max(np.abs(a["l0.wq"])) <= 2 * cfg.init_std
    check_params(a, cfg)
    del a["l0.wr"]
    with pytest.raises(ValueError):
        check_params(a, cfg)


def test_zero_wr_init_keeps_other_weights():
    a = init_params(ModelConfig(wr_init="zero", **SMALL), 0)
    b = init_params(ModelConfig(**SMALL), 0)
    assert not np.any(a["l0.wr"])
    assert all(np.array_equal(a[k], b[k]) for k in a if not k.endswith("wr"))


def test_zero_residual_branch(rng):
    cfg = ModelConfig(**SMALL)
    p = {k: np.zeros_like(v) for k, v in _layer(init_params(cfg), 0).items()}
    x = rng.standard_normal((2, cfg.seq_len, cfg.d_model))
    np.testing.assert_array_equal(block_forward(x, p, cfg)[0], x)


def test_zero_probe_block_equals_softmax(rng):
    plx_cfg = ModelConfig(mixer="parallax", wr_init="zero", **SMALL)
    sa_cfg = ModelConfig(mixer="softmax", **SMALL)
    p = _layer(init_params(plx_cfg, 1), 0)
    x = rng.standard_normal((2, 10, 16))
    a = block_forward(x, p, plx_cfg)[0]
    b = block_forward(x, {k: v for k, v in p.items() if k not in ("wr", "rnorm")}, sa_cfg)[0]
    np.testing.assert_array_equal(a, b)


def test_gate_saturation(rng):
    cfg = ModelConfig(mixer="parallax", gate=True, **SMALL)
    p = _layer(init_params(cfg, 2), 0)
    x = rng.standard_normal((1, 10, 16))
    sa_cfg = ModelConfig(mixer="softmax", **SMALL)
    p["wg"] = np.full_like(p["wg"], -1e4)
    # a constant negative gate row needs a positive coordinate sum in h
    x = x + 5.0
    ref = block_forward(x, {k: v for k, v in p.items() if k not in ("wr", "rnorm", "wg")}, sa_cfg)[0]
    np.testing.assert_allclose(block_forward(x, p, cfg)[0], ref, atol=1e-12)


def test_fresh_loss_near_chance(rng):
    cfg = ModelConfig(init_std=1e-3, **SMALL)
    tokens, targets = batch(rng, cfg, 4)
    loss, _ = model_loss_and_grads(init_params(cfg), cfg, tokens, targets, need_grads=False)
    assert abs(loss - math.log(cfg.vocab)) <= 0.1 * math.log(cfg.vocab)


def test_duplicated_positions_keep_mean(rng):
    cfg = ModelConfig(**SMALL)
    params = init_params(cfg)
    tokens, targets = batch(rng, cfg, 1)
    a, _ = model_loss_and_grads(params, cfg, tokens, targets, need_grads=False)
    b, _ = model_loss_and_grads(params, cfg, np.repeat(tokens, 2, 0), np.repeat(targets, 2, 0), need_grads=False)
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_errors(rng):
    cfg = ModelConfig(**SMALL)
    params = init_params(cfg)
    tokens, _ = batch(rng, cfg)
    with pytest.raises(ValueError):
        model_loss_and_grads(params, cfg, tokens, -np.ones_like(tokens))
    with pytest.raises(ValueError):
        forward(params, cfg, tokens + cfg.vocab)
    with pytest.raises(ValueError):
        forward(params, cfg, tokens[0])


@pytest.mark.parametrize("mixer,gate,rope", [("softmax", False, False), ("parallax", False, False),
                                             ("parallax", True, False), ("parallax", True, True)])
def test_model_gradcheck(mixer, gate, rope):
    assert model_gradcheck(mixer, gate=gate, rope_on_rho=rope) <= 1e-4


def test_f32_forward_matches_f64(rng):
    cfg = ModelConfig(mixer="parallax", gate=True, **SMALL)
    p64 = init_params(cfg, 0)
    p32 = init_params(cfg, 0, dtype=np.float32)
    tokens, targets = batch(rng, cfg)
    l64, _ = model_loss_and_grads(p64, cfg, tokens, targets)
    l32, g32 = model_loss_and_grads(p32, cfg, tokens, targets)
    assert abs(l64 - l32) < 1e-4
    assert all(g.dtype == np.float32 for g in g32.values())


def test_predict_shape(rng):
    cfg = ModelConfig(**SMALL)
    tokens, targets = batch(rng, cfg)
    targets[:, :5] = -1
    assert predict(init_params(cfg), cfg, tokens, targets).shape == (10,)


@pytest.mark.parametrize("optimizer", ["muon", "adamw"])
def test_zero_probe_optimizer_step(optimizer):
    res = zero_probe_step_equivalence(0, optimizer)
    assert res["loss"] <= 1e-12 and res["grads"] <= 1e-12 and res["params"] <= 1e-12
