import numpy as np
import pytest
from hypothesis import given, strategies as st

from parallax_lab.family import AttnInputs, parallax_dense, softmax_attention_dense
from parallax_lab.streaming import (
    TileConfig,
    ai_model,
    analytic_reads,
    decode_step,
    merge_partials,
    parallax_stream_forward,
    shard_tiles,
    softmax_stream_forward,
)
from parallax_lab.backward import recompute_cache
from parallax_lab.verify import random_inputs

seeds = st.integers(0, 2**31 - 1)


def test_tile_config_validation():
    with pytest.raises(ValueError):
        TileConfig(0, 4)
    with pytest.raises(ValueError):
        TileConfig(4, 4, split=3)


def test_single_token(rng):
    inp = random_inputs(rng, 1, 4)
    for cfg in (TileConfig(1, 1), TileConfig(64, 64)):
        O, _, _ = parallax_stream_forward(inp, cfg)
        np.testing.assert_allclose(O, inp.v, atol=1e-15)


def test_tile_size_independence(rng):
    inp = random_inputs(rng, 64, 16)
    a, _, _ = parallax_stream_forward(inp, TileConfig(16, 16))
    b, _, _ = parallax_stream_forward(inp, TileConfig(64, 64))
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.max(np.abs(a - parallax_dense(inp))) <= 1e-12


@given(seeds, st.integers(1, 40), st.sampled_from([1, 3, 8, 16]), st.sampled_from([1, 5, 8, 64]),
       st.sampled_from([1, 7, 8, 64]), st.booleans())
def test_stream_matches_dense(seed, L, d, br, bc, causal):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, L, d, causal=causal, n_q=None if causal else max(1, L // 2))
    O, cache, _ = parallax_stream_forward(inp, TileConfig(br, bc))
    assert np.max(np.abs(O - parallax_dense(inp))) <= 1e-12
    ref = recompute_cache(inp)
    for name in ("o", "vbar", "tbar", "omega", "m"):
        np.testing.assert_allclose(getattr(cache, name), getattr(ref, name), rtol=1e-11, atol=1e-12)


def test_stream_f32(rng):
    inp = random_inputs(rng, 37, 8, dtype=np.float32)
    O, _, _ = parallax_stream_forward(inp, TileConfig(16, 5))
    assert O.dtype == np.float32
    ref = parallax_dense(inp.with_(q=inp.q.astype(np.float64), r=inp.r.astype(np.float64),
                                   k=inp.k.astype(np.float64), v=inp.v.astype(np.float64)))
    assert np.max(np.abs(O - ref)) <= 1e-4


def test_softmax_stream_and_batched(rng):
    q = rng.standard_normal((2, 3, 20, 4))
    inp = AttnInputs(q, 0.3 * rng.standard_normal(q.shape), rng.standard_normal(q.shape), rng.standard_normal(q.shape))
    O, _ = softmax_stream_forward(inp, TileConfig(7, 6))
    np.testing.assert_allclose(O, softmax_attention_dense(inp), atol=1e-12)
    P, _, _ = parallax_stream_forward(inp, TileConfig(7, 6), workers=3)
    P1, _, _ = parallax_stream_forward(inp, TileConfig(7, 6))
    np.testing.assert_array_equal(P, P1)
    np.testing.assert_allclose(P, parallax_dense(inp), atol=1e-12)


def test_ledger_reads_example(rng):
    inp = random_inputs(rng, 64, 16)
    _, _, led = parallax_stream_forward(inp, TileConfig(16, 16))
    assert led.elements_read == 10240
    assert analytic_reads(64, 64, 16, 16) == 10240
    _, led_sa = softmax_stream_forward(inp, TileConfig(16, 16))
    assert led_sa.elements_read == analytic_reads(64, 64, 16, 16, probe=False)


@given(st.integers(1, 100), st.integers(1, 100), st.integers(1, 8), st.integers(1, 40))
def test_ai_model_bounds(nq, nkv, d, br):
    fa, plx = ai_model(nq, nkv, d, br)
    assert 0 < fa < plx
    assert 1.0 < plx / fa <= 2.0


def test_ai_model_examples():
    L = 256
    fa, plx = ai_model(L, L, 64, L)
    assert fa == pytest.approx(2 * L / 3) and plx == pytest.approx(L)
    fa, plx = ai_model(1, 4096, 64, 64)
    assert fa == pytest.approx(0.9999, abs=1e-4) and plx == pytest.approx(1.9995, abs=1e-4)
    assert ai_model(1, 1, 1, 1) == pytest.approx((2 / 3, 1.0))
    with pytest.raises(ValueError):
        ai_model(1, 0, 1, 1)


def test_shard_tiles():
    assert [list(r) for r in shard_tiles(5, 4)] == [[0, 1], [2], [3], [4]]
    assert [len(r) for r in shard_tiles(2, 8)] == [1, 1, 0, 0, 0, 0, 0, 0]


def _decode_inputs(rng, n, d=16, dtype=np.float32):
    return (rng.standard_normal(d).astype(dtype), (0.3 * rng.standard_normal(d)).astype(dtype),
            rng.standard_normal((n, d)).astype(dtype), rng.standard_normal((n, d)).astype(dtype))


def test_decode_split_one_is_stream(rng):
    q, rho, K, V = _decode_inputs(rng, 100, dtype=np.float64)
    inp = AttnInputs(q[None], rho[None], K, V, causal=False)
    O, _, _ = parallax_stream_forward(inp, TileConfig(1, 64))
    np.testing.assert_allclose(decode_step(q, rho, K, V, TileConfig(1, 64)), O[0], atol=1e-15)


def test_decode_split_independence(rng):
    q, rho, K, V = _decode_inputs(rng, 1024)
    base = decode_step(q, rho, K, V, TileConfig(1, 64, split=1))
    for S in (2, 4, 8):
        assert np.max(np.abs(decode_step(q, rho, K, V, TileConfig(1, 64, split=S)) - base)) <= 1e-6
    threaded = decode_step(q, rho, K, V, TileConfig(1, 64, split=4), workers=4)
    np.testing.assert_array_equal(threaded, decode_step(q, rho, K, V, TileConfig(1, 64, split=4)))


def test_decode_zero_probe_is_softmax(rng):
    q, _, K, V = _decode_inputs(rng, 300, dtype=np.float64)
    out = decode_step(q, np.zeros_like(q), K, V, TileConfig(1, 32, split=8))
    ref = softmax_attention_dense(AttnInputs(q[None], None, K, V, causal=False))[0]
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_decode_more_shards_than_tiles(rng):
    q, rho, K, V = _decode_inputs(rng, 3, dtype=np.float64)
    a = decode_step(q, rho, K, V, TileConfig(1, 64, split=8))
    b = parallax_dense(AttnInputs(q[None], rho[None], K, V, causal=False))[0]
    np.testing.assert_allclose(a, b, atol=1e-14)
    with pytest.raises(ValueError):
        decode_step(q, rho, K[:0], V[:0])


def test_merge_order_independent(rng):
    from parallax_lab.streaming import decode_partial
    q, rho, K, V = _decode_inputs(rng, 256)
    cfg = TileConfig(1, 32)
    parts = [(s, decode_partial(q, rho, K, V, t, cfg, 0.25)) for s, t in enumerate(shard_tiles(8, 4))]
    a = merge_partials(parts).finalize()
    b = merge_partials(parts[::-1]).finalize()
    np.testing.assert_array_equal(a, b)
