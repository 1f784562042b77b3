import numpy as np
import pytest

from parallax_lab import verify
from parallax_lab.family import parallax_weights


def test_random_inputs_shapes(rng):
    inp = verify.random_inputs(rng, 5, 3, 2, causal=False, n_q=2, dtype=np.float32)
    assert inp.q.shape == (2, 3) and inp.k.shape == (5, 3) and inp.v.shape == (5, 2)
    assert inp.dtype == np.float32 and not inp.causal


def test_rel_error_floor():
    assert verify.rel_error(np.array([1e-11]), np.zeros(1)) == pytest.approx(1e-7)
    assert verify.rel_error(np.array([1.1]), np.array([1.0])) == pytest.approx(0.1)


def test_negative_weight_instance():
    s = parallax_weights(verify.negative_weight_instance())
    assert s.min() <= -0.5
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-15)


def test_unknown_suite():
    with pytest.raises(KeyError):
        verify.run_suite("nope")


def test_all_pass_logic():
    assert verify.all_pass({"a": {"x": {"pass": True}}, "b": {}})
    assert not verify.all_pass({"a": {"x": {"pass": True}, "y": {"pass": False}}})


@pytest.mark.parametrize("suite", verify.SUITES)
def test_suite_green_on_another_seed(suite):
    summary = verify.run_suite(suite, seed=1)
    failed = [k for k, v in summary[suite].items() if not v["pass"]]
    assert not failed, failed
    assert all({"pass", "max_err", "tol"} <= set(v) or "max_eta_min" in v for v in summary[suite].values())
