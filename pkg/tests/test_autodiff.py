import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aslkit import autodiff as ad
from aslkit.autodiff import AdamState, Array, NumericalError, ShapeError, TapeError, adam_step, lr_multiplier
from aslkit.gradsuite import check_primitive, primitive_cases


def leaf(x):
    return Array(np.asarray(x, dtype=float), requires_grad=True)


@pytest.mark.parametrize("name", sorted(primitive_cases(np.random.default_rng(0))))
def test_primitive_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(7)
    fn, inputs = primitive_cases(rng)[name]
    assert check_primitive(fn, inputs, rng) < 1e-6


def test_conv1d_gradient_on_1x8x4_input():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 8, 4))
    w = rng.normal(size=(3, 4, 2))
    assert check_primitive(lambda a, b: ad.conv1d(a, b), [x, w], rng) < 1e-6


def test_three_layer_network_every_parameter():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 4))
    ws = [leaf(rng.normal(size=s) * 0.5) for s in ((4, 6), (6, 6), (6, 1))]
    bs = [leaf(rng.normal(size=s[1]) * 0.1) for s in ((4, 6), (6, 6), (6, 1))]

    def loss():
        h = ad.tanh(ad.add(ad.matmul(x, ws[0]), bs[0]))
        h = ad.gelu(ad.add(ad.matmul(h, ws[1]), bs[1]))
        return ad.sum_(ad.power(ad.add(ad.matmul(h, ws[2]), bs[2]), 2.0))

    assert ad.check_gradients(loss, ws + bs) < 1e-6


def test_backward_twice_is_a_stale_tape():
    a = leaf([1.0, 2.0])
    loss = ad.sum_(ad.mul(a, a))
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()


def test_gradients_accumulate_over_reused_nodes():
    a = leaf(3.0)
    b = ad.mul(a, a)
    loss = ad.add(b, b)
    loss.backward()
    assert a.grad == pytest.approx(12.0)


def test_shape_error_names_operation_and_shapes():
    with pytest.raises(ShapeError) as info:
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 5))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg
    with pytest.raises(ShapeError):
        ad.add(leaf(np.ones((2, 3))), leaf(np.ones((4,))))


def test_leaf_rejects_non_finite():
    with pytest.raises(ValueError):
        Array([1.0, np.nan])


def test_constant_inputs_get_no_gradient():
    a = leaf([1.0, 2.0])
    c = ad.constant([3.0, 4.0])
    ad.sum_(ad.mul(a, c)).backward()
    assert c.grad is None
    np.testing.assert_allclose(a.grad, [3.0, 4.0])


def test_attention_masked_keys_get_zero_weight():
    rng = np.random.default_rng(0)
    q, k, v = (leaf(rng.normal(size=(1, 3, 2))) for _ in range(3))
    mask = np.array([[True, False, True]])
    _, attn = ad.scaled_dot_attention(q, k, v, key_mask=mask)
    assert np.all(attn.data[..., 1] == 0.0)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([1000.0, 1001.0, 999.0])
    s = ad.softmax(ad.constant(x)).data
    np.testing.assert_allclose(s, ad.softmax(ad.constant(x - 1000.0)).data)
    assert np.all(np.isfinite(s))


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
def test_logsumexp_matches_reference(x):
    ref = math.log(sum(math.exp(v) for v in x))
    assert float(ad.logsumexp(ad.constant(x)).data) == pytest.approx(ref, rel=1e-12, abs=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)))
def test_layer_norm_rows_standardized(x):
    y = ad.layer_norm(ad.constant(x)).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)


def test_adam_one_step_on_square():
    # f(x) = x^2 at x = 1: first Adam step moves by lr * g/|g|
    x = leaf(1.0)
    state = AdamState()
    ad.mul(x, x).backward()
    adam_step({"x": x}, {"x": x.grad}, state, lr=0.1)
    assert float(x.data) == pytest.approx(0.9000000005, abs=1e-12)


def test_adam_rejects_non_finite_gradient_without_touching_params():
    x = leaf([1.0, 2.0])
    with pytest.raises(NumericalError):
        adam_step({"x": x}, {"x": np.array([np.inf, 0.0])}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


def test_lr_schedule_shape():
    assert lr_multiplier(0, 100, 10) == 0.0
    assert lr_multiplier(5, 100, 10) == pytest.approx(0.5)
    assert lr_multiplier(10, 100, 10) == pytest.approx(1.0)
    assert lr_multiplier(55, 100, 10) == pytest.approx(0.5)
    assert lr_multiplier(100, 100, 10) == pytest.approx(0.0)
    vals = [lr_multiplier(s, 100, 10) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
