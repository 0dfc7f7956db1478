import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aslkit import autodiff as ad
from aslkit.core import ActionInstance, PyramidPoint, TimeSegment
from aslkit.sensitivity import (
    SIGMA_MAX,
    SIGMA_MIN,
    SensitivityParams,
    instance_weights,
    normalized_position,
    point_weights,
    raw_weight,
)


def inst(s, e, c=0):
    return ActionInstance(TimeSegment(s, e), c)


def test_normalized_position_examples():
    assert normalized_position(2.0, inst(1.0, 3.0)) == 0.5
    assert normalized_position(1.0, inst(1.0, 3.0)) == 0.0
    assert normalized_position(1.5, inst(1.0, 3.0)) == 0.25
    p = PyramidPoint(2.5, 0, 1, 0.0, 4.0)
    assert normalized_position(p, inst(1.0, 3.0)) == 0.75
    with pytest.raises(ValueError):
        normalized_position(3.5, inst(1.0, 3.0))


def test_raw_weight_values():
    assert float(raw_weight(0.3, 0.3, 0.7).data) == 1.0
    assert float(raw_weight(0.3 + 0.2, 0.3, 0.2).data) == pytest.approx(0.6065306597126334, rel=1e-12)
    assert float(raw_weight(0.0, 1.0, SIGMA_MAX).data) == pytest.approx(1.0, abs=1e-8)


def test_instance_weights_example():
    p = SensitivityParams.init(1, mu=0.5, sigma=0.25)
    h = instance_weights(p, "cls", 0, [0.25, 0.5, 0.75]).data
    np.testing.assert_allclose(h, [0.822205857183591, 1.355588285632818, 0.822205857183591], rtol=1e-12)


def test_single_point_weight_is_one():
    p = SensitivityParams.init(2, mu=0.1, sigma=0.3)
    assert instance_weights(p, "loc", 1, [0.9]).data.tolist() == [1.0]


def test_empty_instance_rejected():
    with pytest.raises(ValueError):
        instance_weights(SensitivityParams.init(1), "cls", 0, [])


def test_flat_limit_weights_are_one():
    p = SensitivityParams.frozen_flat(3)
    h = instance_weights(p, "cls", 2, np.linspace(0, 1, 17)).data
    np.testing.assert_allclose(h, 1.0, atol=1e-6)
    assert not p.mu_cls.requires_grad


def test_unknown_task():
    with pytest.raises(ValueError):
        SensitivityParams.init(1).task("both")


def test_projection_clamps():
    p = SensitivityParams.init(2)
    p.mu_cls.data = np.array([-0.3, 1.7])
    p.sigma_loc.data = np.array([0.0, 1e9])
    p.project()
    assert p.mu_cls.data.tolist() == [0.0, 1.0]
    assert p.sigma_loc.data.tolist() == [SIGMA_MIN, SIGMA_MAX]


positions_st = st.lists(st.floats(0, 1), min_size=1, max_size=30)


@given(positions_st, st.floats(0, 1), st.floats(SIGMA_MIN, 8.0))
def test_mean_one_per_instance(pos, mu, sigma):
    p = SensitivityParams.init(1, mu=mu, sigma=sigma)
    h = instance_weights(p, "cls", 0, pos).data
    assert abs(h.mean() - 1.0) <= 1e-12


@given(positions_st, st.floats(0, 1), st.floats(SIGMA_MIN, 8.0))
def test_argmax_is_position_nearest_mu(pos, mu, sigma):
    p = SensitivityParams.init(1, mu=mu, sigma=sigma)
    h = instance_weights(p, "cls", 0, pos).data
    d = np.abs(np.asarray(pos) - mu)
    # near-equal distances can round to the same weight, so compare weights
    assert h[np.argmin(d)] == pytest.approx(h.max(), rel=1e-12)


@given(st.floats(0.5, 20.0))
def test_invariant_to_time_rescaling(scale):
    p = SensitivityParams.init(1, mu=0.3, sigma=0.4)
    times = np.array([2.0, 2.5, 3.5, 5.0])
    a = inst(2.0, 5.0)
    b = inst(2.0 * scale, 5.0 * scale)
    h1 = instance_weights(p, "cls", 0, [normalized_position(t, a) for t in times]).data
    h2 = instance_weights(p, "cls", 0, [normalized_position(t * scale, b) for t in times]).data
    np.testing.assert_allclose(h1, h2, rtol=1e-12)


def test_point_weights_matches_per_instance():
    rng = np.random.default_rng(0)
    p = SensitivityParams.init(3, sigma=0.5)
    p.mu_cls.data = np.array([0.1, 0.5, 0.9])
    groups = np.array([4, 4, 4, 9, 9, 2, 2, 2, 2])
    labels = np.array([0, 0, 0, 2, 2, 1, 1, 1, 1])
    pos = rng.uniform(size=9)
    h = point_weights(p, "cls", labels, pos, groups).data
    for g in np.unique(groups):
        sel = groups == g
        ref = instance_weights(p, "cls", int(labels[sel][0]), pos[sel]).data
        np.testing.assert_allclose(h[sel], ref, rtol=1e-13)


def test_gradient_wrt_mu_and_sigma():
    p = SensitivityParams.init(2, sigma=0.4)
    p.mu_cls.data = np.array([0.2, 0.7])
    w = np.array([0.3, -1.0, 2.0, 0.5, 1.5])
    labels = np.array([0, 0, 1, 1, 1])
    pos = np.array([0.1, 0.6, 0.2, 0.5, 0.95])
    groups = np.array([0, 0, 1, 1, 1])

    def loss():
        return ad.sum_(ad.mul(point_weights(p, "cls", labels, pos, groups), w))

    assert ad.check_gradients(loss, [p.mu_cls, p.sigma_cls]) < 1e-6
    assert math.isfinite(float(loss().data))
