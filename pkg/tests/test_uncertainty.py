import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from detcal import autodiff as ad
from detcal.uncertainty import (
    McSamples,
    box_certainty,
    box_mean,
    box_uncertainty,
    classwise_certainty,
    mean_confidence,
    summarize,
)
import oracles


def test_mean_confidence_hand():
    s = mean_confidence(np.array([[2.0, 0.0], [0.0, 0.0]]))
    assert s == pytest.approx([0.73106, 0.26894], abs=1e-5)
    assert s.sum() == pytest.approx(1.0)


def test_mean_confidence_stable_for_large_logits():
    s = mean_confidence(np.array([[1000.0, 0.0], [1002.0, 0.0]]))
    assert np.isfinite(s).all() and s[0] == pytest.approx(1.0)


def test_classwise_certainty_hand():
    c = classwise_certainty(np.array([[0.0, 1.0], [2.0, 1.0]]))
    assert c[0] == pytest.approx(1 - math.tanh(1.0))
    assert c[0] == pytest.approx(0.23841, abs=1e-5)
    assert c[1] == 1.0


def test_certainty_positive_for_large_spread():
    c = classwise_certainty(np.array([[0.0, -15.0], [2.0, 15.0]]))
    assert 0.0 < c[1] < 1e-150  # variance 225
    g = box_certainty(np.array([[0.0, 0.0, 0.0, 0.0], [20.0, 20.0, 20.0, 20.0]]))
    assert 0.0 < g < 1e-40  # u = 100


def test_certainty_needs_two_passes():
    with pytest.raises(ValueError, match="variance undefined"):
        classwise_certainty(np.array([[1.0, 2.0]]))
    with pytest.raises(ValueError):
        box_certainty(np.array([[0.1, 0.2, 0.3, 0.4]]))


def test_box_mean_examples():
    r = np.array([[0.0] * 4, [1.0] * 4])
    assert box_mean(r) == pytest.approx([0.5] * 4)
    same = np.tile([0.2, 0.4, 0.1, 0.3], (5, 1))
    assert box_mean(same) == pytest.approx([0.2, 0.4, 0.1, 0.3])


def test_box_uncertainty_hand():
    r = np.tile([0.5, 0.5, 0.2, 0.3], (3, 1))
    # mu_com = 0.375, squared deviations sum to 0.0675
    assert box_uncertainty(r) == pytest.approx(0.016875, abs=1e-15)
    assert box_certainty(r) == pytest.approx(1 - math.tanh(0.016875))


def test_box_uncertainty_shape_checks():
    with pytest.raises(ValueError):
        box_uncertainty(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        McSamples(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        McSamples(np.zeros((1, 2)), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        McSamples(np.full((2, 2), np.nan), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        mean_confidence([[1.0, 2.0], [3.0]])


def test_summarize():
    rng = np.random.default_rng(0)
    s = summarize(McSamples(rng.normal(size=(5, 3)), rng.random((5, 4))))
    assert s.mean_conf.shape == (3,) and s.class_certainty.shape == (3,)
    assert 0.0 < s.box_certainty <= 1.0


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 8), st.integers(1, 5)), elements=finite))
def test_logit_functions_match_oracle(z):
    assert mean_confidence(z) == pytest.approx(oracles.mean_conf(z.tolist()), abs=1e-12)
    assert classwise_certainty(z) == pytest.approx(oracles.class_certainty(z.tolist()), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 8), st.just(4)), elements=st.floats(0, 1)))
def test_box_functions_match_oracle_and_range(r):
    g = box_certainty(r)
    assert g == pytest.approx(oracles.box_g(r.tolist()), abs=1e-12)
    assert 0.0 < g <= 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 3), elements=finite), st.floats(1.1, 4.0))
def test_inflating_spread_lowers_certainty(z, scale):
    c0 = classwise_certainty(z)
    z2 = z.mean(axis=0) + scale * (z - z.mean(axis=0))
    c1 = classwise_certainty(z2)
    spread = z.var(axis=0) > 1e-6
    assert np.all(c1[spread] < c0[spread])
    assert np.all(c1[~spread] <= c0[~spread] + 1e-12)


def test_symbolic_inputs_give_tape_values():
    t = ad.Tape()
    z = [[t.param(v) for v in row] for row in [[1.0, 0.0], [0.0, 2.0], [1.5, 0.5]]]
    s = mean_confidence(z)
    assert all(isinstance(v, ad.Value) for v in s)
    assert [v.data for v in s] == pytest.approx(mean_confidence(np.array([[1.0, 0.0], [0.0, 2.0], [1.5, 0.5]])))
    r = [[t.param(v) for v in row] for row in [[0.5, 0.5, 0.2, 0.2], [0.52, 0.5, 0.22, 0.2]]]
    assert isinstance(box_certainty(r), ad.Value)


def test_certainty_gradients():
    base = [0.3, -0.2, 1.0, 0.4, 0.1, -0.6]

    def f(v):
        z = [v[0:2], v[2:4], v[4:6]]
        return ad.vsum(classwise_certainty(z)) + mean_confidence(z)[0]
    assert ad.grad_check(f, base).ok(1e-6)

    rb = [0.5, 0.4, 0.2, 0.3, 0.55, 0.42, 0.25, 0.28, 0.45, 0.38, 0.21, 0.33]

    def g(v):
        return box_certainty([v[0:4], v[4:8], v[8:12]])
    assert ad.grad_check(g, rb).ok(1e-6)
