import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ppdelab.paths import DiscretePath, make_grid
from ppdelab.spectral import (SpectralModel, check_smoothing, critical_exponent, hs_norm,
                              semigroup_apply)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_semigroup_identity_at_zero():
    m = SpectralModel.heat(3, horizon=1.0, gamma=0.0, lip_b=1.0, lip_sigma=1.0)
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(semigroup_apply(m, 0.0, v), v)


def test_semigroup_scalar_exponential():
    m = SpectralModel(1, 1, np.array([-1.0]), 0.0, 1.0, 1.0, 1.0)
    assert round(float(semigroup_apply(m, 1.0, [1.0])[0]), 5) == 0.36788


def test_zero_generator_is_identity():
    m = SpectralModel(2, 2, np.zeros(2), 0.0, 1.0, 1.0, 10.0)
    np.testing.assert_array_equal(semigroup_apply(m, 7.0, [2.0, 3.0]), [2.0, 3.0])


def test_heat_spectrum():
    m = SpectralModel.heat(4, scale=0.5, gamma=0.25, lip_b=1.0, lip_sigma=1.0, horizon=1.0)
    np.testing.assert_array_equal(m.eigenvalues, [-0.5, -2.0, -4.5, -8.0])
    assert m.dim_k == 4


@pytest.mark.parametrize("kw", [dict(eigenvalues=np.array([0.5])), dict(gamma=0.5),
                                dict(lip_b=0.0), dict(horizon=-1.0)])
def test_model_rejects_out_of_range(kw):
    base = dict(dim_h=1, dim_k=1, eigenvalues=np.array([-1.0]), gamma=0.0, lip_b=1.0,
                lip_sigma=1.0, horizon=1.0)
    base.update(kw)
    with pytest.raises(ValueError):
        SpectralModel(**base)


def test_decay_rejects_negative_time():
    with pytest.raises(ValueError):
        SpectralModel(1, 1, np.array([-1.0]), 0.0, 1.0, 1.0, 1.0).decay(-0.1)


def test_truncated_freezes_tail_modes():
    m = SpectralModel.heat(4, gamma=0.0, lip_b=1.0, lip_sigma=1.0, horizon=1.0).truncated(2)
    np.testing.assert_array_equal(m.eigenvalues, [-1.0, -4.0, 0.0, 0.0])


@given(eig=arrays(float, 3, elements=st.floats(-50, 0)), s=st.floats(0, 5), r=st.floats(0, 5),
       v=arrays(float, 3, elements=finite))
def test_semigroup_law(eig, s, r, v):
    m = SpectralModel(3, 3, eig, 0.0, 1.0, 1.0, 1.0)
    one = semigroup_apply(m, s + r, v)
    two = semigroup_apply(m, s, semigroup_apply(m, r, v))
    np.testing.assert_allclose(one, two, rtol=1e-13, atol=1e-300)


@given(eig=arrays(float, 3, elements=st.floats(-50, 0)), s=st.floats(0, 5),
       v=arrays(float, 3, elements=finite))
def test_semigroup_contraction(eig, s, v):
    m = SpectralModel(3, 3, eig, 0.0, 1.0, 1.0, 1.0)
    assert np.linalg.norm(semigroup_apply(m, s, v)) <= np.linalg.norm(v) * (1 + 1e-15)


def test_hs_norm_examples():
    assert hs_norm(np.zeros((2, 3))) == 0.0
    assert hs_norm([[3.0]]) == 3.0
    assert round(hs_norm(np.eye(2)), 5) == 1.41421


@given(a=arrays(float, (3, 2), elements=finite), b=arrays(float, (3, 2), elements=finite),
       c=finite)
def test_hs_norm_is_a_norm(a, b, c):
    assert math.isclose(hs_norm(c * a), abs(c) * hs_norm(a), rel_tol=1e-12, abs_tol=1e-9)
    assert hs_norm(a + b) <= hs_norm(a) + hs_norm(b) + 1e-9


def test_critical_exponent_values():
    assert critical_exponent(0.0) == 2.0
    assert critical_exponent(0.25) == 4.0
    assert math.isclose(critical_exponent(0.45), 20.0, rel_tol=1e-12)
    assert critical_exponent(0.499) > 500
    with pytest.raises(ValueError):
        critical_exponent(0.5)


@given(g1=st.floats(0, 0.499), g2=st.floats(0, 0.499))
def test_critical_exponent_increasing(g1, g2):
    if g1 + 1e-9 < g2:
        assert critical_exponent(g1) < critical_exponent(g2)


def _samples(dim_h):
    grid = make_grid(1.0, 4)
    return [(0.0, DiscretePath.constant(grid, np.zeros(dim_h))),
            (0.5, DiscretePath(grid, np.linspace(0, 1, 5)[:, None] * np.ones(dim_h)))]


def test_smoothing_zero_diffusion():
    m = SpectralModel.heat(3, gamma=0.25, lip_b=1.0, lip_sigma=1.0, horizon=1.0)
    rep = check_smoothing(m, lambda t, v: np.zeros((3, 3)), _samples(3), [0.01, 0.1])
    assert rep.constant == 0.0 and not rep.violated


def test_smoothing_identity_diffusion_matches_direct_sum():
    s_grid = [1e-3, 1e-2, 0.1]
    prev = 0.0
    for n in (2, 4, 8):
        m = SpectralModel.heat(n, gamma=0.25, lip_b=1.0, lip_sigma=10.0, horizon=1.0)
        rep = check_smoothing(m, lambda t, v, n=n: np.eye(n), _samples(n)[:1], s_grid)
        k = np.arange(1, n + 1)
        direct = max(math.sqrt(np.sum(np.exp(-2 * k**2 * s))) * s**0.25 for s in s_grid)
        assert math.isclose(rep.constant, direct, rel_tol=1e-12)
        assert rep.constant > prev
        prev = rep.constant


def test_smoothing_bounded_by_contraction_when_gamma_zero():
    m = SpectralModel.heat(3, gamma=0.0, lip_b=1.0, lip_sigma=1.0, horizon=1.0)
    sig = np.array([[0.3, 0.0, 0.1], [0.0, 0.2, 0.0], [0.1, 0.0, 0.4]])
    rep = check_smoothing(m, lambda t, v: sig, _samples(3), [1e-3, 0.1, 1.0])
    assert rep.constant <= hs_norm(sig)


def test_smoothing_flags_violation():
    m = SpectralModel.heat(2, gamma=0.0, lip_b=1.0, lip_sigma=0.1, horizon=1.0)
    rep = check_smoothing(m, lambda t, v: np.eye(2), _samples(2)[:1], [1e-4])
    assert rep.violated
