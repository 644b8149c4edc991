import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ppdelab.errors import RegressionError
from ppdelab.paths import PathView
from ppdelab.regression import (FEATURES, check_features, feature_tensor, features_at,
                                ridge_fit)


def test_linear_target_recovered():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(500, 3))
    y = 2.0 + phi @ np.array([3.0, -1.0, 0.5])
    fit = ridge_fit(phi, y)
    np.testing.assert_allclose(fit.coef, [3.0, -1.0, 0.5], rtol=1e-6)
    np.testing.assert_allclose(fit.predict(phi), y, rtol=1e-6, atol=1e-6)


def test_constant_target_reproduced_exactly():
    phi = np.random.default_rng(1).normal(size=(100, 2))
    fit = ridge_fit(phi, np.full(100, 1.25))
    assert np.all(fit.coef == 0.0)
    assert np.all(fit.predict(phi) == 1.25)


def test_collinear_features_flagged_but_solved():
    x = np.random.default_rng(2).normal(size=200)
    phi = np.stack([x, x, 2 * x], axis=1)
    fit = ridge_fit(phi, 4 * x)
    assert fit.rank_deficient
    np.testing.assert_allclose(fit.predict(phi), 4 * x, rtol=1e-5, atol=1e-6)


def test_degenerate_features():
    fit = ridge_fit(np.ones((10, 2)), np.arange(10.0))
    assert fit.rank_deficient and fit.predict(np.ones((1, 2)))[0] == 4.5
    empty = ridge_fit(np.zeros((10, 0)), np.arange(10.0))
    assert empty.predict(np.zeros((3, 0)))[0] == 4.5


def test_non_finite_inputs_raise():
    with pytest.raises(RegressionError):
        ridge_fit(np.ones((3, 1)), np.array([1.0, np.nan, 0.0]))
    with pytest.raises(RegressionError):
        ridge_fit(np.array([[1.0], [np.inf], [0.0]]), np.zeros(3))


def test_multi_output_and_shift():
    rng = np.random.default_rng(3)
    phi = rng.normal(size=(300, 2))
    y = np.stack([phi[:, 0], 1 + phi[:, 1]], axis=1)
    fit = ridge_fit(phi, y)
    np.testing.assert_allclose(fit.predict(phi), y, atol=1e-6)
    np.testing.assert_allclose(fit.shifted(0.5).predict(phi), y + 0.5, atol=1e-6)


def test_unknown_feature_rejected():
    assert check_features(["value", "sup"]) == ("value", "sup")
    with pytest.raises(ValueError):
        check_features(["value", "tail"])


@given(vals=arrays(float, (3, 7, 2), elements=st.floats(-10, 10)), j=st.integers(0, 6),
       noise=st.floats(-5, 5))
def test_features_read_only_the_past(vals, j, noise):
    other = vals.copy()
    other[:, j + 1:] += noise
    a = feature_tensor(vals, 0.1, FEATURES)[:, j]
    b = feature_tensor(other, 0.1, FEATURES)[:, j]
    np.testing.assert_array_equal(a, b)


def test_features_at_matches_tensor():
    vals = np.random.default_rng(4).normal(size=(5, 9, 2))
    view = PathView(0.5, 4, 0.125, vals[:, :5])
    np.testing.assert_array_equal(features_at(view, FEATURES), feature_tensor(vals, 0.125, FEATURES)[:, 4])
    assert feature_tensor(vals, 0.125, FEATURES).shape == (5, 9, 2 + 2 + 2 + 1)
