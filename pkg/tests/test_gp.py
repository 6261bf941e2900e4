import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from battwin.gp import (LENGTHSCALE_GRID, N_UNIFORM, GpSurrogate, candidate_set, expected_improvement, gp_fit,
                        lhs_init, matern52, propose_next)


def test_matern_hand_value():
    r = 0.3 / 0.2
    want = (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)
    got = matern52(np.array([[0.1, 0.2]]), np.array([[0.1, 0.5]]), 0.2)[0, 0]
    assert got == pytest.approx(want, rel=1e-14)


def test_one_point_posterior_by_hand():
    x0, y0, ell, sn = 0.4, 0.7, 0.2, 1e-6
    g = GpSurrogate.from_data([[x0]], [y0], ell, 1.0, sn)
    x = 0.55
    r = abs(x - x0) / ell
    k = (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)
    mean, var = g.predict([[x]])
    assert mean[0] == pytest.approx(k * y0 / (1 + sn), abs=1e-10)
    assert var[0] == pytest.approx(1 - k * k / (1 + sn), abs=1e-10)
    lml = -0.5 * y0 * y0 / (1 + sn) - 0.5 * math.log(1 + sn) - 0.5 * math.log(2 * math.pi)
    assert g.log_marginal_likelihood == pytest.approx(lml, abs=1e-12)


@pytest.fixture
def data():
    rng = np.random.default_rng(3)
    X = rng.random((15, 3))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2 - X[:, 2]
    return X, y


def test_interpolates_training_points(data):
    X, y = data
    g = gp_fit(X, y)
    mean, var = g.predict(X)
    np.testing.assert_allclose(mean, g.standardize(y), atol=1e-3)
    assert np.all(var >= 0) and np.all(var <= 2e-6 * 10)


def test_lengthscale_is_lml_argmax(data):
    X, y = data
    g = gp_fit(X, y)
    ys = g.standardize(y)
    for ell in LENGTHSCALE_GRID:
        other = GpSurrogate.from_data(X, ys, ell)
        assert g.log_marginal_likelihood >= other.log_marginal_likelihood


def test_prior_reversion_far_from_data():
    g = GpSurrogate.from_data([[0.0, 0.0]], [1.5], 0.05)
    mean, var = g.predict([[1.0, 1.0]])
    assert abs(mean[0]) < 1e-10
    assert var[0] == pytest.approx(1.0, abs=1e-10)


def test_identical_targets_constant_mean():
    g = gp_fit([[0.1], [0.9]], [2.0, 2.0])
    mean, _ = g.predict(np.linspace(0, 1, 11)[:, None])
    np.testing.assert_allclose(mean, mean[0], atol=1e-12)


def test_nugget_escalation_on_duplicates():
    X = np.array([[0.3, 0.3]] * 4)
    g = gp_fit(X, [0.0, 1.0, 2.0, 3.0])
    assert g.noise_var >= 1e-6


def test_ei_spot_values():
    assert expected_improvement(1.0, 0.0, 0.5) == 0.0
    assert expected_improvement(0.0, 0.0, 0.5) == 0.5
    assert expected_improvement(0.5, 1.0, 0.5) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    with pytest.raises(ValueError):
        expected_improvement(0.0, -1.0, 0.0)


@given(st.floats(-5, 5), st.floats(0, 10), st.floats(-5, 5))
def test_ei_nonnegative_and_monotone_in_best(m, v, b):
    e = expected_improvement(m, v, b)
    assert e >= 0
    assert expected_improvement(m, v, b + 0.1) >= e - 1e-12


def test_ei_vanishes_with_sigma():
    assert expected_improvement(1.0, 1e-20, 0.9) < 1e-12


@given(st.integers(1, 15), st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_lhs_stratification(dim, n0, seed):
    P = lhs_init(dim, n0, seed)
    assert P.shape == (n0, dim)
    for j in range(dim):
        np.testing.assert_array_equal(np.sort(np.floor(P[:, j] * n0)), np.arange(n0))
    np.testing.assert_array_equal(P, lhs_init(dim, n0, seed))


def test_lhs_quartiles():
    P = lhs_init(1, 4, 7).ravel()
    assert sorted(np.floor(P * 4).astype(int).tolist()) == [0, 1, 2, 3]


def test_candidate_layout():
    inc = np.full(4, 0.5)
    C = candidate_set(4, inc, 1)
    assert C.shape == (N_UNIFORM + 1 + 256, 4)
    np.testing.assert_array_equal(C[N_UNIFORM], inc)
    assert C.min() >= 0 and C.max() <= 1


def test_propose_tie_break_lowest_index():
    g = GpSurrogate.from_data([[0.5, 0.5]], [0.0], 0.2)
    x = propose_next(g, -1e6, np.array([0.5, 0.5]), seed=5)
    np.testing.assert_array_equal(x, candidate_set(2, [0.5, 0.5], 5)[0])


def test_propose_beats_incumbent_and_deterministic(data):
    X, y = data
    g = gp_fit(X, y)
    i = int(np.argmin(y))
    best = float(g.standardize(y[i]))
    x = propose_next(g, best, X[i], 11)
    ei = lambda p: expected_improvement(*g.predict(p[None, :]), best)[0]
    assert ei(x) >= ei(X[i])
    np.testing.assert_array_equal(x, propose_next(g, best, X[i], 11))
