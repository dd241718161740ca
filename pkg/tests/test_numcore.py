import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfedgm.numcore import (EPS_PD, finite_diff_grad, gaussian_product_diag, log_sum_exp,
                            project_pd, rng_stream, sample_gaussian)


def test_sample_gaussian_is_deterministic():
    a = sample_gaussian(np.zeros(4), np.ones(4), rng_stream(11, 2, "x"))
    b = sample_gaussian(np.zeros(4), np.ones(4), rng_stream(11, 2, "x"))
    assert a.tobytes() == b.tobytes()


def test_derived_streams_differ():
    a = rng_stream(11, 0, 0).standard_normal(3)
    b = rng_stream(11, 1, 0).standard_normal(3)
    assert not np.array_equal(a, b)


def test_sample_gaussian_vanishing_variance():
    mean = np.array([0.3, -2.0, 5.0])
    x = sample_gaussian(mean, np.full(3, EPS_PD), rng_stream(0))
    assert np.all(np.abs(x - mean) < 1e-2)


def test_sample_gaussian_moments():
    x = sample_gaussian([1.0, 2.0], [4.0, 9.0], rng_stream(3), size=100_000)
    np.testing.assert_allclose(x.mean(axis=0), [1.0, 2.0], atol=0.05)
    np.testing.assert_allclose(x.var(axis=0), [4.0, 9.0], atol=0.2)
    # five standard errors per coordinate
    se_mean = np.sqrt(np.array([4.0, 9.0]) / len(x))
    se_var = np.array([4.0, 9.0]) * np.sqrt(2.0 / len(x))
    assert np.all(np.abs(x.mean(axis=0) - [1.0, 2.0]) < 5 * se_mean)
    assert np.all(np.abs(x.var(axis=0) - [4.0, 9.0]) < 5 * se_var)


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0]) == 0.0
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + np.log(2.0), rel=1e-15)
    direct = np.log(np.exp(1.0) + np.exp(2.0) + np.exp(3.0))
    assert log_sum_exp([1.0, 2.0, 3.0]) == pytest.approx(direct, rel=1e-14)
    assert log_sum_exp([1.0, 2.0, 3.0]) == pytest.approx(3.40760596, abs=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-1e3, 1e3))
def test_log_sum_exp_shift(values, c):
    v = np.array(values)
    lhs = log_sum_exp(v + c)
    rhs = log_sum_exp(v) + c
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


def test_finite_diff_quadratic_and_constant():
    g = finite_diff_grad(lambda x: float(np.sum(x * x)), np.array([1.0, -2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, np.ones(3)), np.zeros(3))


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), 0.0)


def test_project_pd_floor():
    a = np.array([[-1.0, 0.0, 2.0]])
    project_pd(a)
    assert a.min() >= EPS_PD and a[0, 2] == 2.0


def test_gaussian_product_precisions_add():
    mean, prec = gaussian_product_diag([2.0], [1.0], [0.0], [1.0])
    assert prec[0] == 2.0 and mean[0] == 1.0
