import math

import numpy as np
import pytest
from scipy import stats

from flowtemper.mathcore import (
    Probability,
    RngStream,
    chi2_quantile,
    gaussian_logpdf,
    gaussian_logpdf_rows,
    log_sum_exp,
    sample_standard_normal,
    sample_standard_normal_matrix,
)


def test_chi2_quantile_closed_form_dof2():
    # For dof=2 the quantile is -2*ln(1-alpha).
    for alpha in (0.5, 0.9, 0.99, 0.999):
        assert chi2_quantile(2, alpha) == pytest.approx(-2.0 * math.log(1.0 - alpha), abs=1e-9)


def test_chi2_quantile_examples():
    assert chi2_quantile(2, 0.9) == pytest.approx(4.605170186, abs=1e-8)
    assert chi2_quantile(7, 0.0) == 0.0
    assert chi2_quantile(10, 0.99) == pytest.approx(23.209, abs=1e-3)


def test_chi2_quantile_against_scipy():
    for dof in (1, 2, 3, 5, 10, 20):
        for alpha in (0.01, 0.25, 0.5, 0.9, 0.99, 0.999):
            assert chi2_quantile(dof, alpha) == pytest.approx(
                stats.chi2.ppf(alpha, dof), abs=1e-8
            )


def test_chi2_quantile_monotone_in_alpha():
    alphas = np.linspace(0.01, 0.995, 40)
    for dof in (1, 4, 12):
        q = [chi2_quantile(dof, a) for a in alphas]
        assert all(b > a for a, b in zip(q, q[1:]))


def test_chi2_quantile_errors():
    with pytest.raises(ValueError, match="diverges"):
        chi2_quantile(3, 1.0)
    with pytest.raises(ValueError, match="invalid dof"):
        chi2_quantile(0, 0.5)


def test_probability_bounds():
    Probability(0.0)
    Probability(1.0)
    with pytest.raises(ValueError):
        Probability(1.0001)
    with pytest.raises(ValueError):
        Probability(-0.1)
    assert chi2_quantile(2, Probability(0.9)) == pytest.approx(4.605170186, abs=1e-8)


def test_gaussian_logpdf_values():
    assert gaussian_logpdf(np.zeros(2), np.zeros(2), 1.0) == pytest.approx(
        -math.log(2 * math.pi), abs=1e-12
    )
    for var in (0.3, 1.0, 7.5):
        assert gaussian_logpdf([1.7], [1.7], var) == pytest.approx(
            -0.5 * math.log(2 * math.pi * var), abs=1e-12
        )
    assert gaussian_logpdf([1.0, 0.0], np.zeros(2), 1.0) == pytest.approx(
        -math.log(2 * math.pi) - 0.5, abs=1e-12
    )


def test_gaussian_logpdf_dim_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        gaussian_logpdf(np.zeros(3), np.zeros(2), 1.0)


def test_gaussian_logpdf_normalizes_1d():
    # Trapezoid quadrature over [-8, 8].
    x = np.linspace(-8, 8, 20001)
    dens = np.exp([gaussian_logpdf([xi], [0.0], 1.0) for xi in x])
    assert np.trapezoid(dens, x) == pytest.approx(1.0, abs=1e-6)


def test_gaussian_logpdf_rows_matches_scalar():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    var = np.abs(rng.normal(size=20)) + 0.5
    got = gaussian_logpdf_rows(x, var)
    want = [gaussian_logpdf(x[i], np.zeros(3), var[i]) for i in range(20)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_log_sum_exp_basic():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-12)
    assert log_sum_exp([-3.25]) == -3.25
    assert log_sum_exp([-1000.0, -1000.5]) == pytest.approx(
        -1000.0 + math.log1p(math.exp(-0.5)), abs=1e-9
    )


def test_log_sum_exp_shift_equivariance():
    rng = np.random.default_rng(1)
    for _ in range(25):
        v = rng.normal(scale=10.0, size=rng.integers(1, 12))
        c = rng.normal(scale=100.0)
        assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, abs=1e-9)


def test_log_sum_exp_empty():
    with pytest.raises(ValueError):
        log_sum_exp([])


def test_rng_determinism_and_independence():
    s = RngStream(1234, 7)
    a = sample_standard_normal(s, 5)
    b = sample_standard_normal(s, 5)
    np.testing.assert_array_equal(a, b)
    c = sample_standard_normal(RngStream(1234, 8), 5)
    assert not np.array_equal(a, c)


def test_rng_child_streams_stable_and_distinct():
    s = RngStream(99)
    assert s.child("epoch", 3) == s.child("epoch", 3)
    assert s.child("epoch", 3) != s.child("epoch", 4)
    assert s.child("z") != s.child("elbo")
    a = sample_standard_normal(s.child("z", 0), 4)
    b = sample_standard_normal(s.child("z", 1), 4)
    assert not np.array_equal(a, b)


def test_standard_normal_moments():
    x = sample_standard_normal_matrix(RngStream(5, 1), 100_000, 2)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.02)


def test_standard_normal_central_coverage():
    z = sample_standard_normal_matrix(RngStream(6, 2), 100_000, 1)[:, 0]
    frac = np.mean(np.abs(z) < 1.959964)
    assert abs(frac - 0.95) < 0.006
