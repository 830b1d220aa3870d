import math

import numpy as np
import pytest

from flowtemper import diffgraph as dg
from flowtemper.mathcore import RngStream, chi2_quantile
from flowtemper.targets import (
    EightSchoolsData,
    GmGenConfig,
    GmSpec,
    eight_schools_log_density,
    eight_schools_target,
    generate_gm_centers,
    get_target,
    gm_log_density,
    load_eight_schools,
    make_gm,
    ring_gm_2d,
    ring_target,
)


# -- ring mixture -------------------------------------------------------------


def test_ring_geometry():
    spec = ring_gm_2d()
    np.testing.assert_allclose(spec.centers[0], [7.0, 3.0], atol=1e-12)
    assert spec.sigma == 0.38
    np.testing.assert_allclose(spec.weights.sum(), 1.0, atol=1e-15)
    k = len(spec.centers)
    for i in range(k):
        for j in range(i + 1, k):
            assert np.linalg.norm(spec.centers[i] - spec.centers[j]) >= 4.0 - 1e-9
    adjacent = np.linalg.norm(spec.centers[0] - spec.centers[1])
    assert adjacent == pytest.approx(4.0, abs=1e-12)


def test_ring_density_at_mode():
    spec = ring_gm_2d()
    # independent six-term oracle in full precision
    var = spec.sigma**2
    terms = [
        math.log(w) - math.log(2 * math.pi * var) - float(np.sum(([7.0, 3.0] - c) ** 2)) / (2 * var)
        for w, c in zip(spec.weights, spec.centers)
    ]
    oracle = np.logaddexp.reduce(terms)
    assert gm_log_density(spec, [7.0, 3.0]) == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(math.log(1 / 6) - math.log(2 * math.pi * 0.38**2), abs=1e-4)


def test_ring_quadrature_normalized():
    spec = ring_gm_2d()
    grid = np.linspace(-6.0, 12.0, 721)
    X, Y = np.meshgrid(grid, grid, indexing="ij")
    lp = gm_log_density(spec, np.column_stack([X.ravel(), Y.ravel()]))
    total = np.trapezoid(np.trapezoid(np.exp(lp).reshape(X.shape), grid, axis=1), grid)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_gm_density_matches_naive_sum():
    spec = ring_gm_2d()
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 10, size=(50, 2))
    var = spec.sigma**2
    direct = np.zeros(50)
    for w, c in zip(spec.weights, spec.centers):
        direct += w * np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * var)) / (2 * math.pi * var)
    keep = direct > 1e-290
    np.testing.assert_allclose(gm_log_density(spec, pts)[keep], np.log(direct[keep]), atol=1e-9)


def test_gm_density_permutation_symmetry():
    spec = ring_gm_2d()
    perm = np.random.default_rng(1).permutation(6)
    shuffled = GmSpec(spec.centers[perm], spec.sigma, spec.weights[perm])
    pts = np.random.default_rng(2).uniform(-2, 10, size=(20, 2))
    np.testing.assert_allclose(
        gm_log_density(spec, pts), gm_log_density(shuffled, pts), atol=1e-12
    )


def test_gm_density_single_center_peak():
    c = np.zeros((1, 10))
    c[0, 0] = 1.0
    spec = GmSpec(c, 1.0, np.array([1.0]))
    assert gm_log_density(spec, c[0]) == pytest.approx(-5.0 * math.log(2 * math.pi), abs=1e-12)


def test_gm_density_dim_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        gm_log_density(ring_gm_2d(), np.zeros((3, 5)))


def test_gm_density_is_tape_aware():
    spec = ring_gm_2d()
    theta0 = np.array([2.0, 4.0])

    def obj(leaf):
        return dg.sum_(gm_log_density(spec, dg.reshape(leaf, (1, 2))))

    _, grad = dg.evaluate_with_gradient(obj, theta0)
    h = 1e-6
    fd = np.zeros(2)
    for i in range(2):
        up, dn = theta0.copy(), theta0.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (gm_log_density(spec, up) - gm_log_density(spec, dn)) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-6)


# -- randomized center generation ---------------------------------------------


def test_generate_single_center():
    cfg = GmGenConfig(K=1, d=3, d_min=1.0, d_max=2.0, seed=5)
    centers = generate_gm_centers(cfg)
    assert centers.shape == (1, 3)
    assert np.all(np.abs(centers) <= 5.0)


def test_generate_constraints_hold():
    # placement can legitimately exhaust max_tries in 20-d (the acceptance
    # shell is narrow); the contract says retry with a new seed
    for d, K, want in ((10, 5, 10), (20, 5, 6)):
        d_min = math.sqrt(chi2_quantile(d, 0.99))
        d_max = math.sqrt(chi2_quantile(d, 0.999))
        done = 0
        seed = 0
        while done < want:
            assert seed < 10 * want, "placement failure rate implausibly high"
            cfg = GmGenConfig(K=K, d=d, d_min=d_min, d_max=d_max, seed=seed)
            try:
                centers = generate_gm_centers(cfg, RngStream(seed))
            except RuntimeError:
                seed += 1
                continue
            seed += 1
            done += 1
            assert centers.shape == (K, d)
            assert np.all(np.abs(centers) <= 5.0)
            for i in range(K):
                dists = np.linalg.norm(np.delete(centers, i, axis=0) - centers[i], axis=1)
                assert np.all(dists > d_min)
            for i in range(1, K):
                earlier = np.linalg.norm(centers[:i] - centers[i], axis=1)
                assert earlier.min() < d_max


def test_generate_deterministic():
    cfg = GmGenConfig(K=4, d=5, d_min=2.0, d_max=4.0, seed=9)
    a = generate_gm_centers(cfg, RngStream(9))
    b = generate_gm_centers(cfg, RngStream(9))
    np.testing.assert_array_equal(a, b)


def test_generate_failure_raises():
    # A (d_min, d_max) window too narrow to hit in one small batch.
    cfg = GmGenConfig(K=2, d=2, d_min=1.0, d_max=1.0001, M=10, max_tries=2, seed=0)
    with pytest.raises(RuntimeError, match="could not place"):
        generate_gm_centers(cfg)


def test_make_gm_quantile_bounds():
    spec, target = make_gm(10, seed=3)
    assert spec.d_min == pytest.approx(4.8176, abs=1e-3)
    assert spec.d_max == pytest.approx(5.4395, abs=1e-3)
    assert target.true_log_evidence == 0.0
    assert target.dim == 10
    spec20, _ = make_gm(20, seed=3)
    assert spec20.d_min == pytest.approx(6.129, abs=1e-3)


def test_gm_spec_json_roundtrip(tmp_path):
    spec, _ = make_gm(4, K=3, seed=11)
    path = tmp_path / "gm.json"
    spec.save(path)
    loaded = GmSpec.load(path)
    np.testing.assert_array_equal(loaded.centers, spec.centers)
    np.testing.assert_array_equal(loaded.weights, spec.weights)
    assert loaded.sigma == spec.sigma and loaded.seed == spec.seed
    assert loaded.d_min == spec.d_min and loaded.d_max == spec.d_max


# -- eight schools -------------------------------------------------------------


def test_fixture_values():
    data = load_eight_schools()
    np.testing.assert_array_equal(data.y, [28, 8, -3, 7, -1, 1, 18, 12])
    np.testing.assert_array_equal(data.sigma, [15, 10, 16, 11, 9, 11, 10, 18])


def _likelihood_only(data, u):
    # independent recomputation of the likelihood terms
    mu, log_tau, eta = u[0], u[1], np.asarray(u[2:])
    tau = math.exp(log_tau)
    means = mu + tau * eta
    return float(
        np.sum(-0.5 * np.log(2 * np.pi * data.sigma**2) - (data.y - means) ** 2 / (2 * data.sigma**2))
    )


def test_eight_schools_prior_quadrature():
    data = load_eight_schools()
    phi0 = -0.5 * math.log(2 * math.pi)
    mus = np.linspace(-60, 60, 481)
    lts = np.linspace(-22, 22, 481)
    M, L = np.meshgrid(mus, lts, indexing="ij")
    u = np.zeros((M.size, 10))
    u[:, 0] = M.ravel()
    u[:, 1] = L.ravel()
    lp = eight_schools_log_density(data, u)
    # independent vectorized likelihood oracle on the eta=0 slice
    lik = np.sum(
        -0.5 * np.log(2 * np.pi * data.sigma**2)
        - (data.y[None, :] - u[:, 0:1]) ** 2 / (2 * data.sigma**2),
        axis=1,
    )
    # prior-only density on the (mu, log tau) slice, eta fixed at its mode
    prior = lp - lik - 8 * phi0
    total = np.trapezoid(np.trapezoid(np.exp(prior).reshape(M.shape), lts, axis=1), mus)
    assert total == pytest.approx(1.0, abs=1e-2)


def test_eight_schools_jacobian_shift():
    data = load_eight_schools()
    rng = np.random.default_rng(4)
    for _ in range(5):
        u = rng.normal(size=10)
        delta = 0.37
        u2 = u.copy()
        u2[1] += delta
        got = eight_schools_log_density(data, u2) - eight_schools_log_density(data, u)
        tau, tau2 = math.exp(u[1]), math.exp(u2[1])
        lik_diff = _likelihood_only(data, u2) - _likelihood_only(data, u)
        cauchy_diff = math.log(1 + (tau / 5) ** 2) - math.log(1 + (tau2 / 5) ** 2)
        assert got == pytest.approx(lik_diff + cauchy_diff + delta, abs=1e-10)


def test_eight_schools_translation_consistency():
    data = load_eight_schools()
    shifted = EightSchoolsData(y=data.y + 10.0, sigma=data.sigma)
    rng = np.random.default_rng(5)
    for _ in range(5):
        u = rng.normal(size=10)
        u_shift = u.copy()
        u_shift[0] += 10.0
        base = eight_schools_log_density(data, u)
        moved = eight_schools_log_density(shifted, u_shift)
        mu_prior_change = (-u_shift[0] ** 2 + u[0] ** 2) / 50.0
        assert moved - base == pytest.approx(mu_prior_change, abs=1e-9)


def test_eight_schools_finite_and_tape_aware():
    data, target = eight_schools_target()
    extreme = np.array([[50.0, 12.0, 3, -3, 3, -3, 3, -3, 3, -3]])
    assert np.isfinite(target.log_density(extreme)).all()

    u0 = np.random.default_rng(6).normal(size=10)

    def obj(leaf):
        return dg.sum_(target.log_density(dg.reshape(leaf, (1, 10))))

    _, grad = dg.evaluate_with_gradient(obj, u0)
    h = 1e-6
    fd = np.zeros(10)
    for i in range(10):
        up, dn = u0.copy(), u0.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (target.log_density_unnorm(up) - target.log_density_unnorm(dn)) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)


def test_get_target_names():
    assert get_target("ring2d").dim == 2
    assert get_target("eight_schools").dim == 10
    with pytest.raises(ValueError, match="unknown target"):
        get_target("nope")


def test_ring_target_model():
    spec, target = ring_target()
    assert target.mode_centers.shape == (6, 2)
    assert target.component_sigma == 0.38
    assert target.log_density_unnorm([7.0, 3.0]) == pytest.approx(
        gm_log_density(spec, [7.0, 3.0])
    )
