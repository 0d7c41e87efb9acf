"""Regression-theory module against independently derived oracles.

Expected values here are computed in the test body from first principles
(normal equations, gaussian entropy formula, kron structure), never by
calling the function under test twice.
"""

import math

import numpy as np
import pytest

from civil import theory


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(3)
    inputs = rng.normal(size=(40, 5))
    targets = rng.normal(size=(40, 2))
    fitted = theory.ols_fit(inputs, targets)
    oracle = np.linalg.solve(inputs.T @ inputs, inputs.T @ targets)
    np.testing.assert_allclose(fitted, oracle, atol=1e-10)


def test_ols_minimum_norm_splits_duplicated_column():
    # y = 1.0 * x with x duplicated into two columns: every solution has
    # w0 + w1 = 1; the pseudo-inverse picks the smallest norm, (0.5, 0.5).
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 1))
    inputs = np.hstack([x, x])
    fitted = theory.ols_fit(inputs, x.ravel())
    np.testing.assert_allclose(fitted, [0.5, 0.5], atol=1e-12)


def test_ols_shape_follows_targets():
    rng = np.random.default_rng(5)
    inputs = rng.normal(size=(10, 3))
    assert theory.ols_fit(inputs, rng.normal(size=10)).shape == (3,)
    assert theory.ols_fit(inputs, rng.normal(size=(10, 4))).shape == (3, 4)
    with pytest.raises(ValueError):
        theory.ols_fit(inputs, rng.normal(size=11))


def test_nullspace_of_duplicated_design():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 2))
    inputs = np.hstack([x, x[:, :1]])  # column 2 copies column 0
    basis = theory.nullspace_basis(inputs)
    assert basis.shape == (3, 1)
    direction = basis[:, 0] * np.sign(basis[0, 0])
    np.testing.assert_allclose(direction, [1 / math.sqrt(2), 0, -1 / math.sqrt(2)], atol=1e-10)
    # and the basis really annihilates the design
    assert np.abs(inputs @ basis).max() < 1e-10


def test_nullspace_full_rank_is_empty():
    rng = np.random.default_rng(7)
    assert theory.nullspace_basis(rng.normal(size=(20, 4))).shape == (4, 0)


def test_make_regression_correlation_modes():
    dup = theory.make_regression(
        theory.RegressionSpec(obs_dim=2, feature_dim=3, correlation="duplicated", seed=1)
    )
    np.testing.assert_array_equal(dup.inputs[:, 2], dup.inputs[:, 1])

    dep = theory.make_regression(
        theory.RegressionSpec(
            obs_dim=3, feature_dim=4, correlation="linear_dependence", dependent_columns=2, seed=1
        )
    )
    basis = theory.nullspace_basis(dep.inputs)
    assert basis.shape[1] == 2


def test_make_regression_noise_free_targets_are_exact():
    spec = theory.RegressionSpec(obs_dim=1, feature_dim=2, noise_std=0.0, seed=9)
    problem = theory.make_regression(spec)
    np.testing.assert_allclose(problem.targets, problem.inputs @ problem.true_weights, atol=1e-12)


def test_estimator_covariance_matches_kron_form():
    spec = theory.RegressionSpec(
        state_dim=2, obs_dim=1, feature_dim=3, num_samples=300, noise_std=0.4, seed=12
    )
    empirical, analytic = theory.estimator_covariance_mc(spec, trials=4000)
    # analytic block structure from an independent reconstruction of the design
    phi = np.random.default_rng(12).normal(0.0, 1.0, size=(300, 3))
    expected = np.kron(np.eye(2), 0.4**2 * np.linalg.inv(phi.T @ phi))
    np.testing.assert_allclose(analytic, expected, atol=1e-12)
    rel = np.linalg.norm(empirical - analytic) / np.linalg.norm(analytic)
    assert rel < 0.10


def test_gaussian_entropy_diagonal_oracle():
    stds = np.array([0.5, 2.0, 1.3])
    cov = np.diag(stds**2)
    oracle = 3 / 2 * (1 + math.log(2 * math.pi)) + np.log(stds).sum()
    assert theory.gaussian_entropy(cov) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValueError):
        theory.gaussian_entropy(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_entropy_closed_form_slope_and_doubling():
    # affine in d: h(d) = d/2 (1 + ln 2 pi + ln ratio)
    noise, feat, n = 0.5, 1.0, 400
    ratio = noise**2 / (n * feat**2)
    slope = 0.5 * (1 + math.log(2 * math.pi) + math.log(ratio))
    values = [theory.estimator_entropy(d, n, noise, feat) for d in range(1, 9)]
    diffs = np.diff(values)
    np.testing.assert_allclose(diffs, slope, atol=1e-12)
    # doubling N drops entropy by d/2 ln 2 exactly in the closed form
    for d in (1, 4, 7):
        drop = theory.estimator_entropy(d, n, noise, feat) - theory.estimator_entropy(
            d, 2 * n, noise, feat
        )
        assert drop == pytest.approx(d / 2 * math.log(2), abs=1e-12)


def test_entropy_mc_tracks_closed_form():
    h_mc = theory.estimator_entropy_mc(3, 400, 0.5, 1.0, trials=2048, replicates=8, seed=5)
    h_cf = theory.estimator_entropy(3, 400, 0.5, 1.0)
    assert abs(h_mc - h_cf) / abs(h_cf) < 0.05


def test_confusion_experiment_exact_duplicated_solution():
    spec = theory.RegressionSpec(
        state_dim=1,
        obs_dim=1,
        feature_dim=2,
        num_samples=128,
        noise_std=0.0,
        correlation="duplicated",
        duplicate_pair=(0, 1),
        true_weights=np.array([[1.0], [0.0]]),
        seed=2,
    )
    report = theory.confusion_experiment(spec, relevant_columns=(0,))
    np.testing.assert_allclose(report.learned_weights, [[0.5], [0.5]], atol=1e-10)
    assert report.train_rmse < 1e-10
    assert report.masked_recovery_error < 1e-10
    assert report.nullspace.shape == (2, 1)
    # the learned weights fail off the correlation manifold: probing the
    # unit state with the confound clamped to zero predicts half the truth
    probe = np.array([1.0, 0.0]) @ report.learned_weights
    assert abs(probe[0] - 0.5) < 1e-10
    # while the masked fit is exact there
    masked_probe = np.array([1.0]) @ report.masked_weights
    assert abs(masked_probe[0] - 1.0) < 1e-10


def test_confusion_experiment_decorrelated_gap():
    # with noise and a confound carrying no weight of its own, the full fit
    # still degrades off-manifold while the masked fit stays near the floor
    spec = theory.RegressionSpec(
        state_dim=1,
        obs_dim=1,
        feature_dim=2,
        num_samples=500,
        noise_std=0.05,
        correlation="duplicated",
        duplicate_pair=(0, 1),
        true_weights=np.array([[1.0], [0.0]]),
        seed=8,
    )
    report = theory.confusion_experiment(spec, relevant_columns=(0,))
    assert report.decorrelated_test_rmse > 5 * report.correlated_test_rmse
    assert report.masked_decorrelated_rmse < 2 * report.correlated_test_rmse


def test_spec_validation():
    with pytest.raises(ValueError):
        theory.RegressionSpec(feature_dim=0)
    with pytest.raises(ValueError):
        theory.RegressionSpec(obs_dim=1, feature_dim=5)
    with pytest.raises(ValueError):
        theory.RegressionSpec(correlation="weird")
    with pytest.raises(ValueError):
        theory.RegressionSpec(true_weights=np.ones((5, 1)))
    with pytest.raises(ValueError):
        theory.confusion_experiment(theory.RegressionSpec(), relevant_columns=(0,))
    with pytest.raises(ValueError):
        theory.estimator_covariance_mc(theory.RegressionSpec(), trials=1)
