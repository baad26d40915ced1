"""Predictive distribution tests: closed forms vs quadrature, grouped
moments vs a dense conditional-Gaussian oracle, GP consistency at the
training points."""

import numpy as np
import pytest
from scipy.special import gammaln, ndtr

from lagaboost.boosting import BoostConfig, fit_lagaboost
from lagaboost.likelihoods import get_likelihood
from lagaboost.prediction import (bernoulli_probit_probability,
                                  gauss_hermite_expectation, poisson_log_mean,
                                  poisson_predictive_logpmf, predict_latent,
                                  predict_response)
from lagaboost.structures import GpStructure, GroupedStructure


def test_probit_closed_form_value():
    # Phi(0.7 / sqrt(1 + 0.5))
    got = bernoulli_probit_probability(np.array([0.7]), np.array([0.5]))
    assert got[0] == pytest.approx(ndtr(0.7 / np.sqrt(1.5)), rel=1e-14)


def test_poisson_closed_form_value():
    got = poisson_log_mean(np.array([0.3]), np.array([0.2]))
    assert got[0] == pytest.approx(np.exp(0.4), rel=1e-14)


def test_quadrature_matches_probit_closed_form():
    rng = np.random.default_rng(0)
    omega = rng.normal(0, 2, size=100)
    var = rng.uniform(0.01, 3.0, size=100)
    gh = gauss_hermite_expectation(ndtr, omega, var, n_nodes=30)
    np.testing.assert_allclose(gh, bernoulli_probit_probability(omega, var),
                               atol=1e-8)


def test_quadrature_matches_poisson_closed_form():
    rng = np.random.default_rng(1)
    omega = rng.normal(0, 1, size=100)
    var = rng.uniform(0.01, 1.0, size=100)
    gh = gauss_hermite_expectation(np.exp, omega, var, n_nodes=30)
    np.testing.assert_allclose(gh, poisson_log_mean(omega, var), rtol=1e-8)


def test_quadrature_error_shrinks_with_nodes():
    omega, var = np.array([0.4]), np.array([1.5])
    truth = bernoulli_probit_probability(omega, var)[0]
    errs = [abs(gauss_hermite_expectation(ndtr, omega, var, n_nodes=k)[0] - truth)
            for k in (5, 10, 20, 40)]
    assert errs[0] >= errs[1] >= errs[2] >= errs[3] - 1e-16
    assert errs[-1] < 1e-10


def test_quadrature_validates_nodes():
    with pytest.raises(ValueError):
        gauss_hermite_expectation(np.exp, np.array([0.0]), np.array([1.0]), n_nodes=0)


def test_poisson_predictive_pmf_sums_to_one():
    lp = poisson_predictive_logpmf(np.arange(200), 0.5, 0.3)
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-8)
    # degenerate latent: reduces to the plain Poisson pmf
    lp0 = poisson_predictive_logpmf(np.array([3.0]), np.array([0.2]),
                                    np.array([0.0]))
    lam = np.exp(0.2)
    assert lp0[0] == pytest.approx(3 * 0.2 - lam - gammaln(4.0), rel=1e-10)


def fit_small_grouped(seed=0, n=60, m=6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    group = np.repeat(np.arange(m), n // m)
    mu = 0.5 * X[:, 0] + rng.normal(0, 0.8, size=m)[group]
    y = (rng.uniform(size=n) < ndtr(mu)).astype(float)
    structure = GroupedStructure(group, m=m)
    model = fit_lagaboost(X, y, get_likelihood("bernoulli-probit"), structure,
                          BoostConfig(n_iter=5, max_depth=2))
    return model, X, group


def test_unseen_group_gets_prior_variance():
    model, X, group = fit_small_grouped()
    mom_seen = predict_latent(model, X[:3], group=group[:3])
    mom_unseen = predict_latent(model, X[:3], group=np.array([99, -1, 100]))
    sigma2 = model.theta[0]
    np.testing.assert_allclose(mom_unseen.omega_var, sigma2, rtol=1e-12)
    np.testing.assert_allclose(mom_unseen.omega, model.predict_F(X[:3]), rtol=1e-12)
    assert np.all(mom_seen.omega_var < sigma2)


def test_grouped_moments_match_dense_gaussian_oracle():
    # condition the Laplace Gaussian posterior directly with dense algebra
    model, X, group = fit_small_grouped(seed=3, n=6 * 4, m=6)
    mom = predict_latent(model, X, group=group)
    sigma2 = model.theta[0]
    m = model.structure_data["m"]
    idx = np.asarray(model.structure_data["group_index"])
    Z = np.zeros((len(idx), m))
    Z[np.arange(len(idx)), idx] = 1.0
    A = Z.T @ (model.mode_w[:, None] * Z) + np.eye(m) / sigma2
    cov_b = np.linalg.inv(A)  # posterior covariance of the group effects
    np.testing.assert_allclose(mom.omega_var, np.diag(cov_b)[idx], atol=1e-8)
    np.testing.assert_allclose(mom.omega, model.predict_F(X) + model.mode_b[idx],
                               atol=1e-10)


def test_gp_training_point_mean_equals_mode():
    rng = np.random.default_rng(5)
    n = 40
    X = rng.normal(size=(n, 3))
    locs = rng.uniform(size=(n, 2))
    mu = 0.5 * X[:, 0] + rng.normal(0, 0.7, size=n)
    y = (rng.uniform(size=n) < ndtr(mu)).astype(float)
    structure = GpStructure(locs)
    model = fit_lagaboost(X, y, get_likelihood("bernoulli-probit"), structure,
                          BoostConfig(n_iter=3, max_depth=2))
    mom = predict_latent(model, X, locations=locs)
    # at the training locations the predictive mean is F + b (the mode)
    np.testing.assert_allclose(mom.omega, model.predict_F(X) + model.mode_b,
                               atol=1e-5)
    assert np.all(mom.omega_var >= 0)
    assert np.all(mom.omega_var <= model.theta[0] * (1 + 1e-9))


def test_gp_far_point_reverts_to_prior():
    rng = np.random.default_rng(6)
    n = 30
    X = rng.normal(size=(n, 2))
    locs = rng.uniform(size=(n, 2))
    mu = rng.normal(0, 1, size=n)
    y = (rng.uniform(size=n) < ndtr(mu)).astype(float)
    model = fit_lagaboost(X, y, get_likelihood("bernoulli-probit"),
                          GpStructure(locs), BoostConfig(n_iter=2, max_depth=1))
    far = np.array([[1e6, 1e6]])
    mom = predict_latent(model, X[:1], locations=far)
    assert mom.omega_var[0] == pytest.approx(model.theta[0], rel=1e-6)
    assert mom.omega[0] == pytest.approx(model.predict_F(X[:1])[0], abs=1e-8)


def test_predict_response_closed_vs_quadrature():
    model, X, group = fit_small_grouped(seed=7)
    closed = predict_response(model, X, group=group)
    quad = predict_response(model, X, group=group, use_quadrature=True)
    np.testing.assert_allclose(closed, quad, atol=1e-8)


def test_predict_latent_requires_metadata():
    model, X, group = fit_small_grouped(seed=8)
    with pytest.raises(ValueError):
        predict_latent(model, X)
