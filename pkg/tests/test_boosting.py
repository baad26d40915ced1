"""Boosting loop tests: intercept optimality, objective monotonicity,
hyperparameter steps against grid search, serialization, and the
out-of-sample variant."""

import numpy as np
import pytest
from scipy.special import ndtr

import lagaboost.boosting as boosting
from lagaboost.boosting import (BoostConfig, BoostedModel, fit_independent_boosting,
                                fit_lagaboost, fit_lagaboost_oos,
                                fit_linear_baseline, make_folds, optimize_theta)
from lagaboost.laplace import make_engine
from lagaboost.likelihoods import get_likelihood
from lagaboost.structures import GpStructure, GroupedStructure


def grouped_data(seed, n=200, m=20, sigma2=0.8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    group = rng.integers(0, m, size=n)
    F = 0.8 * X[:, 0] - 0.5 * (X[:, 1] > 0)
    mu = F + rng.normal(0, np.sqrt(sigma2), size=m)[group]
    y = (rng.uniform(size=n) < ndtr(mu)).astype(float)
    return X, y, GroupedStructure(group, m=m)


def gp_data(seed, n=60):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    locs = rng.uniform(size=(n, 2))
    F = 0.7 * X[:, 0]
    mu = F + rng.normal(0, 0.7, size=n)
    y = (rng.uniform(size=n) < ndtr(mu)).astype(float)
    return X, y, GpStructure(locs)


def test_config_validation():
    with pytest.raises(ValueError):
        BoostConfig(n_iter=-1)
    with pytest.raises(ValueError):
        BoostConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        BoostConfig(learning_rate=1.5)
    with pytest.raises(ValueError):
        BoostConfig(min_samples_leaf=0)


def test_zero_iterations_gives_optimal_intercept():
    X, y, structure = grouped_data(0)
    lik = get_likelihood("bernoulli-probit")
    model = fit_lagaboost(X, y, lik, structure, BoostConfig(n_iter=0),
                          theta_fixed=[0.8])
    assert model.trees == []
    engine = make_engine(lik, structure, y)
    # scan constants around the chosen intercept: none may beat it
    base = engine.find_mode(np.full(len(y), model.f0), [0.8]).nll
    for c in model.f0 + np.linspace(-0.5, 0.5, 21):
        assert engine.find_mode(np.full(len(y), c), [0.8]).nll >= base - 1e-6


def test_objective_monotone_with_frozen_theta():
    X, y, structure = grouped_data(1)
    lik = get_likelihood("bernoulli-probit")
    model = fit_lagaboost(X, y, lik, structure,
                          BoostConfig(n_iter=100, learning_rate=0.01, max_depth=3),
                          theta_fixed=[0.8], trace_nll=True)
    nll = np.asarray(model.fit_log["nll"])
    assert np.all(np.diff(nll) <= 1e-10)


def test_optimize_theta_matches_grid_search():
    X, y, structure = grouped_data(2)
    lik = get_likelihood("bernoulli-probit")
    engine = make_engine(lik, structure, y)
    F = np.zeros(len(y))
    theta_hat, state, info = optimize_theta(engine, F, [1.0], max_steps=200,
                                            tol=1e-10)
    grid = np.exp(np.linspace(np.log(0.05), np.log(5.0), 400))
    nlls = np.array([engine.find_mode(F, [s]).nll for s in grid])
    best = grid[np.argmin(nlls)]
    # optimizer must be at least as good as the best grid point
    assert state.nll <= nlls.min() + 1e-6
    assert theta_hat[0] == pytest.approx(best, rel=2e-2)


def test_optimize_theta_without_momentum_converges():
    X, y, structure = grouped_data(2)
    engine = make_engine(get_likelihood("bernoulli-probit"), structure, y)
    F = np.zeros(len(y))
    t_mom, s_mom, _ = optimize_theta(engine, F, [1.0], max_steps=200, tol=1e-10,
                                     momentum=True)
    t_gd, s_gd, _ = optimize_theta(engine, F, [1.0], max_steps=200, tol=1e-10,
                                   momentum=False)
    assert s_gd.nll == pytest.approx(s_mom.nll, abs=1e-5)
    assert t_gd[0] == pytest.approx(t_mom[0], rel=1e-2)


def test_optimize_theta_never_increases_objective():
    X, y, structure = gp_data(3)
    engine = make_engine(get_likelihood("bernoulli-probit"), structure, y)
    F = np.zeros(len(y))
    start = engine.find_mode(F, [1.0, 0.3]).nll
    theta, state, _ = optimize_theta(engine, F, [1.0, 0.3], max_steps=10)
    assert state.nll <= start + 1e-12


def test_linear_baseline_intercept_only_equals_boosting_intercept():
    X, y, structure = grouped_data(5)
    lik = get_likelihood("bernoulli-probit")
    X0 = np.zeros((len(y), 0))  # no covariates: the fit is intercept-only
    lin = fit_linear_baseline(X0, y, lik, structure,
                              BoostConfig(theta0=np.array([0.8])), tol=1e-12)
    model = fit_lagaboost(np.zeros((len(y), 1)), y, lik,
                          structure, BoostConfig(n_iter=0),
                          theta_fixed=lin.theta)
    assert lin.beta[0] == pytest.approx(model.f0, abs=1e-3)


def test_linear_baseline_beats_random_coefficients():
    X, y, structure = grouped_data(6)
    lik = get_likelihood("bernoulli-probit")
    lin = fit_linear_baseline(X, y, lik, structure, BoostConfig())
    engine = make_engine(lik, structure, y)
    Xi = np.hstack([np.ones((len(y), 1)), X])
    nll_fit = engine.find_mode(Xi @ lin.beta, lin.theta).nll
    rng = np.random.default_rng(0)
    for _ in range(5):
        beta = lin.beta + rng.normal(0, 0.1, size=len(lin.beta))
        assert engine.find_mode(Xi @ beta, lin.theta).nll >= nll_fit - 1e-6


def test_serialization_round_trip():
    X, y, structure = grouped_data(7)
    model = fit_lagaboost(X, y, get_likelihood("bernoulli-probit"), structure,
                          BoostConfig(n_iter=10, seed=3))
    clone = BoostedModel.from_json(model.to_json())
    np.testing.assert_array_equal(model.predict_F(X), clone.predict_F(X))
    np.testing.assert_array_equal(model.theta, clone.theta)
    np.testing.assert_array_equal(model.mode_b, clone.mode_b)
    assert clone.to_json() == model.to_json()


def test_from_json_rejects_unknown_version():
    with pytest.raises(ValueError):
        BoostedModel.from_json('{"format_version": 99}')


def test_reproducibility():
    X, y, structure = grouped_data(8)
    lik = get_likelihood("bernoulli-probit")
    a = fit_lagaboost(X, y, lik, structure, BoostConfig(n_iter=8, seed=1))
    b = fit_lagaboost(X, y, lik, structure, BoostConfig(n_iter=8, seed=1))
    assert a.to_json() == b.to_json()


def test_theta_fixed_skips_hyperparameter_steps(monkeypatch):
    X, y, structure = grouped_data(9)
    lik = get_likelihood("bernoulli-probit")
    calls = []
    orig = boosting.optimize_theta

    def spy(*args, **kwargs):
        calls.append(1)
        return orig(*args, **kwargs)

    monkeypatch.setattr(boosting, "optimize_theta", spy)
    model = fit_lagaboost(X, y, lik, structure, BoostConfig(n_iter=5),
                          theta_fixed=[0.7])
    assert calls == []
    assert model.fit_log["theta_opt_calls"] == 0
    np.testing.assert_array_equal(model.theta, [0.7])


def test_oos_final_refit_holds_theta_fixed():
    X, y, structure = grouped_data(10, n=240, m=24)
    lik = get_likelihood("bernoulli-probit")
    model = fit_lagaboost_oos(X, y, lik, structure, BoostConfig(n_iter=5, seed=2),
                              folds=3)
    # the returned model comes from the frozen-theta refit
    assert model.fit_log["theta_opt_calls"] == 0
    np.testing.assert_array_equal(model.theta, model.fit_log["oos_theta"])
    with pytest.raises(ValueError):
        fit_lagaboost_oos(X, y, lik, structure, BoostConfig(n_iter=1), folds=1)


def test_make_folds_group_stratified():
    rng = np.random.default_rng(0)
    group = np.repeat(np.arange(10), 8)
    folds = make_folds(len(group), 4, group_index=group, seed=1)
    assert set(folds) == {0, 1, 2, 3}
    for g in range(10):
        counts = np.bincount(folds[group == g], minlength=4)
        assert counts.max() - counts.min() <= 1


def test_make_folds_plain_balanced():
    folds = make_folds(103, 5, seed=0)
    counts = np.bincount(folds, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_independent_boosting_reduces_loss():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(300, 3))
    p = ndtr(1.2 * X[:, 0])
    y = (rng.uniform(size=300) < p).astype(float)
    lik = get_likelihood("bernoulli-probit")
    model = fit_independent_boosting(X, y, lik, BoostConfig(n_iter=30))
    assert model.structure_kind == "none"
    loss0 = -lik.log_density(y, np.full(300, model.f0))
    assert model.fit_log["final_nll"] < loss0
    # intercept solves the marginal problem: Phi(f0) ~ mean(y)
    assert ndtr(model.f0) == pytest.approx(y.mean(), abs=1e-6)


def test_gp_joint_fit_smoke():
    X, y, structure = gp_data(13)
    model = fit_lagaboost(X, y, get_likelihood("bernoulli-probit"), structure,
                          BoostConfig(n_iter=5, max_depth=2))
    assert model.converged
    assert model.theta.shape == (2,)
    assert np.all(model.theta > 0)
