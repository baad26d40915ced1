"""Scikit-learn style estimator wrappers around the functional core.

All estimators follow the fit/predict protocol with get_params/set_params
from ``sklearn.base.BaseEstimator``, so they compose with model selection
utilities. Latent-structure inputs (group ids or locations) are passed as
fit/predict keyword arguments because they are per-row metadata, not
features.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .boosting import (BoostConfig, fit_independent_boosting, fit_lagaboost,
                       fit_lagaboost_oos, fit_linear_baseline)
from .likelihoods import get_likelihood
from .prediction import predict_latent, predict_response
from .structures import make_structure

__all__ = ["LaGaBoostEstimator", "LinearLatentGaussianEstimator",
           "IndependentBoostingEstimator"]


class _LatentMixin:
    def _resolve_structure(self, n, group, locations):
        if (group is None) == (locations is None):
            raise ValueError("pass exactly one of group= or locations=")
        if group is not None:
            group = np.asarray(group)
            if group.shape[0] != n:
                raise ValueError("group length must match X rows")
            uniq, codes = np.unique(group, return_inverse=True)
            self.group_labels_ = uniq
            return make_structure("grouped", group_index=codes)
        locations = check_array(locations)
        if locations.shape[0] != n:
            raise ValueError("locations rows must match X rows")
        return make_structure("gp", locations=locations)

    def _encode_groups(self, group):
        # unseen labels map to -1 and take the prior predictive
        lookup = {label: i for i, label in enumerate(self.group_labels_)}
        return np.asarray([lookup.get(g, -1) for g in np.asarray(group)])

    def _predict_kwargs(self, n, group, locations):
        if self.model_.structure_kind == "grouped":
            if group is None:
                raise ValueError("grouped model needs group= at predict time")
            return {"group": self._encode_groups(group)}
        if self.model_.structure_kind == "gp":
            if locations is None:
                raise ValueError("gp model needs locations= at predict time")
            return {"locations": check_array(locations)}
        return {}

    def predict_latent(self, X, group=None, locations=None):
        """Latent predictive mean and marginal variance, as (mean, var)."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        m = predict_latent(self.model_, X,
                           **self._predict_kwargs(X.shape[0], group, locations))
        return m.omega, m.omega_var

    def predict(self, X, group=None, locations=None):
        """Response-scale prediction: class label (Bernoulli) or mean count."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        r = predict_response(self.model_, X,
                             **self._predict_kwargs(X.shape[0], group, locations))
        if self.model_.likelihood_kind == "bernoulli-probit":
            return (r >= 0.5).astype(int)
        return r

    def predict_proba(self, X, group=None, locations=None):
        check_is_fitted(self, "model_")
        if self.model_.likelihood_kind != "bernoulli-probit":
            raise ValueError("predict_proba is only defined for the Bernoulli model")
        X = check_array(X)
        p1 = predict_response(self.model_, X,
                              **self._predict_kwargs(X.shape[0], group, locations))
        return np.column_stack([1.0 - p1, p1])


class LaGaBoostEstimator(_LatentMixin, BaseEstimator):
    """Boosted trees plus a latent Gaussian model, fitted jointly."""

    def __init__(self, likelihood="bernoulli-probit", n_estimators=100,
                 learning_rate=0.1, max_depth=5, min_samples_leaf=10,
                 theta0=None, hyper_max_steps=10, momentum=True,
                 oos_folds=None, seed=0):
        self.likelihood = likelihood
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.theta0 = theta0
        self.hyper_max_steps = hyper_max_steps
        self.momentum = momentum
        self.oos_folds = oos_folds
        self.seed = seed

    def _config(self):
        return BoostConfig(
            n_iter=self.n_estimators, learning_rate=self.learning_rate,
            max_depth=self.max_depth, min_samples_leaf=self.min_samples_leaf,
            theta0=None if self.theta0 is None else np.asarray(self.theta0, float),
            hyper_max_steps=self.hyper_max_steps, momentum=self.momentum,
            seed=self.seed)

    def fit(self, X, y, group=None, locations=None):
        X, y = check_X_y(X, y)
        structure = self._resolve_structure(X.shape[0], group, locations)
        lik = get_likelihood(self.likelihood)
        if self.oos_folds is not None:
            self.model_ = fit_lagaboost_oos(X, y, lik, structure, self._config(),
                                            folds=self.oos_folds)
        else:
            self.model_ = fit_lagaboost(X, y, lik, structure, self._config())
        self.theta_ = self.model_.theta
        return self


class LinearLatentGaussianEstimator(_LatentMixin, BaseEstimator):
    """Latent Gaussian model with a linear prior mean F(x) = b0 + x'b."""

    def __init__(self, likelihood="bernoulli-probit", theta0=None,
                 momentum=True, max_outer=1000, tol=1e-6, seed=0):
        self.likelihood = likelihood
        self.theta0 = theta0
        self.momentum = momentum
        self.max_outer = max_outer
        self.tol = tol
        self.seed = seed

    def fit(self, X, y, group=None, locations=None):
        X, y = check_X_y(X, y)
        structure = self._resolve_structure(X.shape[0], group, locations)
        cfg = BoostConfig(
            n_iter=1,
            theta0=None if self.theta0 is None else np.asarray(self.theta0, float),
            momentum=self.momentum, seed=self.seed)
        self.model_ = fit_linear_baseline(X, y, get_likelihood(self.likelihood),
                                          structure, cfg, max_outer=self.max_outer,
                                          tol=self.tol)
        self.coef_ = self.model_.beta[1:]
        self.intercept_ = self.model_.beta[0]
        self.theta_ = self.model_.theta
        return self


class IndependentBoostingEstimator(_LatentMixin, BaseEstimator):
    """Plain gradient boosting on the independent likelihood.

    Group ids or locations, when given, are appended to the feature matrix
    as numeric columns, matching how conventional boosting handles them.
    """

    def __init__(self, likelihood="bernoulli-probit", n_estimators=100,
                 learning_rate=0.1, max_depth=5, min_samples_leaf=10, seed=0):
        self.likelihood = likelihood
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed

    @staticmethod
    def _augment(X, group, locations):
        cols = [X]
        if group is not None:
            cols.append(np.asarray(group, dtype=float).reshape(-1, 1))
        if locations is not None:
            cols.append(np.asarray(locations, dtype=float))
        return np.hstack(cols)

    def fit(self, X, y, group=None, locations=None):
        X, y = check_X_y(X, y)
        cfg = BoostConfig(
            n_iter=self.n_estimators, learning_rate=self.learning_rate,
            max_depth=self.max_depth, min_samples_leaf=self.min_samples_leaf,
            seed=self.seed)
        self.model_ = fit_independent_boosting(
            self._augment(X, group, locations), y,
            get_likelihood(self.likelihood), cfg)
        return self

    def _predict_kwargs(self, n, group, locations):
        return {}

    def predict_latent(self, X, group=None, locations=None):
        check_is_fitted(self, "model_")
        F = self.model_.predict_F(self._augment(check_array(X), group, locations))
        return F, np.zeros_like(F)

    def predict(self, X, group=None, locations=None):
        check_is_fitted(self, "model_")
        r = predict_response(self.model_,
                             self._augment(check_array(X), group, locations))
        if self.model_.likelihood_kind == "bernoulli-probit":
            return (r >= 0.5).astype(int)
        return r

    def predict_proba(self, X, group=None, locations=None):
        check_is_fitted(self, "model_")
        if self.model_.likelihood_kind != "bernoulli-probit":
            raise ValueError("predict_proba is only defined for the Bernoulli model")
        p1 = predict_response(self.model_,
                              self._augment(check_array(X), group, locations))
        return np.column_stack([1.0 - p1, p1])
