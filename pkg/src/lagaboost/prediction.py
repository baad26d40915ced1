"""Predictive latent moments and response-scale predictions.

The latent predictive distribution at new points is Gaussian with mean
``omega`` and (marginal) variance ``omega_var``; the response-scale
integral over it has a closed form for the probit case and is otherwise
evaluated with Gauss-Hermite quadrature recentered and rescaled to the
predictive moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, log_ndtr, ndtr

from .structures import chol_with_jitter

__all__ = [
    "PredictiveMoments",
    "predict_latent",
    "predict_response",
    "gauss_hermite_expectation",
    "bernoulli_probit_probability",
    "poisson_log_mean",
    "poisson_predictive_logpmf",
]

DEFAULT_GH_NODES = 30


@dataclass
class PredictiveMoments:
    omega: np.ndarray
    omega_var: np.ndarray


def predict_latent(model, X, group=None, locations=None) -> PredictiveMoments:
    """Latent predictive mean and marginal variance at new points.

    For grouped models, ``group`` holds integer ids; ids outside the
    trained range count as unseen and get the prior variance. For GP
    models, ``locations`` holds the new coordinates.
    """
    if not model.converged:
        raise ValueError("model is not converged; refusing to predict")
    F = model.predict_F(X)
    if model.structure_kind == "none":
        # independent model: plug-in prediction, degenerate latent
        return PredictiveMoments(F, np.zeros_like(F))
    if model.structure_kind == "grouped":
        if group is None:
            raise ValueError("grouped model needs group ids for prediction")
        group = np.asarray(group)
        m = model.structure_data["m"]
        sigma2 = model.theta[0]
        idx = np.asarray(model.structure_data["group_index"])
        wsum = np.bincount(idx, weights=model.mode_w, minlength=m)
        seen = (group >= 0) & (group < m)
        g = np.where(seen, group, 0).astype(np.int64)
        omega = F + np.where(seen, model.mode_b[g], 0.0)
        var = np.where(seen, sigma2 / (sigma2 * wsum[g] + 1.0), sigma2)
        return PredictiveMoments(omega, var)

    if model.structure_kind == "gp":
        if locations is None:
            raise ValueError("gp model needs locations for prediction")
        structure = model.rebuild_structure()
        theta = model.theta
        Sigma_op = structure.cross_covariance(theta, locations)
        omega = F + Sigma_op.T @ model.mode_d1
        sw = np.sqrt(model.mode_w)
        Sigma = structure.build_sigma(theta)
        B = np.eye(structure.n) + sw[:, None] * Sigma * sw[None, :]
        L = chol_with_jitter(B, 1.0)
        V = solve_triangular(L, sw[:, None] * Sigma_op, lower=True)
        var = theta[0] - np.sum(V * V, axis=0)
        return PredictiveMoments(omega, np.maximum(var, 0.0))

    raise ValueError(f"cannot form latent predictions for structure "
                     f"{model.structure_kind!r}")


def gauss_hermite_expectation(fn, omega, var, n_nodes: int = DEFAULT_GH_NODES):
    """E[fn(mu)] for mu ~ N(omega, var), vectorized over omega/var."""
    if n_nodes < 1:
        raise ValueError("need at least one quadrature node")
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    omega = np.asarray(omega, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    mu = omega[..., None] + np.sqrt(2.0) * sd[..., None] * x
    return (fn(mu) @ w) / np.sqrt(np.pi)


def bernoulli_probit_probability(omega, var) -> np.ndarray:
    """P(y=1) = Phi(omega / sqrt(1 + var)), the closed-form probit integral."""
    return ndtr(np.asarray(omega) / np.sqrt(1.0 + np.asarray(var)))


def poisson_log_mean(omega, var) -> np.ndarray:
    """E[y] = exp(omega + var/2), the lognormal mean."""
    return np.exp(np.asarray(omega) + 0.5 * np.asarray(var))


def poisson_predictive_logpmf(y, omega, var, n_nodes: int = DEFAULT_GH_NODES):
    """log p(y_p | data) under the Gaussian latent predictive, via quadrature."""
    y = np.asarray(y, dtype=float)

    def pmf(mu):
        return np.exp(y[..., None] * mu - np.exp(mu) - gammaln(y + 1.0)[..., None])

    p = gauss_hermite_expectation(pmf, omega, var, n_nodes)
    return np.log(np.maximum(p, 1e-300))


def predict_response(model, X, group=None, locations=None,
                     n_nodes: int = DEFAULT_GH_NODES, use_quadrature: bool = False):
    """Response-scale prediction: success probability (Bernoulli) or mean
    count (Poisson). Closed forms by default; quadrature on request."""
    moments = predict_latent(model, X, group=group, locations=locations)
    return response_from_moments(model.likelihood_kind, moments.omega,
                                 moments.omega_var, n_nodes=n_nodes,
                                 use_quadrature=use_quadrature)


def response_from_moments(likelihood_kind, omega, var,
                          n_nodes: int = DEFAULT_GH_NODES,
                          use_quadrature: bool = False) -> np.ndarray:
    if likelihood_kind == "bernoulli-probit":
        if use_quadrature:
            return gauss_hermite_expectation(ndtr, omega, var, n_nodes)
        return bernoulli_probit_probability(omega, var)
    if likelihood_kind == "poisson-log":
        if use_quadrature:
            return gauss_hermite_expectation(np.exp, omega, var, n_nodes)
        return poisson_log_mean(omega, var)
    raise ValueError(f"unknown likelihood kind {likelihood_kind!r}")
