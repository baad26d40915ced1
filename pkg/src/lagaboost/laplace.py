"""Laplace approximation engines for the negative log-marginal likelihood.

Three interchangeable computational paths share an interface:

* ``GroupedLaplace`` exploits that for single-level grouped effects the
  matrix Zt W Z + Sigma^-1 is diagonal, so mode finding, the log
  determinant, and all gradient traces are O(n).
* ``GpLaplace`` never inverts Sigma; everything is routed through the
  Cholesky factor of B = I + W^1/2 Sigma W^1/2 (Sherman-Morrison-Woodbury).
* ``DenseLaplace`` is a direct dense implementation of the same formulas
  used as an equivalence oracle in tests.

Each engine is bound to (likelihood, structure, y) and exposes
``find_mode`` -> state, plus ``nll``, ``grad_F`` and ``grad_theta_log``
evaluated at a converged state. Hyperparameter gradients are returned with
respect to log(theta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .structures import chol_with_jitter

__all__ = ["LaplaceState", "GroupedLaplace", "GpLaplace", "DenseLaplace", "make_engine"]

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
MAX_HALVINGS = 40
STATIONARITY_TOL = 1e-6


@dataclass
class LaplaceState:
    """Converged (or flagged) mode state with everything gradients need."""

    theta: np.ndarray
    F: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    w: np.ndarray
    nll: float
    converged: bool
    newton_iters: int
    stationarity: float
    cache: dict = field(default_factory=dict, repr=False)


class _EngineBase:
    def __init__(self, likelihood, structure, y):
        self.likelihood = likelihood
        self.structure = structure
        self.y = likelihood.validate_response(y)
        self.n = len(self.y)

    def _derivs(self, mu):
        d = self.likelihood.derivatives(self.y, mu)
        return d.d0, d.d1, d.d2, d.d3

    def nll(self, state: LaplaceState) -> float:
        return state.nll


class GroupedLaplace(_EngineBase):
    """Sparse path for single-level grouped random effects.

    With Sigma = sigma2 * I_m and incidence Z, A = Zt W Z + Sigma^-1 is
    diagonal with entries a_g = sum_{i in g} w_i + 1/sigma2.
    """

    def __init__(self, likelihood, structure, y):
        super().__init__(likelihood, structure, y)
        self.idx = structure.group_index
        self.m = structure.m

    def _gsum(self, v):
        return np.bincount(self.idx, weights=v, minlength=self.m)

    def find_mode(self, F, theta, warm_start=None) -> LaplaceState:
        theta = self.structure.check_theta(theta)
        sigma2 = theta[0]
        F = np.asarray(F, dtype=float)
        b = np.zeros(self.m) if warm_start is None else np.array(warm_start, dtype=float)

        mu = F + b[self.idx]
        d0, d1, d2, d3 = self._derivs(mu)
        obj = d0.sum() - 0.5 * b @ b / sigma2
        converged = False
        it = 0
        for it in range(1, NEWTON_MAX_ITER + 1):
            grad = self._gsum(d1) - b / sigma2
            a = self._gsum(-d2) + 1.0 / sigma2
            step = grad / a
            t = 1.0
            for _ in range(MAX_HALVINGS):
                b_new = b + t * step
                mu_new = F + b_new[self.idx]
                d0n, d1n, d2n, d3n = self._derivs(mu_new)
                obj_new = d0n.sum() - 0.5 * b_new @ b_new / sigma2
                if obj_new >= obj or not np.isfinite(obj_new):
                    break
                t *= 0.5
            if not np.isfinite(obj_new):
                break
            delta_obj = obj_new - obj
            b, mu, obj = b_new, mu_new, obj_new
            d0, d1, d2, d3 = d0n, d1n, d2n, d3n
            if abs(delta_obj) < NEWTON_TOL or np.max(np.abs(t * step)) < NEWTON_TOL:
                converged = True
                break

        w = -d2
        stationarity = float(np.max(np.abs(self._gsum(d1) - b / sigma2))) if self.m else 0.0
        wsum = self._gsum(w)
        # log det(Sigma Zt W Z + I_m) for diagonal Zt W Z
        logdet = float(np.sum(np.log1p(sigma2 * wsum)))
        nll = -d0.sum() + 0.5 * b @ b / sigma2 + 0.5 * logdet
        state = LaplaceState(theta, F, b, mu, d0, d1, d2, d3, w, float(nll),
                             converged, it, stationarity)
        state.cache["wsum"] = wsum
        state.cache["a"] = wsum + 1.0 / sigma2
        return state

    def grad_F(self, state: LaplaceState) -> np.ndarray:
        a = state.cache["a"]
        ag = a[self.idx]
        # dL/db_j = -(1/2) sum_{i in g_j} d3_i / a_j
        s = -0.5 * self._gsum(state.d3) / a
        trace_term = -0.5 * state.d3 / ag
        implicit = s[self.idx] * (-state.w / ag)
        return -state.d1 + trace_term + implicit

    def grad_theta_log(self, state: LaplaceState) -> np.ndarray:
        sigma2 = state.theta[0]
        a = state.cache["a"]
        wsum = state.cache["wsum"]
        b = state.b
        u = self._gsum(state.d1)
        s = -0.5 * self._gsum(state.d3) / a
        term1 = -0.5 * (b @ b) / sigma2**2
        # grouped trace variant: tr(A^-1 Sigma^-1 dSigma Zt W Z), all diagonal
        term2 = 0.5 * np.sum(wsum / (sigma2 * a))
        db_dtheta = u / (sigma2 * a)
        term3 = s @ db_dtheta
        return np.array([(term1 + term2 + term3) * sigma2])


class GpLaplace(_EngineBase):
    """Woodbury path for Gaussian process models (Z = I, dense Sigma).

    All solves go through the Cholesky factor of
    B = I + W^1/2 Sigma W^1/2, avoiding Sigma^-1 entirely. The mode is
    tracked jointly with alpha = Sigma^-1 b.
    """

    def _sigma(self, theta):
        key = tuple(theta)
        if getattr(self, "_sigma_key", None) != key:
            self._sigma_mat = self.structure.build_sigma(theta)
            self._sigma_key = key
        return self._sigma_mat

    def find_mode(self, F, theta, warm_start=None) -> LaplaceState:
        theta = self.structure.check_theta(theta)
        Sigma = self._sigma(theta)
        F = np.asarray(F, dtype=float)
        n = self.n
        if warm_start is None:
            alpha = np.zeros(n)
        else:
            alpha = np.array(warm_start, dtype=float)
        b = Sigma @ alpha

        mu = F + b
        d0, d1, d2, d3 = self._derivs(mu)
        obj = d0.sum() - 0.5 * alpha @ b
        converged = False
        it = 0
        for it in range(1, NEWTON_MAX_ITER + 1):
            w = -d2
            sw = np.sqrt(w)
            B = np.eye(n) + sw[:, None] * Sigma * sw[None, :]
            L = chol_with_jitter(B, 1.0)
            rhs = w * b + d1
            v = solve_triangular(L, sw * (Sigma @ rhs), lower=True)
            alpha_new = rhs - sw * solve_triangular(L.T, v, lower=False)
            step = alpha_new - alpha
            t = 1.0
            for _ in range(MAX_HALVINGS):
                a_t = alpha + t * step
                b_t = Sigma @ a_t
                mu_t = F + b_t
                d0n, d1n, d2n, d3n = self._derivs(mu_t)
                obj_new = d0n.sum() - 0.5 * a_t @ b_t
                if obj_new >= obj or not np.isfinite(obj_new):
                    break
                t *= 0.5
            if not np.isfinite(obj_new):
                break
            delta_obj = obj_new - obj
            delta_b = np.max(np.abs(b_t - b))
            alpha, b, mu, obj = a_t, b_t, mu_t, obj_new
            d0, d1, d2, d3 = d0n, d1n, d2n, d3n
            if abs(delta_obj) < NEWTON_TOL or delta_b < NEWTON_TOL:
                converged = True
                break

        w = -d2
        sw = np.sqrt(w)
        B = np.eye(n) + sw[:, None] * Sigma * sw[None, :]
        L = chol_with_jitter(B, 1.0)
        logdet = float(2.0 * np.sum(np.log(np.diag(L))))
        nll = -d0.sum() + 0.5 * alpha @ b + 0.5 * logdet
        stationarity = float(np.max(np.abs(d1 - alpha))) if n else 0.0
        state = LaplaceState(theta, F, b, mu, d0, d1, d2, d3, w, float(nll),
                             converged, it, stationarity)
        state.cache.update(alpha=alpha, L=L, sw=sw, Sigma=Sigma)
        return state

    def _posterior_cov(self, state):
        # K = (W + Sigma^-1)^-1 = Sigma - Sigma W^1/2 B^-1 W^1/2 Sigma
        if "K" not in state.cache:
            Sigma, L, sw = state.cache["Sigma"], state.cache["L"], state.cache["sw"]
            V = solve_triangular(L, sw[:, None] * Sigma, lower=True)
            state.cache["K"] = Sigma - V.T @ V
        return state.cache["K"]

    def grad_F(self, state: LaplaceState) -> np.ndarray:
        K = self._posterior_cov(state)
        diagK = np.diag(K)
        s = -0.5 * diagK * state.d3
        trace_term = -0.5 * state.d3 * diagK
        implicit = -state.w * (K @ s)
        return -state.d1 + trace_term + implicit

    def grad_theta_log(self, state: LaplaceState) -> np.ndarray:
        theta = state.theta
        Sigma, L, sw = state.cache["Sigma"], state.cache["L"], state.cache["sw"]
        alpha = state.cache["alpha"]
        K = self._posterior_cov(state)
        s = -0.5 * np.diag(K) * state.d3
        # P = (Sigma + W^-1)^-1 = W^1/2 B^-1 W^1/2, valid also for w_i = 0
        Binv = cho_solve((L, True), np.eye(self.n))
        P = sw[:, None] * Binv * sw[None, :]
        grad = np.empty(self.structure.n_params)
        for k in range(self.structure.n_params):
            dS = self.structure.dsigma_dtheta(theta, k)
            term1 = -0.5 * alpha @ dS @ alpha
            term2 = 0.5 * np.sum(P * dS)
            v = dS @ alpha
            db = v - Sigma @ (P @ v)
            grad[k] = (term1 + term2 + s @ db) * theta[k]
        return grad

    def predictive_variance(self, state: LaplaceState, Sigma_op: np.ndarray,
                            prior_var: np.ndarray) -> np.ndarray:
        """diag of Sigma_p - Sigma_op^T (Sigma + W^-1)^-1 Sigma_op."""
        L, sw = state.cache["L"], state.cache["sw"]
        V = solve_triangular(L, sw[:, None] * Sigma_op, lower=True)
        return prior_var - np.sum(V * V, axis=0)


class DenseLaplace(_EngineBase):
    """Direct dense implementation used as an oracle for the fast paths."""

    def __init__(self, likelihood, structure, y):
        super().__init__(likelihood, structure, y)
        self.Z = structure.dense_z()
        self.m = self.Z.shape[1]

    def find_mode(self, F, theta, warm_start=None) -> LaplaceState:
        theta = self.structure.check_theta(theta)
        Sigma = self.structure.dense_sigma(theta)
        Sigma_inv = np.linalg.inv(Sigma)
        F = np.asarray(F, dtype=float)
        Z = self.Z
        b = np.zeros(self.m) if warm_start is None else np.array(warm_start, dtype=float)

        mu = F + Z @ b
        d0, d1, d2, d3 = self._derivs(mu)
        obj = d0.sum() - 0.5 * b @ Sigma_inv @ b
        converged = False
        it = 0
        for it in range(1, NEWTON_MAX_ITER + 1):
            w = -d2
            A = Z.T @ (w[:, None] * Z) + Sigma_inv
            grad = Z.T @ d1 - Sigma_inv @ b
            step = np.linalg.solve(A, grad)
            t = 1.0
            for _ in range(MAX_HALVINGS):
                b_new = b + t * step
                mu_new = F + Z @ b_new
                d0n, d1n, d2n, d3n = self._derivs(mu_new)
                obj_new = d0n.sum() - 0.5 * b_new @ Sigma_inv @ b_new
                if obj_new >= obj or not np.isfinite(obj_new):
                    break
                t *= 0.5
            if not np.isfinite(obj_new):
                break
            delta_obj = obj_new - obj
            b, mu, obj = b_new, mu_new, obj_new
            d0, d1, d2, d3 = d0n, d1n, d2n, d3n
            if abs(delta_obj) < NEWTON_TOL or np.max(np.abs(t * step)) < NEWTON_TOL:
                converged = True
                break

        w = -d2
        A = Z.T @ (w[:, None] * Z) + Sigma_inv
        sign, logdet = np.linalg.slogdet(Sigma @ Z.T @ (w[:, None] * Z) + np.eye(self.m))
        nll = -d0.sum() + 0.5 * b @ Sigma_inv @ b + 0.5 * logdet
        stationarity = float(np.max(np.abs(Z.T @ d1 - Sigma_inv @ b)))
        state = LaplaceState(theta, F, b, mu, d0, d1, d2, d3, w, float(nll),
                             converged, it, stationarity)
        state.cache.update(Sigma=Sigma, Sigma_inv=Sigma_inv, A=A, A_inv=np.linalg.inv(A))
        return state

    def grad_F(self, state: LaplaceState) -> np.ndarray:
        Z, A_inv = self.Z, state.cache["A_inv"]
        n = self.n
        # H_ii = z_i^T A^-1 z_i with z_i the i-th row of Z;
        # tr(A^-1 Zt dW/dF_i Z) = -d3_i H_ii and
        # dL/db_j = (1/2) sum_i (-d3_i Z_ij) H_ii
        diagH = np.diag(Z @ A_inv @ Z.T)
        s = 0.5 * (Z * (-state.d3)[:, None]).T @ diagH
        grad = np.empty(n)
        for i in range(n):
            trace_term = 0.5 * (-state.d3[i]) * diagH[i]
            db_dFi = -A_inv @ (Z[i, :] * state.w[i])
            grad[i] = -state.d1[i] + trace_term + s @ db_dFi
        return grad

    def grad_theta_log(self, state: LaplaceState) -> np.ndarray:
        Z = self.Z
        Sigma, Sigma_inv, A_inv = (state.cache["Sigma"], state.cache["Sigma_inv"],
                                   state.cache["A_inv"])
        b, theta = state.b, state.theta
        diagH = np.diag(Z @ A_inv @ Z.T)
        s = 0.5 * (Z * (-state.d3)[:, None]).T @ diagH
        # (Sigma + (ZtWZ)^-1)^-1 computed without inverting ZtWZ:
        # = Sigma^-1 - Sigma^-1 A^-1 Sigma^-1  (Woodbury)
        G = Sigma_inv - Sigma_inv @ A_inv @ Sigma_inv
        grad = np.empty(self.structure.n_params)
        for k in range(self.structure.n_params):
            dS = self.structure.dense_dsigma(theta, k)
            term1 = -0.5 * b @ Sigma_inv @ dS @ Sigma_inv @ b
            term2 = 0.5 * np.trace(G @ dS)
            db = A_inv @ (Sigma_inv @ dS @ (Z.T @ state.d1))
            grad[k] = (term1 + term2 + s @ db) * theta[k]
        return grad


def make_engine(likelihood, structure, y):
    if structure.kind == "grouped":
        return GroupedLaplace(likelihood, structure, y)
    if structure.kind == "gp":
        return GpLaplace(likelihood, structure, y)
    raise ValueError(f"no Laplace engine for structure kind {structure.kind!r}")
