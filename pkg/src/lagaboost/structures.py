"""Latent Gaussian structures: grouped random effects and spatial GPs.

A structure owns the incidence map Z, the covariance Sigma(theta) and its
parameter derivatives. Hyperparameters are handled on the natural scale
here; the optimizers work on the log scale and chain-rule accordingly.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

__all__ = ["GroupedStructure", "GpStructure", "make_structure"]

# relative diagonal jitter for GP covariances, escalated x10 on
# factorization failure up to JITTER_MAX
JITTER0 = 1e-10
JITTER_MAX = 1e-4


class GroupedStructure:
    """Single-level grouped random effects: Sigma = sigma2 * I_m, Z incidence.

    Z is never materialized; apply_z is a gather and apply_zt a scatter-add
    over the group index.
    """

    kind = "grouped"
    param_names = ("sigma2",)

    def __init__(self, group_index, m: int | None = None):
        idx = np.asarray(group_index)
        if idx.ndim != 1:
            raise ValueError("group_index must be one-dimensional")
        if not np.allclose(idx, np.round(idx)):
            raise ValueError("group ids must be integers")
        idx = idx.astype(np.int64)
        if m is None:
            m = int(idx.max()) + 1 if idx.size else 0
        if idx.size and (idx.min() < 0 or idx.max() >= m):
            raise ValueError("group ids must lie in [0, m)")
        self.group_index = idx
        self.n = idx.size
        self.m = int(m)

    @property
    def n_params(self) -> int:
        return 1

    def default_theta(self) -> np.ndarray:
        return np.array([1.0])

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (1,) or theta[0] <= 0 or not np.isfinite(theta[0]):
            raise ValueError("grouped structure needs theta = [sigma2] with sigma2 > 0")
        return theta

    def build_sigma(self, theta):
        """Sigma = sigma2 * I_m, represented by the scalar sigma2."""
        return self.check_theta(theta)[0]

    def dsigma_dtheta(self, theta, k: int):
        """d Sigma / d sigma2 = I_m, represented by the scalar 1.0."""
        self.check_theta(theta)
        if k != 0:
            raise IndexError("grouped structure has a single parameter")
        return 1.0

    def apply_z(self, v):
        return np.asarray(v)[self.group_index]

    def apply_zt(self, v):
        return np.bincount(self.group_index, weights=np.asarray(v, dtype=float),
                           minlength=self.m)

    def dense_z(self) -> np.ndarray:
        Z = np.zeros((self.n, self.m))
        Z[np.arange(self.n), self.group_index] = 1.0
        return Z

    def dense_sigma(self, theta) -> np.ndarray:
        return self.build_sigma(theta) * np.eye(self.m)

    def dense_dsigma(self, theta, k: int) -> np.ndarray:
        return self.dsigma_dtheta(theta, k) * np.eye(self.m)


class GpStructure:
    """Gaussian process with exponential covariance over fixed locations.

    Sigma_ij = sigma2 * exp(-||s_i - s_j|| / rho); Z is the identity (m = n).
    A small diagonal jitter proportional to sigma2 is baked into Sigma so
    duplicate or near-duplicate locations stay factorizable.
    """

    kind = "gp"
    param_names = ("sigma2", "rho")

    def __init__(self, locations, jitter: float = JITTER0):
        S = np.asarray(locations, dtype=float)
        if S.ndim != 2:
            raise ValueError("locations must be an n x d matrix")
        self.locations = S
        self.n = S.shape[0]
        self.m = S.shape[0]
        self.dist = cdist(S, S)
        self.jitter = float(jitter)

    @property
    def group_index(self):
        return np.arange(self.n)

    @property
    def n_params(self) -> int:
        return 2

    def default_theta(self) -> np.ndarray:
        # rho ~ mean pairwise distance / 3 keeps the kernel neither flat
        # nor degenerate for arbitrary location scales
        off = self.dist[np.triu_indices(self.n, k=1)]
        rho = float(np.mean(off)) / 3.0 if off.size else 1.0
        return np.array([1.0, max(rho, 1e-6)])

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2,) or np.any(theta <= 0) or not np.all(np.isfinite(theta)):
            raise ValueError("gp structure needs theta = [sigma2, rho], both > 0")
        return theta

    def build_sigma(self, theta) -> np.ndarray:
        sigma2, rho = self.check_theta(theta)
        return sigma2 * (np.exp(-self.dist / rho) + self.jitter * np.eye(self.n))

    def dsigma_dtheta(self, theta, k: int) -> np.ndarray:
        sigma2, rho = self.check_theta(theta)
        if k == 0:
            return self.build_sigma(theta) / sigma2
        if k == 1:
            return self.build_sigma(theta) * (self.dist / rho**2)
        raise IndexError("gp structure has two parameters")

    def cross_covariance(self, theta, new_locations) -> np.ndarray:
        """Covariance between training effects (rows) and new points (cols)."""
        sigma2, rho = self.check_theta(theta)
        D = cdist(self.locations, np.asarray(new_locations, dtype=float))
        return sigma2 * np.exp(-D / rho)

    def apply_z(self, v):
        return np.asarray(v)

    def apply_zt(self, v):
        return np.asarray(v, dtype=float)

    def dense_z(self) -> np.ndarray:
        return np.eye(self.n)

    def dense_sigma(self, theta) -> np.ndarray:
        return self.build_sigma(theta)

    def dense_dsigma(self, theta, k: int) -> np.ndarray:
        return self.dsigma_dtheta(theta, k)


def make_structure(kind: str, *, group_index=None, locations=None, m=None):
    if kind == "grouped":
        if group_index is None:
            raise ValueError("grouped structure needs group_index")
        return GroupedStructure(group_index, m=m)
    if kind == "gp":
        if locations is None:
            raise ValueError("gp structure needs locations")
        return GpStructure(locations)
    raise ValueError(f"unknown structure kind {kind!r}")


def chol_with_jitter(A: np.ndarray, base_scale: float):
    """Cholesky of a symmetric matrix, escalating diagonal jitter on failure.

    base_scale sets the magnitude of the jitter (typically sigma2).
    Returns the lower factor.
    """
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            jitter = JITTER0 * base_scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * base_scale:
                break
    raise np.linalg.LinAlgError("matrix not positive definite after jitter escalation")
