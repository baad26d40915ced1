"""Response distributions with log-density derivatives up to third order.

Both implemented likelihoods (Bernoulli with probit link, Poisson with log
link) have no auxiliary parameters, so the whole likelihood surface is the
per-observation log density and its first three derivatives in the latent
location parameter mu.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr

__all__ = [
    "LogDensityDerivatives",
    "Likelihood",
    "BernoulliProbit",
    "PoissonLog",
    "get_likelihood",
]

_NORM_CONST = 0.5 * np.log(2.0 * np.pi)


@dataclass
class LogDensityDerivatives:
    """Per-observation log density and its first three mu-derivatives."""

    d0: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray


class Likelihood:
    """Base class; subclasses implement value and derivative evaluation.

    ``aux_params`` is the ordered set of auxiliary likelihood parameters;
    it is empty for both implemented likelihoods but kept on the interface
    so the optimizers can treat it generically.
    """

    kind: str = ""
    aux_params: tuple = ()

    def validate_response(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clamp(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, y: np.ndarray, mu: np.ndarray) -> float:
        """Sum of per-observation log densities."""
        y = self.validate_response(y)
        mu = np.asarray(mu, dtype=float)
        if y.shape != mu.shape:
            raise ValueError("y and mu must have the same length")
        return float(np.sum(self._d0(y, self.clamp(mu))))

    def derivatives(self, y: np.ndarray, mu: np.ndarray) -> LogDensityDerivatives:
        raise NotImplementedError

    def _d0(self, y: np.ndarray, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class BernoulliProbit(Likelihood):
    """Bernoulli likelihood with probit link: P(y=1) = Phi(mu).

    All quantities are computed through log Phi and the Mills-ratio style
    quantity phi(z)/Phi(z) evaluated as exp(log phi - log Phi), which stays
    finite far into the lower tail where Phi itself underflows.
    """

    kind = "bernoulli-probit"

    # mu far outside this range cannot occur for sane fits; clamping keeps
    # exp(log phi - log Phi) ~ |mu| bounded and derivatives finite.
    MU_MIN, MU_MAX = -30.0, 30.0

    def validate_response(self, y):
        y = np.asarray(y)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("bernoulli-probit responses must be 0 or 1")
        return y.astype(float)

    def clamp(self, mu):
        return np.clip(mu, self.MU_MIN, self.MU_MAX)

    def _d0(self, y, mu):
        s = 2.0 * np.asarray(y, dtype=float) - 1.0
        return log_ndtr(s * mu)

    def derivatives(self, y, mu):
        y = self.validate_response(y)
        mu = self.clamp(np.asarray(mu, dtype=float))
        s = 2.0 * y - 1.0
        z = s * mu
        d0 = log_ndtr(z)
        # a = phi(z)/Phi(z), stable for z << 0
        a = np.exp(-0.5 * z * z - _NORM_CONST - d0)
        za = z + a
        d1 = s * a
        d2 = -a * za
        d3 = s * a * (z * z + 3.0 * a * z + 2.0 * a * a - 1.0)
        return LogDensityDerivatives(d0, d1, d2, d3)


class PoissonLog(Likelihood):
    """Poisson likelihood with log link: y ~ Poisson(exp(mu))."""

    kind = "poisson-log"

    # lower bound keeps exp(mu) from underflowing into denormals; the
    # upper bound caps the Poisson mean at exp(30).
    MU_MIN, MU_MAX = -700.0, 30.0

    def validate_response(self, y):
        y = np.asarray(y)
        if np.any(y < 0) or not np.allclose(y, np.round(y)):
            raise ValueError("poisson-log responses must be non-negative integers")
        return y.astype(float)

    def clamp(self, mu):
        return np.clip(mu, self.MU_MIN, self.MU_MAX)

    def _d0(self, y, mu):
        y = np.asarray(y, dtype=float)
        return y * mu - np.exp(mu) - gammaln(y + 1.0)

    def derivatives(self, y, mu):
        y = self.validate_response(y)
        mu = self.clamp(np.asarray(mu, dtype=float))
        lam = np.exp(mu)
        d0 = y * mu - lam - gammaln(y + 1.0)
        d1 = y - lam
        d2 = -lam
        return LogDensityDerivatives(d0, d1, d2, d2.copy())


_REGISTRY = {
    BernoulliProbit.kind: BernoulliProbit,
    PoissonLog.kind: PoissonLog,
}


def get_likelihood(kind: str) -> Likelihood:
    try:
        return _REGISTRY[kind]()
    except KeyError:
        raise ValueError(f"unknown likelihood {kind!r}; choose from {sorted(_REGISTRY)}")
