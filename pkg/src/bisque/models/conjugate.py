"""Normal model with unknown mean and variance under a normal-inverse-gamma prior.

``X_i | mu, s2 ~ N(mu, s2)``, ``mu | s2 ~ N(m0, s2 / k0)``, ``s2 ~ IG(a0, b0)``.
The variance plays the conditioning role; the mean is reported.  Every
posterior quantity has a closed form, which makes the model a validation
target.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .. import transform as tr
from ..core import HierarchicalModel


@dataclass(frozen=True)
class ConjugateConfig:
    data: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m0: float = 0.0
    k0: float = 1.0
    a0: float = 2.0
    b0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float).ravel())
        if self.k0 <= 0 or self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("k0, a0 and b0 must be positive")

    def posterior(self):
        """Posterior hyperparameters ``(mn, kn, an, bn)``."""
        x = self.data
        n = x.size
        kn = self.k0 + n
        if n == 0:
            return self.m0, kn, self.a0, self.b0
        xbar = x.mean()
        mn = (self.k0 * self.m0 + n * xbar) / kn
        an = self.a0 + 0.5 * n
        bn = self.b0 + 0.5 * np.sum((x - xbar) ** 2) + 0.5 * self.k0 * n * (xbar - self.m0) ** 2 / kn
        return mn, kn, an, bn

    def mu_marginal(self):
        """Closed-form Student-t marginal of the mean."""
        mn, kn, an, bn = self.posterior()
        return stats.t(df=2.0 * an, loc=mn, scale=np.sqrt(bn / (an * kn)))

    def sigma2_marginal(self):
        mn, kn, an, bn = self.posterior()
        return stats.invgamma(an, scale=bn)

    def mu_mean(self):
        return self.posterior()[0]

    def mu_variance(self):
        mn, kn, an, bn = self.posterior()
        if an <= 1:
            return np.inf
        return bn / (kn * (an - 1.0))

    def log_joint(self, mu, sigma2):
        """Unnormalized log posterior of ``(mu, sigma2)``."""
        x = self.data
        if sigma2 <= 0:
            return -np.inf
        ll = np.sum(stats.norm.logpdf(x, mu, np.sqrt(sigma2)))
        lp = stats.norm.logpdf(mu, self.m0, np.sqrt(sigma2 / self.k0))
        return float(ll + lp + stats.invgamma.logpdf(sigma2, self.a0, scale=self.b0))


def conjugate_toy(config: ConjugateConfig) -> HierarchicalModel:
    """BISQuE model for the mean with the variance integrated out (log scale)."""
    mn, kn, an, bn = config.posterior()

    def log_sigma2(theta):
        s2 = theta[0]
        return -(an + 1.0) * np.log(s2) - bn / s2

    def density(mu, theta):
        return stats.norm.pdf(mu, mn, np.sqrt(theta[0] / kn))

    def mean(theta):
        return mn

    def variance(theta):
        return theta[0] / kn

    def cdf(bound, theta):
        return stats.norm.cdf(bound, mn, np.sqrt(theta[0] / kn))

    return HierarchicalModel(
        transform=tr.Transform([tr.log()]),
        log_density=log_sigma2,
        quantities={"density": density, "mean": mean, "variance": variance, "cdf": cdf},
        init=np.array([bn / (an + 1.0)]),
        name="conjugate-toy",
    )
