"""Zero-mean Gaussian process on the unit square with Matern covariance.

``X ~ N(0, Sigma)`` with ``Sigma_ij = kappa(|s_i - s_j|)`` and

    kappa(d) = sigma2 / (2^(nu-1) Gamma(nu)) (d / rho)^nu K_nu(d / rho),

priors ``sigma2 ~ IG(a, b)``, ``rho ~ U(L0, U0)``, ``nu ~ U(L1, U1)``.
Predictions at new locations use the conditional normal distribution of
the field given the observations (kriging).
"""

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg, special, stats
from scipy.linalg import lapack
from scipy.spatial.distance import cdist, pdist, squareform

from .. import transform as tr
from ..core import HierarchicalModel
from ..exceptions import CholeskyError

PAPER_N = 300
PAPER_M = 400
DESK_N = 100
DESK_M = 25
PAPER_PARAMS = (1.0, 0.3, 0.5)
PAPER_PRIORS = (2.0, 1.0, 0.0, 1.0, 0.0, 1.0)
_LOG_2PI = np.log(2.0 * np.pi)


def matern(d, sigma2, rho, nu_smooth):
    """Matern covariance at distance(s) ``d``; ``d = 0`` gives ``sigma2``."""
    d = np.asarray(d, dtype=float)
    x = d / rho
    out = np.full(x.shape, float(sigma2))
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        # (x^nu K_nu(x)) in log space; K_nu underflows to 0 for large x, which is the limit
        with np.errstate(divide="ignore"):
            logk = np.log(special.kv(nu_smooth, xp))
        val = np.log(sigma2) - (nu_smooth - 1.0) * np.log(2.0) - special.gammaln(nu_smooth)
        out[pos] = np.exp(val + nu_smooth * np.log(xp) + logk)
    return out if out.ndim else float(out)


def matern_cov(s, t, sigma2, rho, nu_smooth):
    """Covariance between two points ``s`` and ``t``."""
    d = float(np.linalg.norm(np.asarray(s, dtype=float) - np.asarray(t, dtype=float)))
    return float(matern(d, sigma2, rho, nu_smooth))


@dataclass(frozen=True)
class SpatialConfig:
    locations: np.ndarray
    responses: np.ndarray
    pred_locations: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    priors: tuple = PAPER_PRIORS
    params: tuple = None
    seed: int = None

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        x = np.asarray(self.responses, dtype=float).ravel()
        pred = np.asarray(self.pred_locations, dtype=float).reshape(-1, 2)
        if loc.shape != (x.size, 2):
            raise ValueError("locations must be an N x 2 array matching the responses")
        a, b, L0, U0, L1, U1 = (float(v) for v in self.priors)
        if a <= 0 or b <= 0 or not L0 < U0 or not L1 < U1 or L0 < 0 or L1 < 0:
            raise ValueError("priors need a, b > 0, 0 <= L0 < U0 and 0 <= L1 < U1")
        for arr in (loc, x, pred):
            arr.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "responses", x)
        object.__setattr__(self, "pred_locations", pred)
        object.__setattr__(self, "priors", (a, b, L0, U0, L1, U1))
        object.__setattr__(self, "_cache", {})

    @property
    def n_obs(self):
        return self.responses.size

    @property
    def n_pred(self):
        return self.pred_locations.shape[0]

    def _get(self, key, fn):
        if key not in self._cache:
            val = fn()
            val.setflags(write=False)
            self._cache[key] = val
        return self._cache[key]

    @property
    def dist_obs(self):
        return self._get("obs", lambda: squareform(self.dist_obs_condensed))

    @property
    def dist_obs_condensed(self):
        return self._get("obs_condensed", lambda: pdist(self.locations))

    @property
    def dist_cross(self):
        return self._get("cross", lambda: cdist(self.pred_locations, self.locations))

    @property
    def dist_pred(self):
        return self._get("pred", lambda: squareform(pdist(self.pred_locations)))

    def in_support(self, sigma2, rho, nu_smooth):
        a, b, L0, U0, L1, U1 = self.priors
        return sigma2 > 0 and L0 < rho < U0 and L1 < nu_smooth < U1

    def transform(self):
        a, b, L0, U0, L1, U1 = self.priors
        return tr.Transform([tr.log(), tr.logit(L0, U0), tr.logit(L1, U1)])

    # -- file formats ---------------------------------------------------------

    def observations_csv(self, target=None):
        return _write_rows(target, ["x", "y", "value"], np.column_stack([self.locations, self.responses]))

    def prediction_csv(self, target=None):
        return _write_rows(target, ["x", "y"], self.pred_locations)

    @classmethod
    def from_csv(cls, observations, predictions=None, priors=PAPER_PRIORS):
        obs = _read_rows(observations, ["x", "y", "value"])
        pred = _read_rows(predictions, ["x", "y"]) if predictions is not None else np.zeros((0, 2))
        return cls(obs[:, :2], obs[:, 2], pred, priors)


def _write_rows(target, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in np.atleast_2d(rows):
        writer.writerow([format(float(v), ".17g") for v in row])
    if target is None:
        return buf.getvalue()
    with open(target, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _read_rows(source, header):
    if hasattr(source, "read"):
        rows = list(csv.DictReader(source))
    else:
        with open(source, newline="") as fh:
            rows = list(csv.DictReader(fh))
    if rows and not set(header) <= set(rows[0]):
        raise ValueError(f"CSV needs columns {','.join(header)}")
    return np.array([[float(row[h]) for h in header] for row in rows]).reshape(-1, len(header))


def cholesky(A):
    """Lower Cholesky factor; raises :class:`CholeskyError` with the failing pivot."""
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise CholeskyError(int(info) - 1, f"covariance not positive definite at pivot {int(info) - 1}")
    if info < 0:
        raise ValueError("invalid input to Cholesky factorization")
    return c


def correlation_matrix(config: SpatialConfig, rho, nu_smooth):
    """Unit-variance Matern correlation matrix of the observation sites."""
    R = squareform(matern(config.dist_obs_condensed, 1.0, rho, nu_smooth))
    np.fill_diagonal(R, 1.0)
    return R


def correlation_factor(config: SpatialConfig, rho, nu_smooth):
    """Cholesky factor of the unit-variance correlation matrix of the observations."""
    return cholesky(correlation_matrix(config, rho, nu_smooth))


def log_prior(config: SpatialConfig, sigma2, rho, nu_smooth):
    a, b, L0, U0, L1, U1 = config.priors
    if not config.in_support(sigma2, rho, nu_smooth):
        return -np.inf
    lp = a * np.log(b) - special.gammaln(a) - (a + 1.0) * np.log(sigma2) - b / sigma2
    return float(lp - np.log(U0 - L0) - np.log(U1 - L1))


def gp_log_likelihood(config: SpatialConfig, sigma2, rho, nu_smooth, factor=None):
    """Multivariate normal log likelihood via the Cholesky factor."""
    L = factor if factor is not None else correlation_factor(config, rho, nu_smooth)
    z = linalg.solve_triangular(L, config.responses, lower=True)
    n = config.n_obs
    return float(-0.5 * np.dot(z, z) / sigma2 - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(sigma2) - 0.5 * n * _LOG_2PI)


def gp_log_posterior(config: SpatialConfig, sigma2, rho, nu_smooth):
    """Log likelihood plus log priors; ``-inf`` outside the prior support."""
    lp = log_prior(config, sigma2, rho, nu_smooth)
    if not np.isfinite(lp):
        return -np.inf
    return gp_log_likelihood(config, sigma2, rho, nu_smooth) + lp


def collapsed_log_posterior(config: SpatialConfig, rho, nu_smooth, factor=None):
    """``log f(rho, nu | X)`` with ``sigma2`` integrated out, plus the IG update.

    Returns ``(value, shape, scale, factor)`` where ``sigma2 | rho, nu, X ~
    IG(shape, scale)``.
    """
    a, b, L0, U0, L1, U1 = config.priors
    if not (L0 < rho < U0 and L1 < nu_smooth < U1):
        return -np.inf, None, None, None
    L = factor if factor is not None else correlation_factor(config, rho, nu_smooth)
    z = linalg.solve_triangular(L, config.responses, lower=True)
    shape = a + 0.5 * config.n_obs
    scale = b + 0.5 * np.dot(z, z)
    val = -np.sum(np.log(np.diag(L))) + special.gammaln(shape) - shape * np.log(scale)
    return float(val), shape, scale, L


@dataclass(frozen=True)
class KrigingResult:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self):
        return np.maximum(np.diag(self.cov), 0.0)


def kriging_conditional(config: SpatialConfig, sigma2, rho, nu_smooth, full_cov=True) -> KrigingResult:
    """Conditional mean and covariance of the field at the prediction locations."""
    L = correlation_factor(config, rho, nu_smooth)
    cross = matern(config.dist_cross, 1.0, rho, nu_smooth)
    A = linalg.solve_triangular(L, cross.T, lower=True)
    z = linalg.solve_triangular(L, config.responses, lower=True)
    mean = A.T @ z
    if full_cov:
        cov = sigma2 * (matern(config.dist_pred, 1.0, rho, nu_smooth) - A.T @ A)
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.diag(sigma2 * (1.0 - np.sum(A * A, axis=0)))
    return KrigingResult(mean, cov)


def prediction_grid(M):
    m = int(round(np.sqrt(M)))
    if m * m != M or M < 1:
        raise ValueError(f"prediction grid size {M} is not a positive perfect square")
    ticks = (np.arange(m) + 0.5) / m
    gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


def simulate_spatial(seed=0, N=PAPER_N, M=PAPER_M, sigma2=1.0, rho=0.3, nu_smooth=0.5, priors=PAPER_PRIORS):
    """Uniform locations, gridded prediction sites and a Gaussian draw of the field."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if not (sigma2 > 0 and rho > 0 and nu_smooth > 0):
        raise ValueError("covariance parameters must be positive")
    rng = np.random.default_rng(seed)
    loc = rng.random((N, 2))
    pred = prediction_grid(M)
    L = cholesky(matern(squareform(pdist(loc)), sigma2, rho, nu_smooth))
    x = L @ rng.standard_normal(N)
    return SpatialConfig(loc, x, pred, priors, (float(sigma2), float(rho), float(nu_smooth)), seed)


# -- BISQuE model -------------------------------------------------------------


def spatial_model(config: SpatialConfig, init=None) -> HierarchicalModel:
    """Model for kriging quantities conditioning on ``(sigma2, rho, nu)``.

    Conditional quantities return length-``M`` vectors (one entry per
    prediction location); the kriging solve is cached per node.
    """

    @lru_cache(maxsize=4096)
    def krig(key):
        s2, rho, nu = np.frombuffer(key)
        res = kriging_conditional(config, s2, rho, nu, full_cov=False)
        return res.mean, res.var

    def k(theta):
        return krig(np.ascontiguousarray(theta, dtype=float).tobytes())

    def log_density(theta):
        try:
            return gp_log_posterior(config, *theta)
        except CholeskyError:
            return -np.inf

    def mean(theta):
        return k(theta)[0]

    def variance(theta):
        return k(theta)[1]

    def cdf(bound, theta):
        m, v = k(theta)
        return stats.norm.cdf(bound, m, np.sqrt(v))

    def density(y, theta):
        m, v = k(theta)
        y = np.asarray(y, dtype=float)
        return stats.norm.pdf(y[:, None], m, np.sqrt(v)).T

    if init is None:
        a, b, L0, U0, L1, U1 = config.priors
        init = np.array([b / (a + 1.0) if a > 1 else np.var(config.responses), 0.5 * (L0 + U0), 0.5 * (L1 + U1)])
    return HierarchicalModel(
        transform=config.transform(),
        log_density=log_density,
        quantities={"mean": mean, "variance": variance, "cdf": cdf, "density": density},
        init=np.asarray(init, dtype=float),
        name="spatial",
    )


def joint_log_density_nu(config: SpatialConfig):
    """Transformed log posterior of ``(log sigma2, logit rho, logit nu)``."""
    t = config.transform()

    def f(nu):
        theta = t.inverse(np.asarray(nu, dtype=float))
        try:
            return gp_log_posterior(config, *theta) + t.log_jacobian_det(nu)
        except CholeskyError:
            return -np.inf

    return f
