"""Reference Markov chain samplers for the fur-seal and spatial models.

These are the brute-force baselines that BISQuE approximations are checked
against: Metropolis-within-Gibbs chains, composition sampling of predictive
draws, and density estimates (kernel smoothing or Rao-Blackwellized
averages of conditional densities) computed from the retained draws.
"""

import csv
import io
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.special import betaln, expit, logit, logsumexp, xlog1py, xlogy

from .exceptions import CholeskyError
from .models.furseal import U2_DEFAULT, FurSealData, beta_params, furseal_conditional_N
from .models.spatial import SpatialConfig, collapsed_log_posterior, correlation_factor, matern

FURSEAL_PROPOSAL_SD = 0.15
SPATIAL_PROPOSAL_SDS = (0.5, 1.5)


class DegenerateSampleWarning(RuntimeWarning):
    pass


@dataclass
class ChainSamples:
    """Draws of one chain with its run settings and Metropolis diagnostics."""

    draws: np.ndarray
    names: list
    seed: int
    burn_in: int
    acceptance: dict = field(default_factory=dict)
    rejected: int = 0

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if not 0 <= self.burn_in < self.draws.shape[0]:
            raise ValueError("burn_in must be smaller than the number of iterations")

    @property
    def iterations(self):
        return self.draws.shape[0]

    @property
    def retained(self):
        return self.draws[self.burn_in :]

    def column(self, name):
        return self.retained[:, self.names.index(name)]

    def summary(self):
        kept = self.retained
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "means": dict(zip(self.names, kept.mean(axis=0).tolist())),
            "variances": dict(zip(self.names, kept.var(axis=0, ddof=1).tolist())),
            "acceptance": dict(self.acceptance),
            "rejected_factorizations": self.rejected,
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def to_csv(self, target=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration"] + list(self.names))
        for i, row in enumerate(self.draws):
            writer.writerow([i] + [format(v, ".17g") for v in row])
        if target is None:
            return buf.getvalue()
        with open(target, "w", newline="") as fh:
            fh.write(buf.getvalue())


# -- fur seals ---------------------------------------------------------------


def _log_beta_sum(alpha, U1, U2):
    a, b = beta_params(U1, U2)
    return float(np.sum(xlogy(a - 1.0, alpha) + xlog1py(b - 1.0, -alpha)) - alpha.size * betaln(a, b))


def run_furseal_chain(
    data: FurSealData,
    iterations=200_000,
    seed=0,
    proposal_sd=FURSEAL_PROPOSAL_SD,
    U2=U2_DEFAULT,
    burn_in=None,
    init=None,
) -> ChainSamples:
    """Gibbs draws for ``alpha`` and ``N`` with random-walk Metropolis on ``U1``.

    ``N | alpha`` is drawn by inverting its CDF over the support used by
    :func:`~bisque.models.furseal.furseal_conditional_N`.
    Columns: ``N, alpha_1..alpha_I, U1``.
    """
    if iterations < 1000:
        raise ValueError("iterations must be at least 1000")
    burn_in = iterations // 2 if burn_in is None else int(burn_in)
    rng = np.random.default_rng(seed)
    c = data.captured.astype(float)
    r = data.r
    I = data.I
    if init is None:
        alpha = np.clip(c / max(r, 1), 0.05, 0.95)
        U1 = float(logit(alpha.mean()))
        N = float(r)
    else:
        N, alpha, U1 = float(init[0]), np.asarray(init[1:-1], dtype=float), float(init[-1])
    out = np.empty((iterations, I + 2))
    accepted = 0
    cur = _log_beta_sum(alpha, U1, U2)
    for t in range(iterations):
        a, b = beta_params(U1, U2)
        alpha = rng.beta(c + a, N - c + b)
        alpha = np.clip(alpha, 1e-300, 1.0 - 1e-16)
        cond = furseal_conditional_N(data, alpha)
        cdf = np.cumsum(cond.pmf_values)
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        N = float(cond.support[min(idx, cdf.size - 1)])
        cur = _log_beta_sum(alpha, U1, U2)
        prop = U1 + proposal_sd * rng.standard_normal()
        new = _log_beta_sum(alpha, prop, U2)
        if np.log(rng.random()) < new - cur:
            U1, cur = prop, new
            accepted += 1
        out[t, 0] = N
        out[t, 1 : I + 1] = alpha
        out[t, I + 1] = U1
    names = ["N"] + [f"alpha_{i + 1}" for i in range(I)] + ["U1"]
    return ChainSamples(out, names, seed, burn_in, {"U1": accepted / iterations})


def furseal_rb_density(chain: ChainSamples, data: FurSealData, target, points, thin=1, U2=U2_DEFAULT):
    """Rao-Blackwellized density estimate from retained draws.

    ``target`` is ``"N"`` (pmf at integer ``points``), ``"alpha_i"`` or
    ``"U1"``; each retained draw contributes the exact full-conditional
    density of the target, normalized for ``U1`` on a dense trapezoid grid.
    """
    kept = chain.retained[::thin]
    I = data.I
    points = np.asarray(points, dtype=float)
    c = data.captured.astype(float)
    if target == "N":
        total = np.zeros(points.size)
        for row in kept:
            total += furseal_conditional_N(data, row[1 : I + 1]).pmf(points)
        return total / len(kept)
    if target.startswith("alpha_"):
        i = int(target.split("_")[1]) - 1
        a, b = beta_params(kept[:, I + 1], U2)
        A = c[i] + a
        B = kept[:, 0] - c[i] + b
        total = np.zeros(points.size)
        for lo in range(0, len(kept), 4096):
            sl = slice(lo, lo + 4096)
            total += stats.beta.pdf(points[None, :], A[sl, None], B[sl, None]).sum(axis=0)
        return total / len(kept)
    if target == "U1":
        # normalizer of f(U1 | alpha) on a fixed dense grid wide enough for every draw
        grid = np.linspace(points.min() - 3.0, points.max() + 3.0, 4001)
        both = np.concatenate([points, grid])
        total = np.zeros(points.size)
        for lo in range(0, len(kept), 512):
            alpha = kept[lo : lo + 512, 1 : I + 1]
            a, b = beta_params(both, U2)
            la = np.log(alpha)
            l1 = np.log1p(-alpha)
            logf = (a[None, :] - 1.0) * la.sum(axis=1)[:, None] + (b[None, :] - 1.0) * l1.sum(axis=1)[:, None]
            logf -= I * betaln(a, b)[None, :]
            lg = logf[:, points.size :]
            dx = grid[1] - grid[0]
            lnorm = logsumexp(lg, axis=1, b=np.r_[0.5, np.ones(grid.size - 2), 0.5][None, :] * dx)
            total += np.exp(logf[:, : points.size] - lnorm[:, None]).sum(axis=0)
        return total / len(kept)
    raise ValueError(f"unknown target {target!r}")


# -- spatial -----------------------------------------------------------------


def run_spatial_chain(
    config: SpatialConfig,
    iterations=100_000,
    seed=0,
    proposal_sds=SPATIAL_PROPOSAL_SDS,
    burn_in=None,
    init=None,
    proposal_cov=None,
) -> ChainSamples:
    """Metropolis on logit ``(rho, nu)`` with ``sigma2`` integrated out, then an IG draw of ``sigma2``.

    The Metropolis ratio uses the marginal of ``(rho, nu)`` obtained by
    integrating the conjugate ``sigma2`` out analytically, and ``sigma2`` is
    then drawn from its inverse-gamma full conditional; each iteration
    factorizes one correlation matrix.  Proposals whose factorization fails
    are rejected and counted.  Columns: ``sigma2, rho, nu``.

    Proposals are independent normals with standard deviations
    ``proposal_sds`` on the two logit scales, or correlated normals with
    covariance ``proposal_cov`` when given (see :func:`pilot_proposal_cov`).
    """
    if iterations < 1000:
        raise ValueError("iterations must be at least 1000")
    burn_in = iterations // 2 if burn_in is None else int(burn_in)
    a, b, L0, U0, L1, U1 = config.priors
    rng = np.random.default_rng(seed)
    if proposal_cov is None:
        root = np.diag(np.asarray(proposal_sds, dtype=float))
    else:
        root = linalg.cholesky(np.asarray(proposal_cov, dtype=float), lower=True)
    if init is None:
        rho, nu = 0.5 * (L0 + U0), 0.5 * (L1 + U1)
    else:
        rho, nu = float(init[1]), float(init[2])
    z = np.array([logit((rho - L0) / (U0 - L0)), logit((nu - L1) / (U1 - L1))])

    def target(zz):
        rr = L0 + (U0 - L0) * expit(zz[0])
        nn = L1 + (U1 - L1) * expit(zz[1])
        val, shape, scale, _ = collapsed_log_posterior(config, rr, nn)
        # uniform priors on the logit scale carry the logistic Jacobian
        jac = np.sum(-np.logaddexp(0.0, zz) - np.logaddexp(0.0, -zz))
        return val + jac, shape, scale

    cur, shape, scale = target(z)
    out = np.empty((iterations, 3))
    accepted = 0
    rejected = 0
    for t in range(iterations):
        prop = z + root @ rng.standard_normal(2)
        u = rng.random()
        try:
            new, nshape, nscale = target(prop)
        except CholeskyError:
            rejected += 1
            new = -np.inf
        if np.log(u) < new - cur:
            z, cur, shape, scale = prop, new, nshape, nscale
            accepted += 1
        sigma2 = scale / rng.gamma(shape)
        out[t] = (sigma2, L0 + (U0 - L0) * expit(z[0]), L1 + (U1 - L1) * expit(z[1]))
    return ChainSamples(out, ["sigma2", "rho", "nu"], seed, burn_in, {"rho,nu": accepted / iterations}, rejected)


def pilot_proposal_cov(chain: ChainSamples, config: SpatialConfig, scale=2.38):
    """Random-walk covariance ``scale^2 / 2`` times the logit-scale draw covariance of a pilot chain."""
    _, _, L0, U0, L1, U1 = config.priors
    draws = chain.retained
    z = np.column_stack([logit((draws[:, 1] - L0) / (U0 - L0)), logit((draws[:, 2] - L1) / (U1 - L1))])
    return scale**2 / 2.0 * np.cov(z.T)


def sigma2_rb_log_density(chain: ChainSamples, config: SpatialConfig, log_points, thin=1):
    """Rao-Blackwellized density of ``log sigma2`` from the inverse-gamma conditionals."""
    a, b = config.priors[:2]
    kept = chain.retained[::thin]
    cache = {}
    total = np.zeros(np.size(log_points))
    s2 = np.exp(np.asarray(log_points, dtype=float))
    for rho, nu in kept[:, 1:]:
        key = (rho, nu)
        if key not in cache:
            _, shape, scale, _ = collapsed_log_posterior(config, rho, nu)
            cache[key] = stats.invgamma.pdf(s2, shape, scale=scale) * s2
        total += cache[key]
    return total / len(kept)


@dataclass
class PredictiveDraws:
    draws: np.ndarray
    seed: int

    @property
    def count(self):
        return self.draws.shape[0]


def _cov_sqrt(cov):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def composition_predict(chain: ChainSamples, config: SpatialConfig, seed=0, n_jobs=None) -> PredictiveDraws:
    """One conditional Gaussian draw at the prediction sites per retained sample.

    Standard-normal innovations come from a single generator seeded with
    ``seed``, so results do not depend on ``n_jobs``.  The kriging solve is
    shared between consecutive samples with the same ``(rho, nu)``; the
    conditional covariance scales linearly in ``sigma2``.
    """
    kept = chain.retained
    M = config.n_pred
    rng = np.random.default_rng(seed)
    innov = rng.standard_normal((kept.shape[0], M))
    keys = [(rho, nu) for rho, nu in kept[:, 1:]]
    unique = list(dict.fromkeys(keys))

    def solve(key):
        rho, nu = key
        L = correlation_factor(config, rho, nu)
        cross = matern(config.dist_cross, 1.0, rho, nu)
        A = linalg.solve_triangular(L, cross.T, lower=True)
        zx = linalg.solve_triangular(L, config.responses, lower=True)
        cov = matern(config.dist_pred, 1.0, rho, nu) - A.T @ A
        return A.T @ zx, _cov_sqrt(cov)

    if n_jobs is not None and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            solved = dict(zip(unique, pool.map(solve, unique)))
    else:
        solved = {key: solve(key) for key in unique}
    out = np.empty((kept.shape[0], M))
    for t, key in enumerate(keys):
        mean, root = solved[key]
        out[t] = mean + np.sqrt(kept[t, 0]) * (root @ innov[t])
    return PredictiveDraws(out, seed)


# -- density estimation -------------------------------------------------------


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def kde_density(samples, eval_points, bandwidth=None):
    """Gaussian kernel density estimate with Silverman's rule-of-thumb bandwidth.

    Zero-variance samples produce a narrow spike at the common value (with
    a :class:`DegenerateSampleWarning`) instead of a division by zero.
    """
    x = np.asarray(samples, dtype=float).ravel()
    pts = np.asarray(eval_points, dtype=float)
    if x.size < 100:
        raise ValueError("kde_density needs at least 100 samples")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        warnings.warn("samples have zero variance; returning a spike", DegenerateSampleWarning, stacklevel=2)
        h = 1e-6 * max(1.0, abs(x[0]))
    total = np.zeros(pts.size)
    for lo in range(0, x.size, 8192):
        chunk = x[lo : lo + 8192]
        total += stats.norm.pdf((pts[:, None] - chunk[None, :]) / h).sum(axis=1)
    return total / (x.size * h)


def histogram_pmf(samples, support):
    """Empirical frequencies of integer ``support`` values."""
    x = np.asarray(samples)
    support = np.asarray(support)
    return np.array([(x == s).mean() for s in support])
