"""Closed-population capture-recapture model for a pup census.

Each of ``I`` visits captures ``c_i`` animals, ``m_i`` of them for the first
time, and ``r = sum(m)`` distinct animals are seen overall.  With population
size ``N``, capture probabilities ``alpha`` and Beta hyperparameters in
mean/sample-size form (``U1`` the logit of the mean, ``U2`` the log sample
size, held fixed):

    f(c, r | N, alpha)  ~  N! / (N - r)! * prod alpha_i^c_i (1 - alpha_i)^(N - c_i)
    f(N)                ~  1 / N
    alpha_i | U1, U2    ~  Beta(e^U2 sigmoid(U1), e^U2 (1 - sigmoid(U1)))
    f(a, b)             ~  exp(-(a + b) / 1000)

Summing ``N`` out in closed form uses the negative-binomial series
``sum_{N >= r} (N-1)! / (N-r)! P^N = (r-1)! P^r (1-P)^(-r)`` with
``P = prod(1 - alpha_i)``.
"""

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import betaln, expit, gammaln, xlog1py, xlogy

from .. import transform as tr
from ..core import Factorization, HierarchicalModel
from ..exceptions import BisqueError

U2_DEFAULT = 5.5
TAIL_MASS = 1e-12
MAX_SUPPORT = 10_000_000


@dataclass(frozen=True)
class FurSealData:
    captured: np.ndarray
    newly_captured: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.captured)
        m = np.asarray(self.newly_captured)
        if c.ndim != 1 or c.shape != m.shape or c.size == 0:
            raise ValueError("captured and newly_captured must be equal-length non-empty vectors")
        if not (np.all(c == np.round(c)) and np.all(m == np.round(m))):
            raise ValueError("counts must be integers")
        c = c.astype(np.int64)
        m = m.astype(np.int64)
        if np.any(c < 0) or np.any(m < 0):
            raise ValueError("counts must be non-negative")
        if np.any(m > c):
            raise ValueError("newly captured cannot exceed captured")
        if m.sum() < c.max():
            raise ValueError("total marked r must be at least max(captured)")
        c.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "captured", c)
        object.__setattr__(self, "newly_captured", m)

    @property
    def I(self):
        return self.captured.size

    @property
    def r(self):
        return int(self.newly_captured.sum())

    def to_csv(self, target=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["visit", "captured", "newly_captured"])
        for i, (c, m) in enumerate(zip(self.captured, self.newly_captured), start=1):
            writer.writerow([i, int(c), int(m)])
        if target is None:
            return buf.getvalue()
        with open(target, "w", newline="") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def from_csv(cls, source):
        """Read ``visit,captured,newly_captured`` rows (path or open stream)."""
        if hasattr(source, "read"):
            rows = list(csv.DictReader(source))
        else:
            with open(source, newline="") as fh:
                rows = list(csv.DictReader(fh))
        if not rows or not {"visit", "captured", "newly_captured"} <= set(rows[0]):
            raise ValueError("fur-seal CSV needs columns visit,captured,newly_captured")
        rows.sort(key=lambda row: int(row["visit"]))
        return cls(
            np.array([int(row["captured"]) for row in rows]),
            np.array([int(row["newly_captured"]) for row in rows]),
        )


@dataclass(frozen=True)
class FurSealParams:
    N: float
    alpha: np.ndarray
    U1: float
    U2: float = U2_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))


def _lse(x):
    # plain log-sum-exp of a finite 1-D array; scipy's version costs more in call overhead here
    m = x.max()
    return m + np.log(np.sum(np.exp(x - m)))


def beta_params(U1, U2=U2_DEFAULT):
    """Beta shape parameters ``(e^U2 sigmoid(U1), e^U2 sigmoid(-U1))``."""
    s = np.exp(U2)
    return s * expit(U1), s * expit(-U1)


def _log_beta_prior(alpha, U1, U2):
    # sum_i log Beta(alpha_i; a, b); broadcasts U1 of shape (K,) against alpha (K, I)
    a, b = beta_params(np.asarray(U1, dtype=float), U2)
    a = a[..., None]
    b = b[..., None]
    return np.sum(xlogy(a - 1.0, alpha) + xlog1py(b - 1.0, -alpha) - betaln(a, b), axis=-1)


def _hyper_prior(U2):
    return -np.exp(U2) / 1000.0


def furseal_log_joint(data: FurSealData, params: FurSealParams) -> float:
    """Log joint density of ``(N, alpha, U1)`` with the data, up to a constant."""
    N = float(params.N)
    alpha = params.alpha
    c = data.captured
    if N < data.r or N <= 0:
        return -np.inf
    if np.any(alpha <= 0) or np.any(alpha >= 1):
        return -np.inf
    lik = gammaln(N + 1.0) - gammaln(N - data.r + 1.0)
    lik += np.sum(xlogy(c, alpha) + xlog1py(N - c, -alpha))
    return float(lik - np.log(N) + _log_beta_prior(alpha, params.U1, params.U2) + _hyper_prior(params.U2))


def furseal_conditional_alpha(data: FurSealData, N, U1, U2=U2_DEFAULT):
    """Beta parameters of ``alpha_i | N, U1, data``: ``(c_i + a, N - c_i + b)``."""
    a, b = beta_params(U1, U2)
    c = data.captured.astype(float)
    A, B = np.broadcast_arrays(c + a, np.asarray(N, dtype=float) - c + b)
    return A.copy(), B.copy()


@dataclass(frozen=True)
class NConditional:
    """Distribution of ``N`` given ``alpha`` on the integers ``r, ..., n_max``.

    The kernel ``(N-1)! / (N-r)! * P^N`` is normalized by direct summation;
    ``n_max`` is the first point where a geometric bound on the remaining
    tail mass falls below ``1e-12``.
    """

    r: int
    log_p: float
    support: np.ndarray = field(repr=False)
    pmf_values: np.ndarray = field(repr=False)

    @property
    def n_max(self):
        return int(self.support[-1])

    def pmf(self, N):
        N = np.asarray(N)
        idx = np.round(N).astype(np.int64) - self.r
        ok = (N == np.round(N)) & (idx >= 0) & (idx < self.support.size)
        out = np.zeros(N.shape, dtype=float)
        out[ok] = self.pmf_values[idx[ok]]
        return out if out.ndim else float(out)

    def cdf(self, N):
        cum = np.cumsum(self.pmf_values)
        idx = np.floor(np.asarray(N, dtype=float)).astype(np.int64) - self.r
        out = np.where(idx < 0, 0.0, cum[np.clip(idx, 0, cum.size - 1)])
        return out if np.ndim(out) else float(out)

    def mean(self):
        return float(np.dot(self.support, self.pmf_values))

    def var(self):
        mu = self.mean()
        return float(np.dot((self.support - mu) ** 2, self.pmf_values))

    def mode(self):
        return int(self.support[np.argmax(self.pmf_values)])


def _n_kernel(r, log_p, N):
    N = np.asarray(N, dtype=float)
    return gammaln(N) - gammaln(N - r + 1.0) + N * log_p


def _n_cutoff(r, log_p, tail=TAIL_MASS):
    # ratio k(N+1)/k(N) = N P / (N - r + 1) decreases in N; once below 1 the
    # remaining mass is bounded by a geometric series
    P = np.exp(log_p)
    if P >= 1.0:
        raise BisqueError("cutoff search failed: prod(1 - alpha) is 1, N has no finite support")
    if P == 0.0:
        return r
    log_total = -np.inf
    N = r
    block = 64
    while N - r < MAX_SUPPORT:
        Ns = np.arange(N, N + block, dtype=float)
        logk = _n_kernel(r, log_p, Ns)
        log_total = np.logaddexp(log_total, _lse(logk))
        ratio = Ns * P / (Ns - r + 1.0)
        with np.errstate(divide="ignore"):
            bound = logk + np.log(ratio) - np.log1p(-np.minimum(ratio, 1.0))
        good = (ratio < 1.0) & (bound - log_total < np.log(tail))
        if good.any():
            return int(Ns[np.argmax(good)])
        N += block
        block *= 2
    raise BisqueError(
        f"cutoff search failed: tail mass above {tail} beyond N = r + {MAX_SUPPORT} (capture probabilities near 0)"
    )


def furseal_conditional_N(data: FurSealData, alpha, U1=None) -> NConditional:
    """Conditional pmf of ``N`` given ``alpha`` (``U1`` does not enter)."""
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore"):
        log_p = float(np.sum(np.log1p(-alpha)))
    r = data.r
    if log_p == -np.inf:
        # some visit captured everyone: N = r with certainty
        support, pmf = np.array([r]), np.array([1.0])
        support.setflags(write=False)
        pmf.setflags(write=False)
        return NConditional(r, log_p, support, pmf)
    n_max = _n_cutoff(r, log_p)
    support = np.arange(r, n_max + 1)
    logk = _n_kernel(r, log_p, support)
    pmf = np.exp(logk - _lse(logk))
    pmf /= pmf.sum()
    support.setflags(write=False)
    pmf.setflags(write=False)
    return NConditional(r, log_p, support, pmf)


def n_pmf_closed_form(data: FurSealData, alpha, N):
    """``N - r | alpha ~ NegBin(r, 1 - P)`` pmf; cross-checks the summation."""
    alpha = np.asarray(alpha, dtype=float)
    P = np.prod(1.0 - alpha)
    r = data.r
    N = np.asarray(N, dtype=float)
    k = N - r
    return np.exp(gammaln(k + r) - gammaln(r) - gammaln(k + 1.0) + r * np.log1p(-P) + k * np.log(P))


# -- marginal posteriors of conditioning blocks --------------------------------


def log_marginal_alpha_u1(data: FurSealData, alpha, U1, U2=U2_DEFAULT):
    """``log f(alpha, U1 | data)`` with ``N`` summed out exactly (up to a constant)."""
    alpha = np.asarray(alpha, dtype=float)
    outside = np.any((alpha <= 0) | (alpha >= 1), axis=-1)
    if np.all(outside):
        return -np.inf if alpha.ndim == 1 else np.full(outside.shape, -np.inf)
    c = data.captured
    r = data.r
    with np.errstate(divide="ignore", invalid="ignore"):
        log_p = np.sum(np.log1p(-alpha), axis=-1)
        val = np.sum(xlogy(c, alpha) + xlog1py(r - c, -alpha), axis=-1) - r * np.log1p(-np.exp(log_p))
        val = val + _log_beta_prior(alpha, U1, U2)
    return np.where(outside, -np.inf, val) if alpha.ndim > 1 else val


def log_marginal_n_u1(data: FurSealData, N, U1, U2=U2_DEFAULT):
    """``log f(N, U1 | data)`` with ``alpha`` integrated out (``N`` may be real)."""
    N = np.asarray(N, dtype=float)
    U1 = np.asarray(U1, dtype=float)
    a, b = beta_params(U1, U2)
    c = data.captured.astype(float)
    Nx = np.expand_dims(N, -1)
    ax = np.expand_dims(a, -1)
    bx = np.expand_dims(b, -1)
    terms = np.sum(betaln(c + ax, Nx - c + bx) - betaln(ax, bx), axis=-1)
    val = gammaln(N + 1.0) - gammaln(N - data.r + 1.0) - np.log(N) + terms
    return np.where(N >= data.r, val, -np.inf)


def _n_grid(data, U1, U2):
    # integer support for N that carries all but ~1e-14 of f(N | U1, data)
    r = data.r
    hi = r + 64
    while True:
        Ns = np.arange(r, hi + 1, dtype=float)
        logk = log_marginal_n_u1(data, Ns, U1, U2)
        if logk[-1] - _lse(logk) < -35.0 and logk[-1] < logk[-2]:
            return Ns, logk
        hi = r + 2 * (hi - r)
        if hi - r > MAX_SUPPORT:
            raise BisqueError("cutoff search failed for N given U1")


def log_marginal_u1(data: FurSealData, U1, U2=U2_DEFAULT):
    """``log f(U1 | data)`` by exact summation over ``N`` (up to a constant)."""
    Ns, logk = _n_grid(data, U1, U2)
    return float(_lse(logk))


def n_given_u1(data: FurSealData, U1, U2=U2_DEFAULT):
    """Support and pmf of ``N | U1, data`` (``alpha`` integrated out)."""
    Ns, logk = _n_grid(data, U1, U2)
    return Ns, np.exp(logk - _lse(logk))


# -- BISQuE model builders ----------------------------------------------------


def _alpha_u1_transform(I):
    return tr.Transform([tr.logit()] * I + [tr.identity()])


def _alpha_init(data):
    # moment-style start: alpha_i ~ c_i / r, U1 at the logit of their mean
    alpha = np.clip(data.captured / max(data.r, 1), 0.05, 0.95)
    return alpha, float(np.log(alpha.mean() / (1 - alpha.mean())))


def n_model(data: FurSealData, U2=U2_DEFAULT) -> HierarchicalModel:
    """Model for ``f(N | data)`` conditioning on ``theta2 = (alpha, U1)``."""
    I = data.I

    @lru_cache(maxsize=8192)
    def cond(key):
        return furseal_conditional_N(data, np.frombuffer(key))

    def conditional(theta):
        # shared by every quantity evaluated at the same node
        return cond(np.ascontiguousarray(theta[:I], dtype=float).tobytes())

    def log_density(theta):
        return float(log_marginal_alpha_u1(data, theta[:I], theta[I], U2))

    log_density.batch = lambda rows: log_marginal_alpha_u1(data, rows[:, :I], rows[:, I], U2)

    def density(Ns, theta):
        return conditional(theta).pmf(np.asarray(Ns, dtype=float))

    def mean(theta):
        return conditional(theta).mean()

    def variance(theta):
        return conditional(theta).var()

    def cdf(bound, theta):
        return conditional(theta).cdf(bound)

    alpha0, u0 = _alpha_init(data)
    return HierarchicalModel(
        transform=_alpha_u1_transform(I),
        log_density=log_density,
        quantities={"density": density, "mean": mean, "variance": variance, "cdf": cdf},
        init=np.append(alpha0, u0),
        name="furseal-N",
    )


def _alpha_mixture(data, U1, U2, i):
    # f(alpha_i | U1, data) = sum_N f(alpha_i | N, U1) f(N | U1, data)
    Ns, w = n_given_u1(data, U1, U2)
    keep = w > 1e-16 * w.max()
    A, B = furseal_conditional_alpha(data, Ns[keep, None], U1, U2)
    return w[keep] / w[keep].sum(), A[:, i], B[:, i]


def alpha_model(data: FurSealData, i: Optional[int] = None, U2=U2_DEFAULT, route="discrete") -> HierarchicalModel:
    """Model for ``f(alpha_i | data)``.

    ``route="discrete"`` conditions on ``U1`` alone and sums the integer
    ``N`` exactly inside the conditional quantities; ``route="relaxed"``
    conditions on ``(N, U1)`` with ``N`` treated as real and mapped by
    ``log(N - r)``.  With ``i=None`` the quantities return all visits at once.
    """
    from scipy import stats

    idx = slice(None) if i is None else i

    if route == "relaxed":

        def log_density(theta):
            return float(log_marginal_n_u1(data, theta[0], theta[1], U2))

        def params(theta):
            A, B = furseal_conditional_alpha(data, theta[0], theta[1], U2)
            return A[idx], B[idx]

        def density(x, theta):
            A, B = params(theta)
            x = np.asarray(x, dtype=float)
            return stats.beta.pdf(np.expand_dims(x, -1), A, B).T if i is None else stats.beta.pdf(x, A, B)

        def mean(theta):
            A, B = params(theta)
            return A / (A + B)

        def variance(theta):
            A, B = params(theta)
            return A * B / ((A + B) ** 2 * (A + B + 1.0))

        def cdf(bound, theta):
            A, B = params(theta)
            return stats.beta.cdf(bound, A, B)

        _, u0 = _alpha_init(data)
        n0 = data.r + 1.0
        return HierarchicalModel(
            transform=tr.Transform([tr.log(lower=data.r), tr.identity()]),
            log_density=log_density,
            quantities={"density": density, "mean": mean, "variance": variance, "cdf": cdf},
            init=np.array([n0, u0]),
            name="furseal-alpha-relaxed",
        )
    if route != "discrete":
        raise ValueError(f"unknown route {route!r}")

    visits = range(data.I) if i is None else [i]

    def log_density(theta):
        return log_marginal_u1(data, theta[0], U2)

    def density(x, theta):
        x = np.asarray(x, dtype=float)
        rows = []
        for j in visits:
            w, A, B = _alpha_mixture(data, theta[0], U2, j)
            rows.append(np.dot(w, stats.beta.pdf(x[None, :], A[:, None], B[:, None])))
        return np.array(rows) if i is None else rows[0]

    def moments(theta):
        out = []
        for j in visits:
            w, A, B = _alpha_mixture(data, theta[0], U2, j)
            m = A / (A + B)
            v = A * B / ((A + B) ** 2 * (A + B + 1.0))
            mu = np.dot(w, m)
            out.append((mu, np.dot(w, v + m * m) - mu * mu))
        return np.array(out)

    def mean(theta):
        m = moments(theta)[:, 0]
        return m if i is None else float(m[0])

    def variance(theta):
        v = moments(theta)[:, 1]
        return v if i is None else float(v[0])

    def cdf(bound, theta):
        vals = []
        for j in visits:
            w, A, B = _alpha_mixture(data, theta[0], U2, j)
            vals.append(np.dot(w, stats.beta.cdf(bound, A, B)))
        return np.array(vals) if i is None else float(vals[0])

    _, u0 = _alpha_init(data)
    return HierarchicalModel(
        transform=tr.Transform([tr.identity()]),
        log_density=log_density,
        quantities={"density": density, "mean": mean, "variance": variance, "cdf": cdf},
        init=np.array([u0]),
        name="furseal-alpha",
    )


def u1_model(data: FurSealData, U2=U2_DEFAULT, inner_nodes=15) -> HierarchicalModel:
    """Model for ``f(U1 | data)`` conditioning on ``theta2 = alpha``.

    ``f(U1 | alpha)`` has no closed-form normalizer, so the joint is
    factored as ``g1(U1, alpha) = prod Beta(alpha_i; a(U1), b(U1))`` and
    ``g2(alpha) = prod alpha^c (1 - alpha)^(r - c) (1 - P)^(-r)``, and the
    normalizer of ``g1`` is found by nested integration.
    """
    I = data.I
    c = data.captured
    r = data.r

    def log_g1(u, alpha):
        # the Beta product depends on alpha only through sum log alpha and sum log(1 - alpha)
        u = np.asarray(u, dtype=float)
        a, b = beta_params(u[:, 0] if u.ndim == 2 else u[0], U2)
        s1, s2 = np.sum(np.log(alpha)), np.sum(np.log1p(-alpha))
        val = (a - 1.0) * s1 + (b - 1.0) * s2 - I * betaln(a, b) + _hyper_prior(U2)
        return val if u.ndim == 2 else float(val)

    def log_g1_batch(u, alphas):
        a, b = beta_params(u[..., 0], U2)
        s1 = np.sum(np.log(alphas), axis=1)[:, None]
        s2 = np.sum(np.log1p(-alphas), axis=1)[:, None]
        return (a - 1.0) * s1 + (b - 1.0) * s2 - I * betaln(a, b) + _hyper_prior(U2)

    def log_g2(alpha):
        log_p = np.sum(np.log1p(-alpha))
        return float(np.sum(xlogy(c, alpha) + xlog1py(r - c, -alpha)) - r * np.log1p(-np.exp(log_p)))

    def inner_init(alpha):
        mbar = np.clip(np.mean(alpha), 1e-6, 1 - 1e-6)
        return np.array([np.log(mbar / (1 - mbar))])

    fac = Factorization(
        log_g1=log_g1,
        log_g2=log_g2,
        inner_dim=1,
        inner_init=inner_init,
        inner_nodes=inner_nodes,
        vectorized=True,
        log_g1_batch=log_g1_batch,
    )
    model = HierarchicalModel(
        transform=tr.Transform([tr.logit()] * I),
        factorization=fac,
        init=_alpha_init(data)[0],
        name="furseal-U1",
    )
    from ..core import factored_conditional, log_nested_constant

    def density(u, alpha):
        lc = log_nested_constant(model, alpha)
        u = np.asarray(u, dtype=float)
        return np.exp(log_g1_batch(u[None, :, None], alpha[None, :])[0] - lc)

    model.quantities["density"] = density
    model.quantities["conditional"] = lambda u, alpha: factored_conditional(model, u, alpha)
    return model


# -- simulation ---------------------------------------------------------------


@dataclass(frozen=True)
class FurSealFixture:
    data: FurSealData
    N: int
    alpha: np.ndarray
    U1: float
    U2: float
    seed: int


def simulate_furseal(seed=20240601, N=100, I=7, U1=0.0, U2=U2_DEFAULT) -> FurSealFixture:
    """Simulate individual capture histories and reduce them to visit counts."""
    if N < 1 or I < 1:
        raise ValueError("N and I must be positive")
    rng = np.random.default_rng(seed)
    a, b = beta_params(U1, U2)
    alpha = rng.beta(a, b, size=I)
    history = rng.random((N, I)) < alpha
    captured = history.sum(axis=0)
    seen_before = np.zeros(N, dtype=bool)
    newly = np.zeros(I, dtype=np.int64)
    for i in range(I):
        newly[i] = np.sum(history[:, i] & ~seen_before)
        seen_before |= history[:, i]
    return FurSealFixture(FurSealData(captured, newly), N, alpha, float(U1), float(U2), seed)
