"""Mixture approximations of marginal posterior quantities.

A posterior quantity is written as an average of a conditional quantity
``h(theta1, theta2)`` over ``f(theta2 | X)``.  The average is computed with a
sparse grid mapped through a Gaussian weight fitted to the transformed
density of ``theta2``; each node contributes
``f(nu) / w(nu) * quadrature_weight`` and the contributions are standardized
to sum to one, which cancels every unknown normalizing constant.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import logsumexp

from .exceptions import BisqueError, DegenerateMixtureError, NonFiniteDensityError
from .gaussian_weight import (
    FD_STEP,
    GRAD_TOL,
    STEP_TOL,
    GaussianWeight,
    build_weight,
    find_mode,
    gradient_fd,
    hessian_fd,
    weight_from_precision,
)
from .sparse_quad import NESTED, SparseGrid, evaluate_nodes, product_rule, sparse_grid, univariate_rule
from .transform import Transform, inverse, log_jacobian_det, transformed_log_density

INNER_NODES = 15


class NegativeVarianceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Factorization:
    """Joint density split as ``g1(theta1, theta2) * g2(theta2)``.

    ``log_g1(theta1, theta2)`` receives ``theta1`` as a vector of length
    ``inner_dim``, or as a ``(K, inner_dim)`` array when ``vectorized`` is set.
    ``inner_init`` may be a constant vector or a callable of ``theta2``
    giving a starting point for the inner mode search.  The optional
    ``log_g1_batch(theta1, theta2s)`` takes ``theta1`` of shape
    ``(M, K, inner_dim)`` and ``theta2s`` of shape ``(M, p)`` and returns
    ``(M, K)``; it lets nested constants for many ``theta2`` be computed
    together (identity inner transform only).
    """

    log_g1: Callable
    log_g2: Callable
    inner_dim: int = 1
    inner_transform: Optional[Transform] = None
    inner_init: object = None
    inner_nodes: int = INNER_NODES
    vectorized: bool = False
    log_g1_batch: Optional[Callable] = None
    cache: dict = field(default_factory=dict, compare=False, repr=False)


@dataclass
class HierarchicalModel:
    """Evaluators for one BISQuE problem.

    Exactly one of ``log_density`` (``log f(theta2 | X)`` up to a constant,
    on the constrained scale) and ``factorization`` must be given.
    ``quantities`` maps names to conditional evaluators ``h``.  A
    ``log_density`` may carry a ``batch`` attribute that evaluates it on the
    rows of a ``(K, p)`` array; grids then use it in one call.
    """

    transform: Transform
    log_density: Optional[Callable] = None
    factorization: Optional[Factorization] = None
    quantities: Dict[str, Callable] = field(default_factory=dict)
    init: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if (self.log_density is None) == (self.factorization is None):
            raise ValueError("exactly one of log_density and factorization must be set")

    def _batch(self):
        return getattr(self.log_density, "batch", None)

    @property
    def dim_theta2(self):
        return self.transform.dim

    def initial_nu(self):
        if self.init is None:
            return np.zeros(self.dim_theta2)
        return self.transform.forward(np.asarray(self.init, dtype=float))

    def log_marginal_nu(self, nu):
        """``log f(nu | X)`` up to a constant, Jacobian included."""
        if self.log_density is not None:
            return float(transformed_log_density(self.log_density, self.transform, nu))
        theta2 = inverse(self.transform, nu)
        return factored_log_marginal(self, theta2) + log_jacobian_det(self.transform, nu)

    def log_marginal_nu_rows(self, nus):
        """:meth:`log_marginal_nu` on each row of ``nus``, in one call when possible."""
        batch = self._batch()
        nus = np.asarray(nus, dtype=float)
        if batch is None:
            return np.array([self.log_marginal_nu(v) for v in nus], dtype=float)
        theta2 = inverse(self.transform, nus)
        return np.asarray(batch(theta2), dtype=float) + log_jacobian_det(self.transform, nus)


# -- nested integration -----------------------------------------------------


def _inner_mode(g, start):
    """Damped Newton iterations from ``start``; falls back to a full search."""
    x = np.atleast_1d(np.asarray(start, dtype=float)).copy()
    try:
        fx = g(x)
        for _ in range(50):
            grad = gradient_fd(g, x)
            if np.linalg.norm(grad) / (1.0 + np.linalg.norm(x)) < 1e-7:
                return x
            H = hessian_fd(g, x)
            try:
                step = np.linalg.solve(-H, grad)
                if np.linalg.eigvalsh(-H).min() <= 0:
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                step = grad / (1.0 + np.abs(np.diag(H)).max())
            t = 1.0
            while t > 1e-10:
                cand = x + t * step
                fc = g(cand)
                if np.isfinite(fc) and fc >= fx:
                    x, fx = cand, fc
                    break
                t *= 0.5
            else:
                break
    except NonFiniteDensityError:
        pass
    return find_mode(g, x)


def log_nested_constant(model: HierarchicalModel, theta2, inner_nodes=None):
    """``log C1(theta2) = log int g1(theta1, theta2) d theta1``.

    The inner integrand is recentred with a Laplace approximation and
    integrated with a classical Gauss-Hermite product rule
    (``inner_nodes`` points per inner dimension).
    """
    fac = model.factorization
    if fac is None:
        raise ValueError("model has no factorization")
    theta2 = np.ascontiguousarray(theta2, dtype=float)
    key = (theta2.tobytes(), inner_nodes or fac.inner_nodes)
    if key not in fac.cache:
        fac.cache[key] = _log_nested_constant(fac, theta2, inner_nodes or fac.inner_nodes)
    return fac.cache[key]


def _stencil(q):
    # unit offsets for central-difference gradient and Hessian in q dimensions
    rows = [np.zeros(q)]
    eye = np.eye(q)
    for i in range(q):
        rows += [eye[i], -eye[i]]
    for i in range(q):
        for j in range(i):
            rows += [eye[i] + eye[j], eye[i] - eye[j], -eye[i] + eye[j], -eye[i] - eye[j]]
    return np.array(rows)


def _fd_from_stencil(vals, h, q):
    g = np.empty(q)
    H = np.empty((q, q))
    f0 = vals[0]
    for i in range(q):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        g[i] = (fp - fm) / (2.0 * h[i])
        H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
    k = 1 + 2 * q
    for i in range(q):
        for j in range(i):
            fpp, fpm, fmp, fmm = vals[k : k + 4]
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            k += 4
    return g, H


def _batched_mode(gv, x0, max_iter=60):
    """Newton search for a vectorized log density ``gv: (K, q) -> (K,)``.

    Each iteration evaluates the whole finite-difference stencil, or a
    ladder of step lengths, in one call.  Returns ``(mode, hessian)`` or
    ``None`` when the search fails so the caller can fall back.
    """
    x = np.asarray(x0, dtype=float).copy()
    q = x.size
    unit = _stencil(q)
    ladder = 0.5 ** np.arange(12)
    for _ in range(max_iter):
        h = FD_STEP * (1.0 + np.abs(x))
        vals = np.asarray(gv(x + unit * h), dtype=float)
        if not np.all(np.isfinite(vals)):
            return None
        g, H = _fd_from_stencil(vals, h, q)
        if np.linalg.norm(g) / (1.0 + np.linalg.norm(x)) < GRAD_TOL:
            return x, H
        try:
            np.linalg.cholesky(-H)
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = g / (1.0 + np.abs(np.diag(H)).max())
        if np.linalg.norm(step) < STEP_TOL * (1.0 + np.linalg.norm(x)):
            return x, H
        cand = x + ladder[:, None] * step
        cv = np.asarray(gv(cand), dtype=float)
        ok = np.isfinite(cv) & (cv >= vals[0] - 1e-11 * (1.0 + abs(vals[0])))
        if not ok.any():
            return None
        x = cand[np.argmax(ok)]
    return None


def _log_nested_constant(fac, theta2, inner_nodes):
    q = fac.inner_dim
    t1 = fac.inner_transform or Transform.identity(q)

    if fac.inner_transform is None:
        # identity inner scale: no change of variables to apply
        def g(u):
            val = fac.log_g1(u, theta2)
            return float(np.ravel(val)[0]) if np.ndim(val) else float(val)

        def gv(u):
            return np.asarray(fac.log_g1(u, theta2), dtype=float)

    else:

        def g(u):
            val = fac.log_g1(inverse(t1, u), theta2) + log_jacobian_det(t1, u)
            return float(np.ravel(val)[0]) if np.ndim(val) else float(val)

        def gv(u):
            return np.asarray(fac.log_g1(inverse(t1, u), theta2), dtype=float) + log_jacobian_det(t1, u)

    if callable(fac.inner_init):
        start = t1.forward(np.atleast_1d(fac.inner_init(theta2)))
    elif fac.inner_init is not None:
        start = t1.forward(np.atleast_1d(np.asarray(fac.inner_init, dtype=float)))
    else:
        start = np.zeros(q)
    found = _batched_mode(gv, start) if fac.vectorized else None
    if found is not None:
        inner = weight_from_precision(found[0], -found[1])
    else:
        inner = build_weight(g, None, mode=_inner_mode(g, start))
    u, w = inner.map_nodes(_inner_grid(inner_nodes, q))
    vals = gv(u) if fac.vectorized else np.array([g(row) for row in u])
    if not np.all(np.isfinite(vals)):
        bad = u[np.argmax(~np.isfinite(vals))]
        raise NonFiniteDensityError(inverse(t1, bad).tolist())
    terms = vals - inner.log_density(u) + np.log(w)
    top = terms.max()
    return float(top + np.log(np.sum(np.exp(terms - top))))


def _batched_modes(gvb, x0, max_iter=60):
    """:func:`_batched_mode` run on many problems at once.

    ``gvb(u, rows)`` evaluates problems ``rows`` at points ``u`` of shape
    ``(len(rows), K, q)``.  Returns ``(modes, hessians, found)``; problems
    whose search fails have ``found`` false.
    """
    x = np.array(x0, dtype=float)
    M, q = x.shape
    unit = _stencil(q)
    ladder = 0.5 ** np.arange(12)
    hess = np.full((M, q, q), np.nan)
    done = np.zeros(M, dtype=bool)
    failed = np.zeros(M, dtype=bool)
    for _ in range(max_iter):
        rows = np.flatnonzero(~(done | failed))
        if rows.size == 0:
            break
        xa = x[rows]
        h = FD_STEP * (1.0 + np.abs(xa))
        vals = np.asarray(gvb(xa[:, None, :] + unit[None] * h[:, None, :], rows), dtype=float)
        finite = np.all(np.isfinite(vals), axis=1)
        g, H = _fd_batch(np.where(finite[:, None], vals, 0.0), h, q)
        xnorm = 1.0 + np.linalg.norm(xa, axis=1)
        conv = finite & (np.linalg.norm(g, axis=1) / xnorm < GRAD_TOL)
        negH = -H
        posdef = np.linalg.eigvalsh(negH).min(axis=1) > 0
        eye = np.eye(q)
        safe = np.where(posdef[:, None, None], negH, eye)
        step = np.where(
            posdef[:, None],
            np.linalg.solve(safe, g[..., None])[..., 0],
            g / (1.0 + np.abs(np.diagonal(H, axis1=1, axis2=2)).max(axis=1))[:, None],
        )
        small = finite & ~conv & (np.linalg.norm(step, axis=1) < STEP_TOL * xnorm)
        stop = conv | small
        hess[rows[stop]] = H[stop]
        done[rows[stop]] = True
        failed[rows[~finite]] = True
        move = finite & ~stop
        if not move.any():
            continue
        mrows = rows[move]
        cand = xa[move][:, None, :] + ladder[None, :, None] * step[move][:, None, :]
        cv = np.asarray(gvb(cand, mrows), dtype=float)
        f0 = vals[move, :1]
        ok = np.isfinite(cv) & (cv >= f0 - 1e-11 * (1.0 + np.abs(f0)))
        anyok = ok.any(axis=1)
        failed[mrows[~anyok]] = True
        pick = np.argmax(ok, axis=1)
        x[mrows[anyok]] = cand[np.flatnonzero(anyok), pick[anyok]]
    return x, hess, done


def _fd_batch(vals, h, q):
    # row-wise version of _fd_from_stencil
    A = vals.shape[0]
    g = np.empty((A, q))
    H = np.empty((A, q, q))
    f0 = vals[:, 0]
    for i in range(q):
        fp, fm = vals[:, 1 + 2 * i], vals[:, 2 + 2 * i]
        g[:, i] = (fp - fm) / (2.0 * h[:, i])
        H[:, i, i] = (fp - 2.0 * f0 + fm) / h[:, i] ** 2
    k = 1 + 2 * q
    for i in range(q):
        for j in range(i):
            fpp, fpm, fmp, fmm = (vals[:, k + m] for m in range(4))
            H[:, i, j] = H[:, j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[:, i] * h[:, j])
            k += 4
    return g, H


def prefetch_nested_constants(model: HierarchicalModel, thetas, inner_nodes=None):
    """Fill the nested-constant cache for the rows of ``thetas`` in one pass.

    Needs ``factorization.log_g1_batch``; otherwise does nothing.  Each
    constant is the same Laplace-recentred Gauss-Hermite sum as
    :func:`log_nested_constant`.  Rows whose batched mode search fails are
    left for the one-at-a-time path.
    """
    fac = model.factorization
    if fac is None or fac.log_g1_batch is None or fac.inner_transform is not None:
        return
    n = inner_nodes or fac.inner_nodes
    thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=float)
    keys, rows = [], []
    for i, t in enumerate(thetas):
        key = (t.tobytes(), n)
        if key not in fac.cache and key not in keys:
            keys.append(key)
            rows.append(i)
    if not rows:
        return
    todo = thetas[rows]
    q = fac.inner_dim
    if callable(fac.inner_init):
        start = np.array([np.atleast_1d(fac.inner_init(t)) for t in todo], dtype=float)
    elif fac.inner_init is not None:
        start = np.tile(np.atleast_1d(np.asarray(fac.inner_init, dtype=float)), (len(rows), 1))
    else:
        start = np.zeros((len(rows), q))
    gvb = lambda u, idx: fac.log_g1_batch(u, todo[idx])
    modes, hess, found = _batched_modes(gvb, start)
    prec = -hess[found]
    ok = np.zeros(len(rows), dtype=bool)
    ok[found] = np.linalg.eigvalsh(prec).min(axis=1) > 0
    if not ok.any():
        return
    sel = np.flatnonzero(ok)
    prec = -hess[sel]
    # covariance factor from the precision Cholesky: Sigma = (C C^T)^-1
    cinv = np.linalg.inv(np.linalg.cholesky(prec))
    cov = np.swapaxes(cinv, 1, 2) @ cinv
    L = np.linalg.cholesky(0.5 * (cov + np.swapaxes(cov, 1, 2)))
    grid = _inner_grid(n, q)
    z = grid.nodes
    u = modes[sel][:, None, :] + np.einsum("kj,mij->mki", z, L)
    vals = np.asarray(fac.log_g1_batch(u, todo[sel]), dtype=float)
    # log w(u) at mapped nodes: standard-normal log density of z less log |L|
    log_w = (-0.5 * q * np.log(2.0 * np.pi) - 0.5 * np.sum(z * z, axis=1))[None, :] - np.sum(
        np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1
    )[:, None]
    terms = vals - log_w + np.log(grid.weights)[None, :]
    top = terms.max(axis=1)
    logc = top + np.log(np.sum(np.exp(terms - top[:, None]), axis=1))
    for j, v in zip(sel, logc):
        if np.isfinite(v):
            fac.cache[keys[j]] = float(v)


@lru_cache(maxsize=None)
def _inner_grid(n, q):
    return product_rule([univariate_rule("classical", n)] * q)


def nested_constant(model: HierarchicalModel, theta2, inner_nodes=None):
    return float(np.exp(log_nested_constant(model, theta2, inner_nodes)))


def factored_log_marginal(model: HierarchicalModel, theta2):
    """``log g2(theta2) + log C1(theta2)``; ``log f(X)`` is left out."""
    fac = model.factorization
    if fac is None:
        raise ValueError("model has no factorization")
    return float(fac.log_g2(np.asarray(theta2, dtype=float))) + log_nested_constant(model, theta2)


def factored_conditional(model: HierarchicalModel, theta1, theta2, log_c1=None):
    """Normalized conditional density ``g1(theta1, theta2) / C1(theta2)``."""
    fac = model.factorization
    theta2 = np.asarray(theta2, dtype=float)
    if log_c1 is None:
        log_c1 = log_nested_constant(model, theta2)
    if not np.isfinite(log_c1):
        raise BisqueError(f"nested constant is not positive at theta2={theta2.tolist()}")
    theta1 = np.asarray(theta1, dtype=float)
    if fac.vectorized:
        pts = theta1.reshape(-1, fac.inner_dim)
        vals = np.asarray(fac.log_g1(pts, theta2), dtype=float)
    else:
        pts = theta1.reshape(-1, fac.inner_dim)
        vals = np.array([float(fac.log_g1(p, theta2)) for p in pts])
    out = np.exp(vals - log_c1)
    return float(out[0]) if theta1.ndim == 0 or (theta1.ndim == 1 and fac.inner_dim > 1) else out


# -- mixture weights ----------------------------------------------------------


class NodeCache:
    """Memoizes evaluations keyed by the exact bytes of each node."""

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.calls = 0
        self._store = {}

    def evaluate(self, f, nodes, n_jobs=None):
        nodes = np.ascontiguousarray(nodes, dtype=float)
        if not self.enabled:
            self.calls += len(nodes)
            return list(evaluate_nodes(f, nodes, n_jobs=n_jobs))
        keys = [row.tobytes() for row in nodes]
        missing, seen = [], set()
        for i, k in enumerate(keys):
            if k not in self._store and k not in seen:
                missing.append(i)
                seen.add(k)
        if missing:
            vals = evaluate_nodes(f, nodes[missing], n_jobs=n_jobs)
            for i, v in zip(missing, vals):
                self._store[keys[i]] = v
            self.calls += len(missing)
        return [self._store[k] for k in keys]

    def evaluate_rows(self, f_rows, nodes):
        """Like :meth:`evaluate` with ``f_rows`` mapping all missing rows at once."""
        nodes = np.ascontiguousarray(nodes, dtype=float)
        keys = [row.tobytes() for row in nodes]
        missing, seen = [], set()
        for i, k in enumerate(keys):
            if not self.enabled or (k not in self._store and k not in seen):
                missing.append(i)
                seen.add(k)
        if not self.enabled:
            self.calls += len(nodes)
            return list(f_rows(nodes))
        if missing:
            vals = f_rows(nodes[missing])
            for i, v in zip(missing, vals):
                self._store[keys[i]] = float(v)
            self.calls += len(missing)
        return [self._store[k] for k in keys]


@dataclass(frozen=True)
class MixtureApprox:
    """Quadrature nodes of ``theta2`` with raw and standardized weights.

    ``raw_weights`` are ``f(nu) / w(nu) * quadrature_weight`` scaled by the
    positive constant that makes the ratio ``f / w`` equal to one at the
    weight mode; the scaling cancels in ``std_weights``.
    """

    level: int
    grid: SparseGrid
    weight_fn: GaussianWeight
    nodes_nu: np.ndarray
    nodes_theta2: np.ndarray
    quad_weights: np.ndarray
    log_ratios: np.ndarray
    std_weights: np.ndarray

    @property
    def size(self):
        return self.std_weights.size

    @property
    def raw_weights(self):
        return np.exp(self.log_ratios) * self.quad_weights

    def expect(self, values):
        """Weighted sum over nodes (leading axis of ``values``) in node order."""
        values = np.asarray(values, dtype=float)
        return np.tensordot(self.std_weights, values, axes=1)

    def ratio_spread(self):
        """Range of ``log(f / w)`` over nodes with non-zero quadrature weight."""
        r = self.log_ratios[self.quad_weights != 0]
        return float(r.max() - r.min())

    def diagnostics(self):
        return {
            "level": self.level,
            "nodes": int(self.size),
            "log_ratio_spread": self.ratio_spread(),
            "min_std_weight": float(self.std_weights.min()),
        }


def standardize(log_ratios, quad_weights):
    """Standardized weights from log ratios and signed quadrature weights."""
    signs = np.sign(quad_weights)
    with np.errstate(divide="ignore"):
        log_raw = log_ratios + np.log(np.abs(quad_weights))
    total, sign = logsumexp(log_raw, b=signs, return_sign=True)
    if not sign > 0:
        raise DegenerateMixtureError(
            "degenerate mixture: raw weights sum to a non-positive value "
            "(weight function grossly mismatched to the posterior)"
        )
    std = signs * np.exp(log_raw - total)
    return std / std.sum()


def bisque_weights(
    model: HierarchicalModel,
    gw: GaussianWeight,
    level: int,
    family=NESTED,
    cache: Optional[NodeCache] = None,
    n_jobs=None,
) -> MixtureApprox:
    """Build the mixture at Smolyak ``level`` for ``model`` and weight ``gw``."""
    p = model.dim_theta2
    if gw.dim != p:
        raise ValueError(f"weight dimension {gw.dim} does not match model dimension {p}")
    grid = sparse_grid(p, level, family)
    nodes_nu, qw = gw.map_nodes(grid)
    cache = cache if cache is not None else NodeCache()
    if model.factorization is not None:
        prefetch_nested_constants(model, inverse(model.transform, nodes_nu))
    if model._batch() is not None:
        logf = np.array(cache.evaluate_rows(model.log_marginal_nu_rows, nodes_nu), dtype=float)
    else:
        logf = np.array(cache.evaluate(model.log_marginal_nu, nodes_nu, n_jobs=n_jobs), dtype=float)
    bad = ~np.isfinite(logf)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteDensityError(inverse(model.transform, nodes_nu[i]).tolist(), logf[i])
    offset = model.log_marginal_nu(gw.mode) - gw.log_norm_const
    log_ratios = logf - gw.log_density(nodes_nu) - offset
    std = standardize(log_ratios, qw)
    return MixtureApprox(
        level=level,
        grid=grid,
        weight_fn=gw,
        nodes_nu=nodes_nu,
        nodes_theta2=inverse(model.transform, nodes_nu),
        quad_weights=np.asarray(qw),
        log_ratios=log_ratios,
        std_weights=std,
    )


# -- posterior quantities -----------------------------------------------------


@dataclass(frozen=True)
class DensityCurve:
    points: np.ndarray
    density: np.ndarray
    n_clipped: int = 0

    def to_csv(self, target=None, header=("theta1", "density")):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for x, y in zip(np.ravel(self.points), np.ravel(self.density)):
            writer.writerow([format(float(x), ".17g"), format(float(y), ".17g")])
        text = buf.getvalue()
        if target is None:
            return text
        with open(target, "w", newline="") as fh:
            fh.write(text)
        return None

    def integral(self):
        return float(np.trapezoid(self.density, self.points))


def _node_values(mix, h):
    return np.array([np.asarray(h(theta2), dtype=float) for theta2 in mix.nodes_theta2])


def clip_density(values):
    values = np.asarray(values, dtype=float)
    neg = values < 0
    return np.where(neg, 0.0, values), int(neg.sum())


def marginal_density(mix: MixtureApprox, cond_density: Callable, eval_points) -> DensityCurve:
    """Mixture of conditional densities ``cond_density(points, theta2)``.

    Negative values (possible with negative weights) are clipped to zero and
    counted in ``n_clipped``.
    """
    pts = np.asarray(eval_points, dtype=float)
    vals = mix.expect(_node_values(mix, lambda th: cond_density(pts, th)))
    dens, n = clip_density(vals)
    return DensityCurve(pts, dens, n)


def posterior_expectation(mix: MixtureApprox, cond_mean: Callable):
    """``sum_l cond_mean(theta2_l) * std_weight_l`` (scalar or array)."""
    out = mix.expect(_node_values(mix, cond_mean))
    return float(out) if np.ndim(out) == 0 else out


def total_variance(mix: MixtureApprox, means, variances, marg_mean):
    """Law of total variance from per-node conditional means and variances."""
    means = np.asarray(means, dtype=float)
    h = np.asarray(variances, dtype=float) + (means - marg_mean) ** 2
    out = mix.expect(h)
    if np.any(out < 0):
        warnings.warn(
            f"negative posterior variance {np.min(out):.3g} from signed quadrature weights",
            NegativeVarianceWarning,
            stacklevel=3,
        )
    return float(out) if np.ndim(out) == 0 else out


def posterior_variance(mix: MixtureApprox, cond_mean: Callable, cond_var: Callable, marg_mean):
    """Posterior variance via the law of total variance.

    ``marg_mean`` must come from :func:`posterior_expectation` first.
    Negative results are returned as-is with a :class:`NegativeVarianceWarning`.
    """
    return total_variance(mix, _node_values(mix, cond_mean), _node_values(mix, cond_var), marg_mean)


def interval_probability(mix: MixtureApprox, cond_cdf: Callable, lower, upper):
    """Posterior mass of ``(lower, upper)`` from conditional CDFs ``cond_cdf(bound, theta2)``."""
    lower, upper = float(lower), float(upper)
    if not lower < upper:
        raise ValueError("interval needs lower < upper")

    def h(theta2):
        hi = 1.0 if upper == np.inf else cond_cdf(upper, theta2)
        lo = 0.0 if lower == -np.inf else cond_cdf(lower, theta2)
        return np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)

    out = mix.expect(_node_values(mix, h))
    return float(out) if np.ndim(out) == 0 else out


def default_eval_points(center, scale, n=201, width=6.0):
    """Equispaced points spanning ``center +/- width * scale``."""
    return np.linspace(center - width * scale, center + width * scale, n)


# -- direct marginalization ---------------------------------------------------


def _insert(value, rest, index):
    rest = np.atleast_2d(rest)
    col = np.full((rest.shape[0], 1), value)
    return np.hstack([rest[:, :index], col, rest[:, index:]])


def direct_marginal(
    joint_log_density: Callable,
    eval_points,
    index=0,
    level=None,
    family=NESTED,
    strategy="shared",
    weight: Optional[GaussianWeight] = None,
    init=None,
    node_map="cholesky",
    n_jobs=None,
) -> DensityCurve:
    """Marginal density of coordinate ``index`` by sparse-grid integration of the rest.

    ``joint_log_density`` takes the full vector (the evaluated coordinate at
    position ``index``).  With ``strategy="shared"`` a single joint Gaussian
    weight is fitted and sliced at each evaluation point (its conditional
    distribution is the weight for the remaining coordinates); with
    ``"per-point"`` a new weight (with node placement ``node_map``) is fitted
    at every evaluation point, warm-started from the previous slice mode.  The
    returned curve is normalized to integrate to one over ``eval_points``.
    """
    pts = np.asarray(eval_points, dtype=float)
    if strategy not in ("shared", "per-point"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if weight is None:
        if init is None:
            raise ValueError("need either a joint weight or an initial point")
        weight = build_weight(joint_log_density, init)
    p = weight.dim
    if level is None:
        level = (p - 1) + 4
    grid = sparse_grid(p - 1, level, family)
    signs = np.sign(grid.weights)
    with np.errstate(divide="ignore"):
        log_abs_w = np.log(np.abs(grid.weights))
    log_vals = np.empty(pts.size)
    rest_init = np.delete(weight.mode, index)
    for k, v in enumerate(pts):
        if strategy == "shared":
            cw = weight.conditional(index, v)
        else:

            def slice_density(r, v=v):
                return joint_log_density(_insert(v, r, index)[0])

            cw = build_weight(slice_density, rest_init, node_map=node_map)
            rest_init = cw.mode
        nodes, _ = cw.map_nodes(grid)
        full = _insert(v, nodes, index)
        lj = evaluate_nodes(joint_log_density, full, n_jobs=n_jobs)
        if not np.all(np.isfinite(lj)):
            lj = np.where(np.isfinite(lj), lj, -np.inf)
        total, sign = logsumexp(lj - cw.log_density(nodes) + log_abs_w, b=signs, return_sign=True)
        log_vals[k] = total if sign > 0 else -np.inf
    finite = np.isfinite(log_vals)
    n_clipped = int((~finite).sum())
    if not finite.any():
        raise DegenerateMixtureError("direct marginal is non-positive at every evaluation point")
    dens = np.exp(log_vals - log_vals[finite].max())
    area = np.trapezoid(dens, pts) if pts.size > 1 else 1.0
    return DensityCurve(pts, dens / area, n_clipped)


# -- level escalation ---------------------------------------------------------


class BisqueJob:
    """A posterior quantity evaluated at increasing Smolyak levels.

    ``node_fn(theta2)`` returns the conditional quantity at one node and
    ``reducer(mixture, node_values)`` turns node values into the result
    (the standardized weighted sum by default).  With ``reuse`` the model
    log density and ``node_fn`` are cached per node, so nested grids only
    evaluate new nodes when the level increases.
    """

    def __init__(self, model, weight, node_fn, reducer=None, family=NESTED, reuse=True, n_jobs=None):
        self.model = model
        self.weight = weight
        self.node_fn = node_fn
        self.reducer = reducer
        self.family = family
        self.n_jobs = n_jobs
        self.density_cache = NodeCache(enabled=reuse)
        self.quantity_cache = NodeCache(enabled=reuse)

    @property
    def calls(self):
        return self.density_cache.calls + self.quantity_cache.calls

    def evaluate(self, level):
        mix = bisque_weights(self.model, self.weight, level, self.family, cache=self.density_cache, n_jobs=self.n_jobs)
        theta2 = mix.nodes_theta2
        node_fn = self.node_fn
        # cache keys use nu-nodes, values are computed on theta2
        lookup = {row.tobytes(): th for row, th in zip(np.ascontiguousarray(mix.nodes_nu), theta2)}
        vals = self.quantity_cache.evaluate(lambda nu: node_fn(lookup[np.ascontiguousarray(nu).tobytes()]), mix.nodes_nu)
        vals = np.array(vals, dtype=float)
        value = self.reducer(mix, vals) if self.reducer is not None else mix.expect(vals)
        return value, mix


@dataclass
class ConvergenceResult:
    value: object
    level: int
    converged: bool
    changes: list
    calls: int
    mixture: Optional[MixtureApprox] = None
    levels: list = field(default_factory=list)

    def report(self):
        return {
            "level": self.level,
            "converged": self.converged,
            "changes": [float(c) for c in self.changes],
            "levels": list(self.levels),
            "evaluator_calls": self.calls,
        }


def change_metric(new, old, metric="auto"):
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    diff = np.abs(new - old)
    if metric == "auto":
        metric = "sup" if new.size > 1 else "mixed"
    if metric == "sup":
        return float(diff.max())
    # mixed absolute/relative: |change| / (1 + |value|), worst case over entries
    return float((diff / (1.0 + np.abs(new))).max())


def converge(job: BisqueJob, q_start, q_max, tol, metric="auto") -> ConvergenceResult:
    """Raise the level until consecutive results change by less than ``tol``.

    ``metric="sup"`` compares curves in sup-norm; ``"mixed"`` uses
    ``|change| / (1 + |value|)``; ``"auto"`` picks sup-norm for arrays and
    the mixed rule for scalars.  Levels whose grid reproduces the
    previous grid exactly are skipped, since they cannot change the result.
    """
    p = job.model.dim_theta2
    if q_start < p:
        raise ValueError(f"q_start must be >= {p}")
    value, mix = job.evaluate(q_start)
    changes, levels = [], [q_start]
    level = q_start
    while level < q_max:
        level += 1
        new_value, new_mix = job.evaluate(level)
        if new_mix.grid.size == mix.grid.size and np.array_equal(new_mix.grid.weights, mix.grid.weights):
            mix, value = new_mix, new_value
            continue
        change = change_metric(new_value, value, metric)
        changes.append(change)
        levels.append(level)
        value, mix = new_value, new_mix
        if change < tol:
            return ConvergenceResult(value, level, True, changes, job.calls, mix, levels)
    return ConvergenceResult(value, level, False, changes, job.calls, mix, levels)
