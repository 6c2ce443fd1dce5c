"""Gaussian weight functions built at the mode of a (transformed) log density."""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg, optimize

from .exceptions import ModeNotFoundError, NonFiniteDensityError, WeightConstructionError
from .sparse_quad import SparseGrid

FD_STEP = 1e-4
GRAD_TOL = 1e-6
STEP_TOL = 1e-7
JITTERS = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
_LOG_2PI = np.log(2.0 * np.pi)


def _steps(point, scale=FD_STEP):
    return scale * (1.0 + np.abs(point))


def _checked(log_density, x):
    val = float(log_density(x))
    if not np.isfinite(val):
        raise NonFiniteDensityError(np.array(x, dtype=float).tolist(), val)
    return val


def gradient_fd(log_density: Callable, point, step_scale=FD_STEP):
    """Central-difference gradient with steps ``step_scale * (1 + |x_j|)``."""
    x = np.asarray(point, dtype=float)
    h = _steps(x, step_scale)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        g[j] = (_checked(log_density, x + e) - _checked(log_density, x - e)) / (2.0 * h[j])
    return g


def hessian_fd(log_density: Callable, point, step_scale=FD_STEP):
    """Central-difference Hessian, symmetrized as ``(H + H.T) / 2``."""
    x = np.asarray(point, dtype=float).ravel()
    p = x.size
    h = _steps(x, step_scale)
    f0 = _checked(log_density, x)
    H = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        fp = _checked(log_density, x + ei)
        fm = _checked(log_density, x - ei)
        H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            fpp = _checked(log_density, x + ei + ej)
            fpm = _checked(log_density, x + ei - ej)
            fmp = _checked(log_density, x - ei + ej)
            fmm = _checked(log_density, x - ei - ej)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def _scaled_grad_norm(log_density, x):
    return np.linalg.norm(gradient_fd(log_density, x)) / (1.0 + np.linalg.norm(x))


def _newton(log_density, x, tol, iters):
    """Damped Newton ascent; returns ``(x, converged)``."""

    def objective(z):
        v = log_density(z)
        return -v if np.isfinite(v) else np.inf

    best = objective(x)
    for _ in range(iters):
        try:
            g = gradient_fd(log_density, x)
        except NonFiniteDensityError:
            return x, False
        if np.linalg.norm(g) / (1.0 + np.linalg.norm(x)) < tol:
            return x, True
        try:
            H = hessian_fd(log_density, x)
        except NonFiniteDensityError:
            return x, False
        # outside the concave region use |eigenvalues| so the step still ascends
        vals, vecs = np.linalg.eigh(-H)
        if not np.all(np.isfinite(vals)):
            return x, False
        vals = np.maximum(np.abs(vals), 1e-8 * max(np.abs(vals).max(), 1.0))
        step = vecs @ ((vecs.T @ g) / vals)
        # gradient noise floor reached: the Newton correction is negligible
        if np.linalg.norm(step) < STEP_TOL * (1.0 + np.linalg.norm(x)):
            return x, True
        t = 1.0
        # allow for rounding noise in the log density when comparing values
        slack = 1e-11 * (1.0 + abs(best))
        while t > 1e-8:
            cand = x + t * step
            val = objective(cand)
            if val <= best + slack:
                x, best = cand, min(val, best)
                break
            t *= 0.5
        else:
            return x, False
    try:
        return x, _scaled_grad_norm(log_density, x) < tol
    except NonFiniteDensityError:
        return x, False


def find_mode(log_density: Callable, init, max_iter=2000, tol=GRAD_TOL):
    """Maximize ``log_density`` starting from ``init``.

    A few damped Newton steps (finite-difference Hessian) are tried first,
    which suffices for warm starts.  Otherwise Nelder-Mead, then BFGS on
    finite-difference gradients, then Newton again.  The returned point has
    ``|grad| / (1 + |x|) < tol``, or a Newton correction below
    ``1e-7 * (1 + |x|)`` when finite-difference noise keeps the gradient
    above ``tol`` (large log-density magnitudes).
    """
    x0 = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    _checked(log_density, x0)
    x, ok = _newton(log_density, x0, tol, 10)
    if ok:
        return x

    def objective(z):
        v = log_density(z)
        return -v if np.isfinite(v) else np.inf

    def neg_grad(z):
        try:
            return -gradient_fd(log_density, z)
        except NonFiniteDensityError:
            return np.full_like(z, np.nan)

    if objective(x) > objective(x0):
        x = x0
    res = optimize.minimize(
        objective,
        x,
        method="Nelder-Mead",
        options={"xatol": 1e-8, "fatol": 1e-8, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    if np.isfinite(res.fun) and res.fun <= objective(x):
        x = res.x
    res = optimize.minimize(objective, x, jac=neg_grad, method="BFGS", options={"gtol": 1e-8, "maxiter": max_iter})
    if np.isfinite(res.fun) and res.fun <= objective(x):
        x = res.x
    x, ok = _newton(log_density, x, tol, 25)
    if ok:
        return x
    gnorm = _scaled_grad_norm(log_density, x)
    if gnorm < tol:
        return x
    raise ModeNotFoundError(
        f"mode search did not converge (scaled gradient norm {gnorm:.3g})", best_point=x, grad_norm=gnorm
    )


NODE_MAPS = ("cholesky", "principal")


@dataclass(frozen=True)
class GaussianWeight:
    """Multivariate normal ``N(mode, L L^T)`` used as the quadrature weight.

    ``cov_factor`` is the lower-triangular Cholesky factor.  ``node_map``
    selects the square root used to place standard-normal nodes:
    ``"cholesky"`` maps ``z -> mode + L z``; ``"principal"`` maps along the
    covariance eigenvectors (largest variance first), which keeps a sparse
    grid aligned with dominant directions of strongly correlated posteriors.
    Both integrate against the same Gaussian.
    """

    mode: np.ndarray
    cov_factor: np.ndarray
    node_map: str = "cholesky"

    def __post_init__(self):
        mode = np.atleast_1d(np.asarray(self.mode, dtype=float)).copy()
        L = np.atleast_2d(np.asarray(self.cov_factor, dtype=float)).copy()
        if L.shape != (mode.size, mode.size):
            raise ValueError("cov_factor must be p x p")
        if not np.all(np.diag(L) > 0):
            raise ValueError("cov_factor needs a strictly positive diagonal")
        if self.node_map not in NODE_MAPS:
            raise ValueError(f"node_map must be one of {NODE_MAPS}")
        if self.node_map == "principal":
            vals, vecs = np.linalg.eigh(L @ L.T)
            order = np.argsort(vals)[::-1]
            vals, vecs = vals[order], vecs[:, order]
            # deterministic orientation: largest-magnitude entry of each axis positive
            flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
            axes = vecs * flip * np.sqrt(np.maximum(vals, 0.0))
        else:
            axes = L
        mode.setflags(write=False)
        L.setflags(write=False)
        axes = np.array(axes)
        axes.setflags(write=False)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "cov_factor", L)
        object.__setattr__(self, "_axes", axes)

    @property
    def axes(self):
        """Matrix ``A`` with ``A A^T = covariance`` used by :func:`map_nodes`."""
        return self._axes

    @property
    def dim(self):
        return self.mode.size

    @property
    def covariance(self):
        return self.cov_factor @ self.cov_factor.T

    @property
    def log_norm_const(self):
        return -0.5 * self.dim * _LOG_2PI - float(np.sum(np.log(np.diag(self.cov_factor))))

    def log_density(self, nu):
        return weight_log_density(self, nu)

    def map_nodes(self, grid):
        return map_nodes(self, grid)

    def conditional(self, index, value):
        """Weight over the remaining coordinates given coordinate ``index``."""
        S = self.covariance
        rest = [j for j in range(self.dim) if j != index]
        s_jj = S[index, index]
        s_rj = S[rest, index]
        mean = self.mode[rest] + s_rj / s_jj * (value - self.mode[index])
        cov = S[np.ix_(rest, rest)] - np.outer(s_rj, s_rj) / s_jj
        return GaussianWeight(mean, linalg.cholesky(cov, lower=True), self.node_map)

    def with_node_map(self, node_map):
        return GaussianWeight(self.mode, self.cov_factor, node_map)

    def to_dict(self):
        return {"mode": self.mode.tolist(), "covariance": self.covariance.tolist(), "node_map": self.node_map}


def weight_log_density(gw: GaussianWeight, nu):
    """Exact normal log density via the triangular factor; vectorized over rows."""
    nu = np.asarray(nu, dtype=float)
    diff = np.atleast_2d(nu - gw.mode)
    z = linalg.solve_triangular(gw.cov_factor, diff.T, lower=True)
    out = gw.log_norm_const - 0.5 * np.sum(z * z, axis=0)
    return float(out[0]) if nu.ndim <= 1 else out


def map_nodes(gw: GaussianWeight, grid: SparseGrid):
    """Affine map ``nu = mode + A z`` of standard-normal nodes; weights unchanged.

    ``A`` is the Cholesky factor unless the weight uses principal axes.
    """
    if grid.dim != gw.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match weight dimension {gw.dim}")
    nodes = gw.mode + grid.nodes @ gw.axes.T
    return nodes, grid.weights


def build_weight(log_density: Callable, init, mode=None, node_map="cholesky") -> GaussianWeight:
    """Gaussian approximation at the mode of ``log_density``.

    The covariance is the inverse negative Hessian.  When the negative
    Hessian is not positive definite, ``eps * I`` is added with ``eps``
    escalating from 1e-8 to 1e-2 before giving up.
    """
    if mode is None:
        mode = find_mode(log_density, init)
    mode = np.atleast_1d(np.asarray(mode, dtype=float))
    return weight_from_precision(mode, -hessian_fd(log_density, mode), node_map)


def weight_from_precision(mode, precision, node_map="cholesky") -> GaussianWeight:
    """Gaussian weight with covariance ``precision^-1`` (jitter-escalated)."""
    mode = np.atleast_1d(np.asarray(mode, dtype=float))
    precision = np.atleast_2d(np.asarray(precision, dtype=float))
    eye = np.eye(mode.size)
    for eps in (0.0,) + JITTERS:
        try:
            chol = linalg.cholesky(precision + eps * eye, lower=True)
        except linalg.LinAlgError:
            continue
        # covariance factor from the precision Cholesky: Sigma = (C C^T)^-1
        cinv = linalg.solve_triangular(chol, eye, lower=True)
        cov = cinv.T @ cinv
        return GaussianWeight(mode, linalg.cholesky(0.5 * (cov + cov.T), lower=True), node_map)
    eig = np.linalg.eigvalsh(precision)
    raise WeightConstructionError(
        f"weight construction failed: negative Hessian not positive definite "
        f"(eigenvalues {np.array2string(eig, precision=4)}) even with jitter {JITTERS[-1]}",
        eigenvalues=eig,
    )
