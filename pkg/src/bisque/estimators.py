"""scikit-learn style wrapper for Bayesian kriging with BISQuE mixtures."""

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .core import bisque_weights, total_variance
from .gaussian_weight import build_weight
from .models.spatial import PAPER_PRIORS, SpatialConfig, kriging_conditional, spatial_model
from .sparse_quad import CLASSICAL, NESTED


class BisqueKriging(RegressorMixin, BaseEstimator):
    """Posterior predictive kriging of a zero-mean Matern Gaussian process.

    ``fit`` places the Gaussian weight at the posterior mode of the
    transformed covariance parameters ``(log sigma2, logit rho, logit nu)``
    and computes standardized mixture weights at Smolyak ``level``.
    ``predict`` averages the conditional kriging means (and, with
    ``return_std``, combines conditional variances by the law of total
    variance) over the mixture nodes.

    Parameters
    ----------
    priors : tuple
        ``(a, b, L0, U0, L1, U1)``: inverse-gamma shape and scale for
        ``sigma2`` and uniform bounds for ``rho`` and ``nu``.
    level : int
        Smolyak level of the conditioning grid (at least 3).
    family : {"nested", "classical"}
    node_map : {"principal", "cholesky"}
    """

    def __init__(self, priors=PAPER_PRIORS, level=8, family="nested", node_map="principal"):
        self.priors = priors
        self.level = level
        self.family = family
        self.node_map = node_map

    def fit(self, X, y):
        X, y = validate_data(self, X, y, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError("X must hold two spatial coordinates per row")
        if self.level < 3:
            raise ValueError("level must be at least 3 (three covariance parameters)")
        config = SpatialConfig(X, y, np.zeros((0, 2)), tuple(self.priors))
        model = spatial_model(config)
        family = NESTED if self.family == "nested" else CLASSICAL
        self.weight_ = build_weight(model.log_marginal_nu, model.initial_nu(), node_map=self.node_map)
        self.mixture_ = bisque_weights(model, self.weight_, self.level, family)
        self.config_ = config
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "mixture_")
        X = validate_data(self, X, reset=False)
        cfg = SpatialConfig(self.config_.locations, self.config_.responses, X, self.config_.priors)
        means, variances = [], []
        for theta in self.mixture_.nodes_theta2:
            res = kriging_conditional(cfg, *theta, full_cov=False)
            means.append(res.mean)
            variances.append(res.var)
        means, variances = np.array(means), np.array(variances)
        mean = self.mixture_.expect(means)
        if not return_std:
            return mean
        var = total_variance(self.mixture_, means, variances, mean)
        return mean, np.sqrt(np.clip(var, 0.0, None))

    def predict_interval_proba(self, X, cutpoints=(-0.5, 0.5)):
        """Posterior mass of each interval between consecutive ``cutpoints`` (with the infinite ends)."""
        check_is_fitted(self, "mixture_")
        X = validate_data(self, X, reset=False)
        cfg = SpatialConfig(self.config_.locations, self.config_.responses, X, self.config_.priors)
        cuts = np.concatenate([[-np.inf], np.sort(np.asarray(cutpoints, dtype=float)), [np.inf]])
        vals = []
        for theta in self.mixture_.nodes_theta2:
            res = kriging_conditional(cfg, *theta, full_cov=False)
            cdf = stats.norm.cdf(cuts[:, None], res.mean, np.sqrt(res.var))
            vals.append(np.diff(cdf, axis=0).T)
        return self.mixture_.expect(np.array(vals))
