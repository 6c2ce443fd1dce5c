"""Coordinate-wise monotone maps between a constrained parameter space and R^p.

Every coordinate has its own kind:

========  ===========================================  =====================
kind      forward ``nu = T(theta)``                    domain
========  ===========================================  =====================
identity  ``theta``                                     R
log       ``log(theta - lower)``                        ``theta > lower``
logit     ``log((theta - lower) / (upper - theta))``    ``lower < theta < upper``
affine    ``(theta - shift) / scale``                   R
========  ===========================================  =====================

The Jacobian of the inverse map is diagonal, so its log-determinant is a sum
of univariate terms.  Inverse maps saturate instead of overflowing: the
``log`` kind is finite for ``nu <= 700`` and the ``logit`` kind returns the
nearest interval end once ``|nu|`` exceeds roughly 37.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import TransformDomainError

KINDS = ("identity", "log", "logit", "affine")


@dataclass(frozen=True)
class CoordinateTransform:
    kind: str = "identity"
    lower: float = 0.0
    upper: float = 1.0
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "logit" and not self.lower < self.upper:
            raise ValueError("logit transform needs lower < upper")
        if self.kind == "affine" and not self.scale > 0:
            raise ValueError("affine transform needs a positive scale (maps must be increasing)")

    def to_dict(self):
        return {
            "kind": self.kind,
            "lower": self.lower,
            "upper": self.upper,
            "shift": self.shift,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        kind = record.pop("kind", "identity")
        defaults = {"lower": 0.0, "upper": 1.0, "shift": 0.0, "scale": 1.0}
        unknown = set(record) - set(defaults)
        if unknown:
            raise ValueError(f"unknown transform fields {sorted(unknown)}")
        defaults.update({k: float(v) for k, v in record.items() if v is not None})
        return cls(kind=kind, **defaults)


def identity():
    return CoordinateTransform("identity")


def log(lower=0.0):
    return CoordinateTransform("log", lower=float(lower))


def logit(lower=0.0, upper=1.0):
    return CoordinateTransform("logit", lower=float(lower), upper=float(upper))


def affine(shift=0.0, scale=1.0):
    return CoordinateTransform("affine", shift=float(shift), scale=float(scale))


@dataclass(frozen=True)
class Transform:
    """Product of :class:`CoordinateTransform` objects, one per coordinate."""

    coords: tuple

    def __init__(self, coords: Sequence[CoordinateTransform]):
        coords = tuple(coords)
        if not coords:
            raise ValueError("a transform needs at least one coordinate")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "_plan", _Plan(coords))

    @property
    def dim(self):
        return len(self.coords)

    @classmethod
    def identity(cls, dim):
        return cls([identity()] * dim)

    def to_list(self):
        return [c.to_dict() for c in self.coords]

    @classmethod
    def from_list(cls, records):
        return cls([CoordinateTransform.from_dict(r) for r in records])

    def forward(self, theta):
        return forward(self, theta)

    def inverse(self, nu):
        return inverse(self, nu)

    def log_jacobian_det(self, nu):
        return log_jacobian_det(self, nu)


def _as_vector(x, dim, name):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,):
        raise ValueError(f"{name} must have trailing dimension {dim}, got shape {x.shape}")
    return x


class _Plan:
    # coordinate indices and bounds grouped by kind, so maps run as array operations
    def __init__(self, coords):
        idx = {k: np.array([j for j, c in enumerate(coords) if c.kind == k], dtype=int) for k in KINDS}
        self.idx = idx
        self.log_lower = np.array([coords[j].lower for j in idx["log"]])
        self.logit_lower = np.array([coords[j].lower for j in idx["logit"]])
        self.logit_upper = np.array([coords[j].upper for j in idx["logit"]])
        self.logit_width = self.logit_upper - self.logit_lower
        self.shift = np.array([coords[j].shift for j in idx["affine"]])
        self.scale = np.array([coords[j].scale for j in idx["affine"]])
        # constant part of the log-Jacobian
        self.log_const = float(np.sum(np.log(self.logit_width)) + np.sum(np.log(self.scale)))


def _domain_error(bad, idx, x, message):
    # first offending coordinate, reported by its position in the full vector
    k = int(np.argmax(np.any(bad.reshape(-1, bad.shape[-1]), axis=0)))
    raise TransformDomainError(int(idx[k]), x[..., k], message(k))


def forward(t: Transform, theta):
    """Map ``theta`` (interior of the domain) to ``nu`` in R^p."""
    theta = _as_vector(theta, t.dim, "theta")
    plan = t._plan
    out = theta.copy()
    i = plan.idx["affine"]
    if i.size:
        out[..., i] = (theta[..., i] - plan.shift) / plan.scale
    i = plan.idx["log"]
    if i.size:
        x = theta[..., i]
        bad = ~(x > plan.log_lower)
        if bad.any():
            _domain_error(bad, i, x, lambda k: f"log transform needs theta > {plan.log_lower[k]}")
        out[..., i] = np.log(x - plan.log_lower)
    i = plan.idx["logit"]
    if i.size:
        x = theta[..., i]
        bad = ~((x > plan.logit_lower) & (x < plan.logit_upper))
        if bad.any():
            _domain_error(
                bad, i, x, lambda k: f"logit transform needs {plan.logit_lower[k]} < theta < {plan.logit_upper[k]}"
            )
        out[..., i] = np.log(x - plan.logit_lower) - np.log(plan.logit_upper - x)
    return out


def inverse(t: Transform, nu):
    """Map ``nu`` back to the constrained space (saturating, never non-finite)."""
    nu = _as_vector(nu, t.dim, "nu")
    plan = t._plan
    out = nu.copy()
    i = plan.idx["affine"]
    if i.size:
        out[..., i] = plan.shift + plan.scale * nu[..., i]
    i = plan.idx["log"]
    if i.size:
        out[..., i] = plan.log_lower + np.exp(np.minimum(nu[..., i], 700.0))
    i = plan.idx["logit"]
    if i.size:
        out[..., i] = plan.logit_lower + plan.logit_width * expit(nu[..., i])
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def log_jacobian_det(t: Transform, nu):
    """``log |d theta / d nu|`` of the inverse map, summed over coordinates."""
    nu = _as_vector(nu, t.dim, "nu")
    plan = t._plan
    total = np.full(nu.shape[:-1], plan.log_const)
    i = plan.idx["log"]
    if i.size:
        total = total + np.sum(np.minimum(nu[..., i], 700.0), axis=-1)
    i = plan.idx["logit"]
    if i.size:
        # log sigma(v) + log(1 - sigma(v)) = -softplus(-v) - softplus(v)
        v = nu[..., i]
        total = total - np.sum(_softplus(-v) + _softplus(v), axis=-1)
    return total if total.ndim else float(total)


def transformed_log_density(logf: Callable, t: Transform, nu) -> float:
    """Log density of ``nu = T(theta)`` given the log density ``logf`` of ``theta``."""
    return logf(inverse(t, nu)) + log_jacobian_det(t, nu)
