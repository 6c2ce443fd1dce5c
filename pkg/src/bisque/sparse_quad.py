"""Univariate, product and Smolyak sparse-grid quadrature against N(0, I).

All rules absorb the standard normal density into their weights, so
``integrate(grid, f)`` approximates ``E[f(Z)]`` with ``Z ~ N(0, I_d)`` and the
weights of every rule sum to one.

Level schedule
--------------
* ``gauss-hermite-classical``: level ``i`` is the ``i``-point Gauss-Hermite
  rule (degree ``2 i - 1``), computed with the Golub-Welsch eigenvalue
  method.  Available at any level.
* ``gauss-hermite-nested``: level 1 is the midpoint rule and level ``i >= 2``
  is the smallest Genz-Keister rule of degree at least ``2 i + 1``.  Node
  counts per level are 1, 3, 9 (levels 3-7), 19 (levels 8-14) and 35
  (levels 15-25).  Level 25 is the last one.  Skipping the repeated 3-point
  level keeps every Smolyak level strictly sparser than the matching
  product rule and buys one extra order of accuracy per level.

With either schedule the Smolyak rule ``A(q, d)`` is exact for every
polynomial of total degree ``<= 2 (q - d) + 1``.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from ._gk_table import RULES as _GK_RULES
from .exceptions import IntegrationError, TableExhaustedError

NESTED = "gauss-hermite-nested"
CLASSICAL = "gauss-hermite-classical"
FAMILIES = (NESTED, CLASSICAL)
_ALIASES = {"nested": NESTED, "classical": CLASSICAL, NESTED: NESTED, CLASSICAL: CLASSICAL}

DEDUP_TOL = 1e-12
DROP_TOL = 1e-14
# degree of the 35-point rule is 51 = 2 * 25 + 1
MAX_NESTED_LEVEL = 25


def canonical_family(family):
    try:
        return _ALIASES[family]
    except (KeyError, TypeError):
        raise ValueError(f"unsupported rule family {family!r}; expected one of {FAMILIES}") from None


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Rule1D:
    """Univariate rule: ``k = len(nodes)`` nodes and weights at a given level."""

    level: int
    nodes: np.ndarray
    weights: np.ndarray
    family: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes))
        object.__setattr__(self, "weights", _frozen(self.weights))
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1 or self.nodes.size < 1:
            raise ValueError("nodes and weights must be non-empty 1-D arrays of equal length")

    @property
    def size(self):
        return self.nodes.size

    @property
    def degree(self):
        """Highest polynomial degree integrated exactly."""
        if self.family == CLASSICAL:
            return 2 * self.size - 1
        for nodes, _, degree in _GK_RULES:
            if nodes.size == self.size:
                return degree
        raise AssertionError("unknown nested rule")


@dataclass(frozen=True)
class MultiIndex:
    components: tuple

    def __post_init__(self):
        comps = tuple(int(c) for c in self.components)
        if not comps or min(comps) < 1:
            raise ValueError("multi-index components must be positive integers")
        object.__setattr__(self, "components", comps)

    @property
    def norm(self):
        return sum(self.components)

    def __len__(self):
        return len(self.components)


@dataclass(frozen=True)
class SparseGrid:
    """Aggregated nodes and (possibly negative) weights of a d-dimensional rule.

    ``level`` is ``None`` for plain product rules.  ``indices`` lists the
    contributing ``(MultiIndex, coefficient)`` pairs.
    """

    dim: int
    level: Optional[int]
    family: str
    nodes: np.ndarray
    weights: np.ndarray
    indices: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(np.reshape(self.nodes, (-1, self.dim))))
        object.__setattr__(self, "weights", _frozen(self.weights))
        if self.nodes.shape[0] != self.weights.shape[0]:
            raise ValueError("node and weight counts differ")

    def __len__(self):
        return self.weights.shape[0]

    @property
    def size(self):
        return len(self)


class Refinement(NamedTuple):
    grid: SparseGrid
    is_new: np.ndarray


@lru_cache(maxsize=None)
def _classical_rule(k):
    if k == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1.0, k))
    x, vecs = eigh_tridiagonal(np.zeros(k), off)
    w = vecs[0, :] ** 2
    # enforce exact symmetry; the eigensolver leaves ~1e-16 asymmetry
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    if k % 2:
        x[k // 2] = 0.0
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _nested_index(level):
    needed = 1 if level == 1 else 2 * level + 1
    for j, (_, _, degree) in enumerate(_GK_RULES):
        if degree >= needed:
            return j
    raise TableExhaustedError(level, MAX_NESTED_LEVEL)


def univariate_rule(family, level):
    """Univariate rule of ``family`` at ``level`` (>= 1)."""
    family = canonical_family(family)
    level = int(level)
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if family == CLASSICAL:
        x, w = _classical_rule(level)
    else:
        x, w, _ = _GK_RULES[_nested_index(level)]
    return Rule1D(level=level, nodes=x, weights=w, family=family)


def product_rule(rules: Sequence[Rule1D]) -> SparseGrid:
    """Tensor product of univariate rules (Cartesian nodes, product weights)."""
    rules = list(rules)
    if not rules:
        raise ValueError("product_rule needs at least one univariate rule")
    nodes, weights = _tensor(rules)
    index = MultiIndex(tuple(r.level for r in rules))
    return SparseGrid(
        dim=len(rules),
        level=None,
        family=rules[0].family,
        nodes=nodes,
        weights=weights,
        indices=((index, 1),),
    )


def _tensor(rules):
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = rules[0].weights
    for r in rules[1:]:
        weights = np.multiply.outer(weights, r.weights)
    return nodes, np.asarray(weights).ravel()


def smolyak_coefficient(q, d, norm):
    """Signed Smolyak coefficient ``(-1)^(q-|i|) * C(d-1, q-|i|)``."""
    q, d, norm = int(q), int(d), int(norm)
    if d < 1 or q < d:
        raise ValueError(f"need d >= 1 and q >= d, got q={q}, d={d}")
    if not q - d + 1 <= norm <= q:
        raise ValueError(f"norm {norm} outside [{q - d + 1}, {q}]")
    j = q - norm
    return (-1) ** j * comb(d - 1, j)


def multi_indices(q, d):
    """Multi-indices with ``q-d+1 <= |i| <= q`` in lexicographic order."""
    lo = q - d + 1

    def rec(prefix, remaining_dims, budget):
        if remaining_dims == 0:
            if sum(prefix) >= lo:
                yield MultiIndex(tuple(prefix))
            return
        # every later component needs at least 1
        for i in range(1, budget - (remaining_dims - 1) + 1):
            yield from rec(prefix + [i], remaining_dims - 1, budget - i)

    yield from rec([], d, q)


def _snap_columns(nodes, tol):
    nodes = nodes.copy()
    for j in range(nodes.shape[1]):
        col = nodes[:, j]
        order = np.argsort(col, kind="stable")
        sorted_col = col[order]
        starts = np.concatenate(([True], np.diff(sorted_col) > tol))
        rep = sorted_col[starts][np.cumsum(starts) - 1]
        col[order] = rep
    return nodes


def _merge(nodes, weights, drop_tol):
    nodes = _snap_columns(nodes, DEDUP_TOL)
    uniq, inverse = np.unique(nodes, axis=0, return_inverse=True)
    summed = np.bincount(np.ravel(inverse), weights=weights, minlength=uniq.shape[0])
    if drop_tol is None:
        return uniq, summed
    keep = np.abs(summed) >= drop_tol
    return uniq[keep], summed[keep]


def sparse_grid(dim, level, family=NESTED) -> SparseGrid:
    """Smolyak sparse grid ``A(level, dim)`` with merged duplicate nodes.

    Classical grids drop merged nodes whose weight cancels below
    ``DROP_TOL``.  Nested grids keep the whole node union, cancelled nodes
    included, so that the level-q node set stays a subset of level q+1.
    """
    dim, level = int(dim), int(level)
    family = canonical_family(family)
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if level < dim:
        raise ValueError(f"level must be >= dim ({dim}), got {level}")
    max_1d = level - dim + 1
    rules = {i: univariate_rule(family, i) for i in range(1, max_1d + 1)}
    all_nodes, all_weights, indices = [], [], []
    for idx in multi_indices(level, dim):
        coef = smolyak_coefficient(level, dim, idx.norm)
        if coef == 0:
            continue
        nodes, weights = _tensor([rules[i] for i in idx.components])
        all_nodes.append(nodes)
        all_weights.append(coef * weights)
        indices.append((idx, coef))
    drop_tol = None if family == NESTED else DROP_TOL
    nodes, weights = _merge(np.concatenate(all_nodes), np.concatenate(all_weights), drop_tol)
    return SparseGrid(
        dim=dim, level=level, family=family, nodes=nodes, weights=weights, indices=tuple(indices)
    )


def node_keys(grid):
    """Hashable per-node keys (exact float bytes) used for reuse across levels."""
    return [row.tobytes() for row in np.ascontiguousarray(grid.nodes)]


def refine(grid: SparseGrid) -> Refinement:
    """Level ``q+1`` grid plus a mask flagging nodes absent at level ``q``."""
    if grid.family != NESTED:
        raise ValueError("refine requires a nested rule family")
    if grid.level is None:
        raise ValueError("refine requires a Smolyak grid, not a product rule")
    finer = sparse_grid(grid.dim, grid.level + 1, grid.family)
    old = set(node_keys(grid))
    is_new = np.array([k not in old for k in node_keys(finer)], dtype=bool)
    return Refinement(finer, is_new)


def evaluate_nodes(f: Callable, nodes, n_jobs=None, vectorized=False):
    """Evaluate ``f`` at every row of ``nodes``; results keep node order.

    ``n_jobs > 1`` fans the calls out to a thread pool, which requires ``f``
    to be reentrant.
    """
    nodes = np.asarray(nodes, dtype=float)
    if vectorized:
        return np.asarray(f(nodes), dtype=float)
    if n_jobs is not None and n_jobs > 1 and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            out = list(pool.map(f, nodes))
    else:
        out = [f(x) for x in nodes]
    return np.asarray(out, dtype=float)


def integrate(grid: SparseGrid, f: Callable, n_jobs=None, vectorized=False) -> float:
    """Weighted sum ``sum_l f(node_l) * weight_l``."""
    values = evaluate_nodes(f, grid.nodes, n_jobs=n_jobs, vectorized=vectorized)
    bad = ~np.isfinite(values)
    if bad.any():
        node = grid.nodes[np.argmax(bad)]
        raise IntegrationError(f"integrand is not finite at node {node.tolist()}", node=node)
    return float(np.dot(grid.weights, values))


def write_grid_csv(grid: SparseGrid, target=None):
    """Write ``dim,level,node_1..node_d,weight`` rows at 17 significant digits.

    ``target`` may be a path or a text stream; with ``None`` the CSV text is
    returned.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dim", "level"] + [f"node_{j + 1}" for j in range(grid.dim)] + ["weight"])
    level = "" if grid.level is None else grid.level
    for x, w in zip(grid.nodes, grid.weights):
        writer.writerow([grid.dim, level] + [format(v, ".17g") for v in x] + [format(w, ".17g")])
    text = buf.getvalue()
    if target is None:
        return text
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", newline="") as fh:
            fh.write(text)
    return None


def read_grid_csv(source) -> SparseGrid:
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    dim = len(header) - 3
    data = np.array([[float(v) for v in r[2:]] for r in body]).reshape(-1, dim + 1)
    level = int(body[0][1]) if body and body[0][1] else None
    return SparseGrid(dim=dim, level=level, family=NESTED, nodes=data[:, :dim], weights=data[:, dim])
