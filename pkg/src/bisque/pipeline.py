"""Declarative runs: configuration parsing, inference pipelines and oracle comparisons.

A run configuration is one JSON document::

    {
      "model": "conjugate-toy" | "furseal" | "spatial",
      "data": {...},            # model-specific, see below
      "prior": {...},           # optional model-specific hyperparameters
      "quantities": [...],      # optional; defaults per model
      "quadrature": {"family": "nested", "q_start": null, "q_max": null,
                     "tol": 1e-4, "node_map": null},
      "oracle": {"enabled": true, "iterations": 200000, "seed": 0},
      "output_dir": "out",
      "seed": 0
    }

Data blocks:

* conjugate-toy: ``{"values": [...]}`` or ``{"path": "x.csv"}`` (column ``value``)
* furseal: ``{"path": "counts.csv"}`` (``visit,captured,newly_captured``) or
  ``{"fixture": {"seed": 20240601}}``
* spatial: ``{"observations": "obs.csv", "predictions": "pred.csv"}`` or
  ``{"simulate": {"seed": 1, "n": 100, "m": 25}}``

Each quantity entry names a ``parameter`` and the ``kinds`` to report
(``density``, ``mean``, ``variance``, ``interval``), with optional
``points`` / ``grid`` for densities, ``intervals`` (pairs of bounds) and
per-parameter quadrature overrides.  Relative paths resolve against the
configuration file's directory.
"""

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logit

from .core import (
    BisqueJob,
    DensityCurve,
    NodeCache,
    clip_density,
    converge,
    default_eval_points,
    direct_marginal,
    total_variance,
)
from .gaussian_weight import build_weight
from .mcmc import (
    composition_predict,
    furseal_rb_density,
    histogram_pmf,
    kde_density,
    pilot_proposal_cov,
    run_furseal_chain,
    run_spatial_chain,
    sigma2_rb_log_density,
)
from .models.conjugate import ConjugateConfig, conjugate_toy
from .models.furseal import U2_DEFAULT, FurSealData, alpha_model, n_model, simulate_furseal, u1_model
from .models.spatial import (
    DESK_M,
    DESK_N,
    PAPER_PRIORS,
    SpatialConfig,
    joint_log_density_nu,
    simulate_spatial,
    spatial_model,
)
from .sparse_quad import CLASSICAL, NESTED

MODELS = ("conjugate-toy", "furseal", "spatial")
KINDS = ("density", "mean", "variance", "interval")
FAMILIES = {"nested": NESTED, "classical": CLASSICAL, NESTED: NESTED, CLASSICAL: CLASSICAL}

# parameter -> supported kinds, per model
PARAMETERS = {
    "conjugate-toy": {"mu": KINDS},
    "furseal": {"N": KINDS, "alpha": KINDS, "U1": ("density",)},
    "spatial": {"field": ("mean", "variance", "interval"), "sigma2": ("density",), "rho": ("density",), "nu": ("density",)},
}
DEFAULT_QUANTITIES = {
    "conjugate-toy": [{"parameter": "mu", "kinds": ["density", "mean", "variance"]}],
    "furseal": [
        {"parameter": "N", "kinds": ["density", "mean", "variance"]},
        {"parameter": "alpha", "kinds": ["density", "mean", "variance"]},
        {"parameter": "U1", "kinds": ["density"]},
    ],
    "spatial": [
        {"parameter": "field", "kinds": ["mean", "variance", "interval"]},
        {"parameter": "sigma2", "kinds": ["density"]},
        {"parameter": "rho", "kinds": ["density"]},
        {"parameter": "nu", "kinds": ["density"]},
    ],
}
# three-way split of each predicted field value
SPATIAL_CUTPOINTS = (-0.5, 0.5)
# per-parameter defaults; dq_start / dq_max are offsets above the conditioning dimension p
_LEVEL_DEFAULTS = {
    # one-dimensional nested rules only grow at levels 3, 8 and 15
    ("conjugate-toy", "mu"): {"dq_max": 14},
    ("furseal", "N"): {"dq_start": 2, "dq_max": 5, "tol": 1e-4},
    ("furseal", "alpha"): {"dq_max": 14, "tol": 1e-3},
    ("furseal", "U1"): {"dq_start": 2, "dq_max": 4, "tol": 5e-3, "node_map": "principal"},
    ("spatial", "field"): {"dq_start": 4, "dq_max": 6, "tol": 5e-3, "node_map": "principal"},
}
SPATIAL_DIRECT_LEVEL = 10
SPATIAL_DIRECT_POINTS = 49
SPATIAL_PILOT = 4000


class ConfigError(ValueError):
    """Invalid configuration or command-line usage (exit status 2)."""


# -- configuration --------------------------------------------------------------


@dataclass
class RunConfig:
    model: str
    data: dict
    prior: dict = field(default_factory=dict)
    quantities: list = field(default_factory=list)
    quadrature: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    output_dir: str = "out"
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, record, base_dir="."):
        if not isinstance(record, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(record) - {"model", "data", "prior", "quantities", "quadrature", "oracle", "output_dir", "seed"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        model = record.get("model")
        if model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {model!r}")
        cfg = cls(
            model=model,
            data=dict(record.get("data", {})),
            prior=dict(record.get("prior", {})),
            quantities=list(record.get("quantities") or DEFAULT_QUANTITIES[model]),
            quadrature=dict(record.get("quadrature", {})),
            oracle=dict(record.get("oracle", {})),
            output_dir=str(record.get("output_dir", "out")),
            seed=int(record.get("seed", 0)),
            base_dir=str(base_dir),
        )
        cfg.validate()
        return cfg

    def path(self, name):
        p = Path(name)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self):
        for key in self.data_files():
            if not self.path(key).is_file():
                raise ConfigError(f"data file not found: {self.path(key)}")
        allowed = PARAMETERS[self.model]
        for q in self.quantities:
            name = q.get("parameter")
            if name not in allowed:
                raise ConfigError(f"unknown parameter {name!r} for model {self.model}; expected one of {list(allowed)}")
            for kind in q.get("kinds", []):
                if kind not in allowed[name]:
                    raise ConfigError(f"quantity {kind!r} is not available for {name!r}")
            for lo, hi in q.get("intervals", []):
                if not float(lo) < float(hi):
                    raise ConfigError(f"interval ({lo}, {hi}) needs lower < upper")
        self.level_spec(None)
        for q in self.quantities:
            self.level_spec(q)

    def data_files(self):
        d = self.data
        return [d[k] for k in ("path", "observations", "predictions") if k in d]

    def level_spec(self, quantity):
        spec = {"family": "nested", "q_start": None, "q_max": None, "tol": 1e-4, "node_map": None}
        if quantity is not None:
            spec.update(_LEVEL_DEFAULTS.get((self.model, quantity["parameter"]), {}))
        spec.update({k: v for k, v in self.quadrature.items() if v is not None})
        if quantity is not None:
            spec.update({k: v for k, v in quantity.get("quadrature", {}).items() if v is not None})
        if spec["family"] not in FAMILIES:
            raise ConfigError(f"quadrature family must be 'nested' or 'classical', got {spec['family']!r}")
        if not float(spec["tol"]) > 0:
            raise ConfigError("quadrature tol must be positive")
        if spec["node_map"] not in (None, "cholesky", "principal"):
            raise ConfigError(f"node_map must be 'cholesky' or 'principal', got {spec['node_map']!r}")
        spec["family"] = FAMILIES[spec["family"]]
        return spec


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"configuration is not valid JSON: {err}") from err
    return RunConfig.from_dict(record, base_dir=path.parent)


def load_data(cfg: RunConfig):
    """Dataset object for the configured model."""
    d = cfg.data
    try:
        if cfg.model == "conjugate-toy":
            if "values" in d:
                values = np.asarray(d["values"], dtype=float)
            elif "path" in d:
                with open(cfg.path(d["path"]), newline="") as fh:
                    values = np.array([float(row["value"]) for row in csv.DictReader(fh)])
            else:
                raise ConfigError("conjugate-toy data needs 'values' or 'path'")
            return ConjugateConfig(values, **{k: float(v) for k, v in cfg.prior.items()})
        if cfg.model == "furseal":
            if "path" in d:
                with open(cfg.path(d["path"]), newline="") as fh:
                    return FurSealData.from_csv(fh)
            fixture = d.get("fixture", {})
            return simulate_furseal(**{k: v for k, v in fixture.items() if k in ("seed", "N", "I", "U1", "U2")}).data
        priors = tuple(cfg.prior.get("priors", PAPER_PRIORS))
        if "observations" in d:
            pred = cfg.path(d["predictions"]) if "predictions" in d else None
            with open(cfg.path(d["observations"]), newline="") as obs:
                if pred is None:
                    return SpatialConfig.from_csv(obs, None, priors)
                with open(pred, newline="") as fh:
                    return SpatialConfig.from_csv(obs, fh, priors)
        sim = d.get("simulate", {})
        return simulate_spatial(
            seed=int(sim.get("seed", cfg.seed)),
            N=int(sim.get("n", DESK_N)),
            M=int(sim.get("m", DESK_M)),
            priors=priors,
        )
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"could not load data: {err}") from err


# -- output helpers -------------------------------------------------------------


def fmt(x):
    return format(float(x), ".17g")


def to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dump_json(record):
    return json.dumps(to_jsonable(record), indent=2, sort_keys=True) + "\n"


def table_csv(header, columns):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*columns):
        buf.write(",".join(fmt(v) for v in row) + "\n")
    return buf.getvalue()


# -- inference ------------------------------------------------------------------


@dataclass
class Outcome:
    """Results of one parameter: report entries, CSV files and raw values."""

    report: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)


def _levels(spec, model):
    p = model.dim_theta2
    if spec["q_start"] is not None:
        q_start = int(spec["q_start"])
        if q_start < p:
            raise ConfigError(f"q_start must be at least p = {p} for {model.name}, got {q_start}")
    else:
        q_start = p + int(spec.get("dq_start", 0))
    if spec["q_max"] is not None:
        q_max = int(spec["q_max"])
    else:
        q_max = p + int(spec.get("dq_max", 4))
    if q_max < q_start:
        raise ConfigError(f"q_max ({q_max}) must be at least q_start ({q_start})")
    return q_start, q_max


def _run_kinds(model, spec, kinds, points, intervals, n_jobs, node_map_default="cholesky"):
    """Converge each requested quantity of a BISQuE model sharing one weight and density cache."""
    node_map = spec["node_map"] or node_map_default
    weight = build_weight(model.log_marginal_nu, model.initial_nu(), node_map=node_map)
    q_start, q_max = _levels(spec, model)
    cache = NodeCache()
    qs = model.quantities
    report = {"weight": weight.to_dict(), "quantities": {}}
    values = {}

    def run(node_fn, reducer=None):
        job = BisqueJob(model, weight, node_fn, reducer=reducer, family=spec["family"], n_jobs=n_jobs)
        job.density_cache = cache
        return converge(job, q_start, q_max, float(spec["tol"]))

    if "mean" in kinds:
        res = run(qs["mean"])
        values["mean"] = res.value
        report["quantities"]["mean"] = dict(value=res.value, **res.report())
    if "variance" in kinds:

        def both(theta):
            return np.stack([np.asarray(qs["mean"](theta), float), np.asarray(qs["variance"](theta), float)])

        def reduce_var(mix, vals):
            means, variances = vals[:, 0], vals[:, 1]
            return total_variance(mix, means, variances, mix.expect(means))

        res = run(both, reduce_var)
        values["variance"] = res.value
        report["quantities"]["variance"] = dict(value=res.value, **res.report())
    if "interval" in kinds:
        bounds = [(float(lo), float(hi)) for lo, hi in intervals]

        def masses(theta):
            out = []
            for lo, hi in bounds:
                up = 1.0 if hi == np.inf else np.asarray(qs["cdf"](hi, theta), float)
                dn = 0.0 if lo == -np.inf else np.asarray(qs["cdf"](lo, theta), float)
                out.append(up - dn)
            return np.stack(np.broadcast_arrays(*out))

        res = run(masses)
        values["interval"] = res.value
        report["quantities"]["interval"] = dict(bounds=bounds, value=res.value, **res.report())
    if "density" in kinds:
        res = run(lambda theta: qs["density"](points, theta))
        dens, n_clipped = clip_density(res.value)
        values["density"] = dens
        report["quantities"]["density"] = dict(clipped=n_clipped, **res.report())
        report["mixture"] = res.mixture.diagnostics()
    return report, values


def _points(q, default):
    if "points" in q:
        return np.asarray(q["points"], dtype=float)
    if "grid" in q:
        g = q["grid"]
        return np.linspace(float(g["lower"]), float(g["upper"]), int(g.get("n", 201)))
    return default()


def _intervals(q, default):
    raw = q.get("intervals")
    if raw is None:
        return default
    return [(float(lo), float(hi)) for lo, hi in raw]


def _infer_conjugate(cfg, data, q, n_jobs):
    model = conjugate_toy(data)
    kinds = q.get("kinds", ["density", "mean", "variance"])
    mn, kn, an, bn = data.posterior()
    scale = np.sqrt(bn / (an * kn))
    points = _points(q, lambda: default_eval_points(mn, scale))
    report, values = _run_kinds(model, cfg.level_spec(q), kinds, points, _intervals(q, [(-np.inf, mn)]), n_jobs)
    out = Outcome(report, values=values)
    if "density" in values:
        out.files["mu_density.csv"] = DensityCurve(points, values["density"]).to_csv()
        values["points"] = points
    return out


def _furseal_points(data, name):
    if name == "N":
        return np.arange(data.r, data.r + 60, dtype=float)
    if name == "alpha":
        return np.linspace(0.0, 1.0, 401)[1:-1]
    return np.linspace(-1.5, 1.5, 241)


def _infer_furseal(cfg, data, q, n_jobs):
    name = q["parameter"]
    U2 = float(cfg.prior.get("U2", U2_DEFAULT))
    if name == "N":
        model = n_model(data, U2)
    elif name == "alpha":
        model = alpha_model(data, None, U2, route=q.get("route", "discrete"))
    else:
        model = u1_model(data, U2)
    kinds = q.get("kinds", list(PARAMETERS["furseal"][name]))
    points = _points(q, lambda: _furseal_points(data, name))
    default_iv = [(-np.inf, float(data.r) + 0.5)] if name == "N" else [(0.0, 0.5)]
    report, values = _run_kinds(model, cfg.level_spec(q), kinds, points, _intervals(q, default_iv), n_jobs)
    out = Outcome(report, values=values)
    if "density" in values:
        values["points"] = points
        dens = np.atleast_2d(values["density"])
        header = ("N", "pmf") if name == "N" else ("theta1", "density")
        if name == "alpha":
            for i, row in enumerate(dens, start=1):
                out.files[f"alpha_{i}_density.csv"] = DensityCurve(points, row).to_csv(header=header)
        else:
            out.files[f"{name}_density.csv"] = DensityCurve(points, dens[0]).to_csv(header=header)
    return out


_SPATIAL_INDEX = {"sigma2": 0, "rho": 1, "nu": 2}


def _infer_spatial(cfg, data, q, n_jobs, cache):
    name = q["parameter"]
    spec = cfg.level_spec(q)
    if name == "field":
        model = spatial_model(data)
        kinds = q.get("kinds", ["mean", "variance", "interval"])
        cuts = [-np.inf, *SPATIAL_CUTPOINTS, np.inf]
        default_iv = list(zip(cuts[:-1], cuts[1:]))
        report, values = _run_kinds(model, spec, kinds, None, _intervals(q, default_iv), n_jobs, "principal")
        cols, header = [data.pred_locations[:, 0], data.pred_locations[:, 1]], ["x", "y"]
        if "mean" in values:
            cols.append(values["mean"])
            header.append("mean")
        if "variance" in values:
            cols.append(values["variance"])
            header.append("variance")
        if "interval" in values:
            for k, row in enumerate(np.atleast_2d(values["interval"])):
                cols.append(row)
                header.append(f"interval_{k + 1}")
        out = Outcome(report, values=values)
        out.files["field_summary.csv"] = table_csv(header, cols)
        return out
    # covariance parameters: direct marginalization of the transformed joint posterior
    f = joint_log_density_nu(data)
    if "joint_weight" not in cache:
        cache["joint_weight"] = build_weight(f, data.transform().forward(spatial_model(data).init))
    gw = cache["joint_weight"]
    idx = _SPATIAL_INDEX[name]
    sd = np.sqrt(gw.covariance[idx, idx])
    z = _points(q, lambda: np.linspace(gw.mode[idx] - 6 * sd, gw.mode[idx] + 6 * sd, SPATIAL_DIRECT_POINTS))
    level = int(q.get("level", SPATIAL_DIRECT_LEVEL))
    curve = direct_marginal(
        f, z, index=idx, level=level, family=spec["family"], strategy=q.get("strategy", "per-point"),
        weight=gw, node_map=spec["node_map"] or "principal", n_jobs=n_jobs,
    )
    # natural-scale density: multiply by |d nu / d theta|
    theta, jac = _natural(data.transform().coords[idx], z)
    out = Outcome(
        {"level": level, "strategy": q.get("strategy", "per-point"), "clipped": curve.n_clipped, "weight": gw.to_dict()},
        values={"points": z, "density": curve.density},
    )
    out.files[f"{name}_density_transformed.csv"] = curve.to_csv(header=("nu", "density"))
    out.files[f"{name}_density.csv"] = DensityCurve(theta, curve.density * jac).to_csv()
    return out


def _natural(coord, z):
    """Natural-scale values and ``|d nu / d theta|`` for a log or logit coordinate."""
    if coord.kind == "log":
        theta = coord.lower + np.exp(z)
        return theta, 1.0 / (theta - coord.lower)
    if coord.kind == "logit":
        u = 1.0 / (1.0 + np.exp(-z))
        theta = coord.lower + (coord.upper - coord.lower) * u
        return theta, 1.0 / ((coord.upper - coord.lower) * u * (1.0 - u))
    return z, np.ones_like(z)


def run_inference(cfg: RunConfig, n_jobs=None, data=None):
    """Run every configured quantity; returns ``(report, files, values, timings)``."""
    data = load_data(cfg) if data is None else data
    report = {"model": cfg.model, "seed": cfg.seed, "parameters": {}}
    files, values, timings = {}, {}, {}
    cache = {}
    for q in cfg.quantities:
        name = q["parameter"]
        t0 = time.perf_counter()
        if cfg.model == "conjugate-toy":
            out = _infer_conjugate(cfg, data, q, n_jobs)
        elif cfg.model == "furseal":
            out = _infer_furseal(cfg, data, q, n_jobs)
        else:
            out = _infer_spatial(cfg, data, q, n_jobs, cache)
        timings[name] = time.perf_counter() - t0
        report["parameters"][name] = out.report
        files.update(out.files)
        values[name] = out.values
    report["converged"] = all(
        entry.get("converged", True)
        for par in report["parameters"].values()
        for entry in par.get("quantities", {}).values()
    )
    timings["total"] = sum(timings.values())
    return report, files, values, timings


# -- oracle comparisons ---------------------------------------------------------


def sup_pct(approx, reference):
    """Sup-norm difference as a percentage of the reference peak."""
    approx, reference = np.asarray(approx, float), np.asarray(reference, float)
    return float(100.0 * np.max(np.abs(approx - reference)) / np.max(reference))


def _oracle_settings(cfg):
    o = cfg.oracle
    if not o or not o.get("enabled", False):
        raise ConfigError("oracle comparisons need an 'oracle' block with \"enabled\": true")
    if cfg.model == "conjugate-toy":
        raise ConfigError("oracle chains exist for the furseal and spatial models only")
    return o


def compare_furseal(data, values, chain, U2=U2_DEFAULT):
    comp = {}
    I = data.I
    if "N" in values:
        v = values["N"]
        Ns = v.get("points")
        if "density" in v:
            comp["N_density_pct"] = {
                "histogram": sup_pct(v["density"], histogram_pmf(chain.column("N"), Ns)),
                "rao_blackwell": sup_pct(v["density"], furseal_rb_density(chain, data, "N", Ns, thin=5, U2=U2)),
            }
        if "mean" in v:
            oracle_mean = chain.column("N").mean()
            comp["N_mean"] = {"bisque": v["mean"], "oracle": oracle_mean, "relative": abs(v["mean"] / oracle_mean - 1)}
        if "variance" in v:
            ov = chain.column("N").var()
            comp["N_variance"] = {"bisque": v["variance"], "oracle": ov, "relative": abs(v["variance"] / ov - 1)}
    if "alpha" in values and "density" in values["alpha"]:
        x = values["alpha"]["points"]
        dens = np.atleast_2d(values["alpha"]["density"])
        for i in range(I):
            key = f"alpha_{i + 1}"
            comp[f"{key}_density_pct"] = {
                "kde": sup_pct(dens[i], kde_density(chain.column(key), x)),
                "rao_blackwell": sup_pct(dens[i], furseal_rb_density(chain, data, key, x, U2=U2)),
            }
    if "U1" in values and "density" in values["U1"]:
        u = values["U1"]["points"]
        comp["U1_density_pct"] = {
            "kde": sup_pct(values["U1"]["density"], kde_density(chain.column("U1"), u)),
            "rao_blackwell": sup_pct(values["U1"]["density"], furseal_rb_density(chain, data, "U1", u, thin=5, U2=U2)),
        }
    return comp


def spatial_oracle_chain(config: SpatialConfig, iterations, seed, burn_in=None, pilot=SPATIAL_PILOT):
    """Pilot run for a correlated proposal, then the main chain started at the pilot's last state."""
    first = run_spatial_chain(config, iterations=pilot, seed=seed)
    cov = pilot_proposal_cov(first, config)
    burn_in = iterations // 10 if burn_in is None else burn_in
    return run_spatial_chain(
        config, iterations=iterations, seed=seed + 1, burn_in=burn_in, init=first.draws[-1], proposal_cov=cov
    )


def compare_spatial(config: SpatialConfig, values, chain, draws, cutpoints=SPATIAL_CUTPOINTS):
    comp = {}
    if "field" in values:
        v = values["field"]
        om, osd = draws.mean(axis=0), draws.std(axis=0)
        if "mean" in v:
            keep = np.abs(om) >= 0.05
            rel = np.abs(v["mean"] - om)[keep] / np.abs(om[keep])
            comp["field_mean_median_relative"] = float(np.median(rel))
        if "variance" in v:
            rel = np.abs(np.sqrt(np.clip(v["variance"], 0, None)) - osd) / osd
            comp["field_se_median_relative"] = float(np.median(rel))
        if "interval" in v:
            cuts = [-np.inf, *cutpoints, np.inf]
            freq = np.array([np.mean((draws > lo) & (draws <= hi), axis=0) for lo, hi in zip(cuts[:-1], cuts[1:])])
            masses = np.atleast_2d(v["interval"])
            if masses.shape == freq.shape:
                comp["interval_max_abs_difference"] = float(np.max(np.abs(masses - freq)))
                comp["interval_sum_max_deviation"] = float(np.max(np.abs(masses.sum(axis=0) - 1.0)))
    kept = chain.retained
    _, _, L0, U0, L1, U1 = config.priors
    # compare on the unconstrained scale, where kernel estimates have no boundary bias
    transformed = {
        "sigma2": np.log(kept[:, 0]),
        "rho": logit((kept[:, 1] - L0) / (U0 - L0)),
        "nu": logit((kept[:, 2] - L1) / (U1 - L1)),
    }
    for name, x in transformed.items():
        if name in values and "density" in values[name]:
            z = values[name]["points"]
            entry = {"kde": sup_pct(values[name]["density"], kde_density(x, z))}
            if name == "sigma2":
                rb = np.exp(sigma2_rb_log_density(chain, config, z, thin=5))
                entry["rao_blackwell"] = sup_pct(values[name]["density"], rb)
            comp[f"{name}_density_pct"] = entry
    return comp


def run_oracle(cfg: RunConfig, n_jobs=None):
    """BISQuE run plus the matching oracle chain; returns ``(report, files, timings)``."""
    o = _oracle_settings(cfg)
    data = load_data(cfg)
    report, files, values, timings = run_inference(cfg, n_jobs=n_jobs, data=data)
    iterations = int(o.get("iterations", 200_000 if cfg.model == "furseal" else 100_000))
    seed = int(o.get("seed", cfg.seed))
    t0 = time.perf_counter()
    if cfg.model == "furseal":
        U2 = float(cfg.prior.get("U2", U2_DEFAULT))
        chain = run_furseal_chain(data, iterations=iterations, seed=seed, U2=U2, burn_in=o.get("burn_in"))
        t_chain = time.perf_counter() - t0
        comparison = compare_furseal(data, values, chain, U2)
    else:
        chain = spatial_oracle_chain(data, iterations, seed, burn_in=o.get("burn_in"), pilot=int(o.get("pilot", SPATIAL_PILOT)))
        pred = composition_predict(chain, data, seed=seed + 2, n_jobs=n_jobs)
        t_chain = time.perf_counter() - t0
        comparison = compare_spatial(data, values, chain, pred.draws)
    timings["oracle"] = t_chain
    timings["runtime_ratio"] = t_chain / timings["total"]
    files["chain.csv"] = chain.to_csv()
    files["chain_summary.json"] = chain.summary_json() + "\n"
    report = {"model": cfg.model, "bisque": report, "oracle": {"iterations": iterations, "seed": seed,
              "acceptance": chain.acceptance, "burn_in": chain.burn_in}, "comparison": comparison}
    return report, files, timings


def write_outputs(out_dir, files, report, timings, report_name="report.json"):
    """Write CSVs, the deterministic report and the separate timings file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)
    (out_dir / report_name).write_text(dump_json(report))
    (out_dir / "timings.json").write_text(dump_json(timings))


def thread_count(flag: Optional[int]):
    """``--threads`` if given, else ``BISQUE_THREADS``, else the logical processor count."""
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads must be at least 1")
        return flag
    env = os.environ.get("BISQUE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as err:
            raise ConfigError(f"BISQUE_THREADS must be an integer, got {env!r}") from err
        if n < 1:
            raise ConfigError("BISQUE_THREADS must be at least 1")
        return n
    return os.cpu_count() or 1
