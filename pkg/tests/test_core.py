import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bisque.core import (
    BisqueJob,
    DensityCurve,
    Factorization,
    HierarchicalModel,
    NegativeVarianceWarning,
    NodeCache,
    bisque_weights,
    change_metric,
    clip_density,
    converge,
    default_eval_points,
    direct_marginal,
    factored_conditional,
    factored_log_marginal,
    interval_probability,
    marginal_density,
    nested_constant,
    posterior_expectation,
    posterior_variance,
    standardize,
    total_variance,
)
from bisque.exceptions import DegenerateMixtureError, NonFiniteDensityError
from bisque.gaussian_weight import GaussianWeight, build_weight
from bisque.models import ConjugateConfig, conjugate_toy
from bisque.sparse_quad import CLASSICAL, NESTED, sparse_grid
from bisque.transform import Transform, identity, log


def gamma_model(shape=3.0, rate=2.0, shift=0.0):
    return HierarchicalModel(
        Transform([log()]), log_density=lambda th: stats.gamma.logpdf(th[0], shape, scale=1 / rate) + shift
    )


def gaussian_model(m, S):
    return HierarchicalModel(Transform.identity(len(m)), log_density=lambda th: stats.multivariate_normal.logpdf(th, m, S))


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(1)
    cfg = ConjugateConfig(rng.normal(1.0, 2.0, 20))
    model = conjugate_toy(cfg)
    gw = build_weight(model.log_marginal_nu, model.initial_nu())
    return cfg, model, gw


class TestWeights:
    def test_exact_gaussian_gives_quadrature_weights(self):
        m, S = np.array([0.5, -1.0]), np.array([[1.0, 0.3], [0.3, 0.5]])
        model = gaussian_model(m, S)
        gw = build_weight(model.log_marginal_nu, [0.0, 0.0])
        mix = bisque_weights(model, gw, 6)
        np.testing.assert_allclose(mix.std_weights, mix.quad_weights / mix.quad_weights.sum(), atol=1e-9)

    def test_single_node_at_mode(self):
        model = gamma_model()
        gw = build_weight(model.log_marginal_nu, model.initial_nu())
        mix = bisque_weights(model, gw, 1)
        assert mix.size == 1
        assert mix.std_weights[0] == 1.0
        np.testing.assert_array_equal(mix.nodes_nu[0], gw.mode)

    @pytest.mark.parametrize("shape", [5.0, 10.0])
    def test_gamma_weights_reach_exact_standardization(self, shape):
        # the normalized gamma density makes f / w times the quadrature weight the exact standardized weight
        model = gamma_model(shape, 2.0)
        gw = build_weight(model.log_marginal_nu, model.initial_nu())
        mix = bisque_weights(model, gw, 15)
        exact = mix.quad_weights * np.exp([model.log_marginal_nu(v) for v in mix.nodes_nu] - gw.log_density(mix.nodes_nu))
        assert np.abs(mix.std_weights - exact).max() < 1e-8

    def test_gamma_weights_converge_monotonically(self):
        model = gamma_model(3.0, 2.0)
        gw = build_weight(model.log_marginal_nu, model.initial_nu())
        nu = np.linspace(-40.0, 5.0, 40_001)
        norm = np.trapezoid(np.exp([model.log_marginal_nu([v]) for v in nu]), nu)
        errs = []
        for q in (2, 3, 8, 15):
            mix = bisque_weights(model, gw, q)
            logf = np.array([model.log_marginal_nu(v) for v in mix.nodes_nu])
            exact = mix.quad_weights * np.exp(logf - gw.log_density(mix.nodes_nu)) / norm
            errs.append(np.abs(mix.std_weights - exact).max())
        assert all(b < a for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-7

    def test_standardize_degenerate(self):
        with pytest.raises(DegenerateMixtureError, match="degenerate mixture"):
            standardize(np.array([0.0, 5.0]), np.array([0.5, -0.5]))

    def test_standardize_signed(self):
        w = standardize(np.array([0.0, 0.0, 1.0]), np.array([0.6, -0.1, 0.5]))
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert w[1] < 0

    def test_non_finite_node_named(self):
        model = HierarchicalModel(Transform.identity(1), log_density=lambda th: -0.5 * th[0] ** 2 if th[0] < 1 else np.nan)
        gw = GaussianWeight([0.0], [[1.0]])
        with pytest.raises(NonFiniteDensityError) as err:
            bisque_weights(model, gw, 3)
        assert err.value.location[0] >= 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            bisque_weights(gamma_model(), GaussianWeight(np.zeros(2), np.eye(2)), 3)

    def test_raw_weights_positive_somewhere(self, toy):
        _, model, gw = toy
        mix = bisque_weights(model, gw, 5)
        assert np.all(np.isfinite(mix.raw_weights))
        assert mix.raw_weights.max() > 0
        assert mix.diagnostics()["nodes"] == mix.size

    def test_node_cache_reuses(self):
        cache = NodeCache()
        f = lambda x: float(x[0] ** 2)
        nodes = np.array([[1.0], [2.0], [1.0]])
        assert cache.evaluate(f, nodes) == [1.0, 4.0, 1.0]
        cache.evaluate(f, np.array([[2.0], [3.0]]))
        assert cache.calls == 3


class TestQuantities:
    def test_conjugate_density(self, toy):
        cfg, model, gw = toy
        pts = np.linspace(-3.0, 5.0, 201)
        mix = bisque_weights(model, gw, 6)
        curve = marginal_density(mix, model.quantities["density"], pts)
        truth = cfg.mu_marginal().pdf(pts)
        assert np.max(np.abs(curve.density - truth)) / truth.max() < 1e-3
        assert curve.n_clipped == 0

    def test_density_integrates_to_one(self, toy):
        cfg, model, gw = toy
        pts = np.linspace(-15.0, 17.0, 4001)
        curve = marginal_density(bisque_weights(model, gw, 6), model.quantities["density"], pts)
        assert curve.integral() == pytest.approx(1.0, abs=1e-3)

    def test_single_node_quantities(self, toy):
        _, model, gw = toy
        mix = bisque_weights(model, gw, 1)
        theta = mix.nodes_theta2[0]
        pts = np.array([0.0, 1.0, 2.0])
        np.testing.assert_allclose(marginal_density(mix, model.quantities["density"], pts).density, model.quantities["density"](pts, theta))
        assert posterior_variance(mix, model.quantities["mean"], model.quantities["variance"], 0.0) == pytest.approx(
            model.quantities["variance"](theta) + model.quantities["mean"](theta) ** 2
        )

    def test_conjugate_mean_and_variance(self, toy):
        cfg, model, gw = toy
        mix = bisque_weights(model, gw, 6)
        mean = posterior_expectation(mix, model.quantities["mean"])
        var = posterior_variance(mix, model.quantities["mean"], model.quantities["variance"], mean)
        assert mean == pytest.approx(cfg.mu_mean(), abs=1e-6)
        assert var == pytest.approx(cfg.mu_variance(), rel=1e-4)

    def test_variance_matches_dense_quadrature(self, toy):
        cfg, model, gw = toy
        mix = bisque_weights(model, gw, 6)
        var = posterior_variance(mix, model.quantities["mean"], model.quantities["variance"], posterior_expectation(mix, model.quantities["mean"]))
        mu = np.linspace(-4.0, 6.0, 801)
        ls2 = np.linspace(-1.0, 4.0, 801)
        M, L = np.meshgrid(mu, ls2, indexing="ij")
        x, s2 = cfg.data, np.exp(L)
        # Gaussian likelihood through sufficient statistics, plus both prior factors
        ss = np.sum((x - x.mean()) ** 2) + x.size * (x.mean() - M) ** 2
        logj = (
            -0.5 * x.size * np.log(s2) - 0.5 * ss / s2
            + stats.norm.logpdf(M, cfg.m0, np.sqrt(s2 / cfg.k0))
            + stats.invgamma.logpdf(s2, cfg.a0, scale=cfg.b0)
            + L
        )
        assert logj[400, 400] - logj[100, 700] == pytest.approx(
            cfg.log_joint(M[400, 400], s2[400, 400]) + L[400, 400] - cfg.log_joint(M[100, 700], s2[100, 700]) - L[100, 700]
        )
        dens = np.exp(logj - logj.max())
        marg = np.trapezoid(dens, ls2, axis=1)
        marg /= np.trapezoid(marg, mu)
        m1 = np.trapezoid(mu * marg, mu)
        assert var == pytest.approx(np.trapezoid((mu - m1) ** 2 * marg, mu), rel=1e-4)

    def test_constant_quantities(self, toy):
        _, model, gw = toy
        mix = bisque_weights(model, gw, 5)
        assert posterior_expectation(mix, lambda th: 2.5) == pytest.approx(2.5, abs=1e-14)
        assert posterior_variance(mix, lambda th: 2.5, lambda th: 0.7, 2.5) == pytest.approx(0.7, abs=1e-14)

    def test_linearity(self, toy):
        _, model, gw = toy
        mix = bisque_weights(model, gw, 5)
        g = lambda th: np.log(th[0])
        lhs = posterior_expectation(mix, lambda th: 3.0 * g(th) - 2.0)
        assert lhs == pytest.approx(3.0 * posterior_expectation(mix, g) - 2.0, abs=1e-12)

    def test_intervals(self, toy):
        cfg, model, gw = toy
        mix = bisque_weights(model, gw, 6)
        cdf = model.quantities["cdf"]
        assert interval_probability(mix, cdf, -np.inf, np.inf) == pytest.approx(1.0, abs=1e-10)
        parts = [interval_probability(mix, cdf, a, b) for a, b in [(-np.inf, 0.0), (0.0, 1.5), (1.5, np.inf)]]
        assert sum(parts) == pytest.approx(1.0, abs=1e-10)
        t = cfg.mu_marginal()
        assert parts[1] == pytest.approx(t.cdf(1.5) - t.cdf(0.0), abs=1e-4)
        with pytest.raises(ValueError):
            interval_probability(mix, cdf, 1.0, 1.0)

    def test_vector_valued_node_function(self, toy):
        _, model, gw = toy
        mix = bisque_weights(model, gw, 4)
        out = posterior_expectation(mix, lambda th: np.array([1.0, th[0]]))
        assert out.shape == (2,)
        assert out[0] == pytest.approx(1.0, abs=1e-14)

    def test_negative_variance_flagged(self, toy):
        _, model, gw = toy
        mix = bisque_weights(model, gw, 3)
        with pytest.warns(NegativeVarianceWarning):
            out = total_variance(mix, np.zeros(mix.size), -np.ones(mix.size), 0.0)
        assert out < 0

    def test_clip_density_counts(self):
        vals, n = clip_density([0.5, -1e-12, 0.0, -3.0])
        assert n == 2
        np.testing.assert_array_equal(vals, [0.5, 0.0, 0.0, 0.0])

    def test_default_eval_points(self):
        pts = default_eval_points(1.0, 0.5)
        assert pts.size == 201
        assert pts[0] == pytest.approx(-2.0) and pts[-1] == pytest.approx(4.0)

    def test_curve_csv(self):
        text = DensityCurve(np.array([0.0, 0.1]), np.array([1.0, 1 / 3])).to_csv()
        assert text.splitlines() == ["theta1,density", "0,1", "0.10000000000000001,0.33333333333333331"]


def gaussian_factorization(scale=1.0, g2=lambda th: 0.0, normalized=False):
    const = -0.5 * np.log(2 * np.pi) if normalized else 0.0

    def log_g1(t1, th):
        return np.log(scale) + const - 0.5 * float(np.sum(np.asarray(t1) ** 2))

    return HierarchicalModel(Transform([log()]), factorization=Factorization(log_g1=log_g1, log_g2=g2))


class TestNestedIntegration:
    def test_gaussian_integral(self):
        assert nested_constant(gaussian_factorization(), [1.0]) == pytest.approx(np.sqrt(2 * np.pi), abs=1e-8)

    def test_normalized_integrand(self):
        assert nested_constant(gaussian_factorization(normalized=True), [1.0]) == pytest.approx(1.0, abs=1e-8)

    def test_linearity(self):
        base = nested_constant(gaussian_factorization(), [1.0])
        assert nested_constant(gaussian_factorization(scale=10.0), [1.0]) == pytest.approx(10 * base, rel=1e-12)

    def test_factored_marginal_zero(self):
        assert factored_log_marginal(gaussian_factorization(normalized=True), [2.0]) == pytest.approx(0.0, abs=1e-8)

    def test_factored_marginal_shift(self):
        a = factored_log_marginal(gaussian_factorization(g2=lambda th: -th[0]), [2.0])
        b = factored_log_marginal(gaussian_factorization(g2=lambda th: -th[0] + 3.25), [2.0])
        assert b - a == pytest.approx(3.25, abs=1e-12)

    @pytest.mark.parametrize("shape,inner_nodes", [(10, 15), (3, 40)])
    def test_factored_marginal_matches_dense(self, shape, inner_nodes):
        # g1 a gamma kernel in theta1 with rate theta2, g2 = exp(-theta2)
        def log_g1(t1, th):
            x = float(t1[0])
            return (shape - 1) * np.log(x) - th[0] * x if x > 0 else -np.inf

        fac = Factorization(
            log_g1=log_g1,
            log_g2=lambda th: -th[0],
            inner_transform=Transform([log()]),
            inner_init=[1.0],
            inner_nodes=inner_nodes,
        )
        model = HierarchicalModel(Transform([log()]), factorization=fac)
        for th in (0.5, 1.0, 3.0):
            x = np.linspace(0.0, 300.0 / th, 600_001)
            dense = np.log(np.trapezoid(x ** (shape - 1) * np.exp(-th * x), x)) - th
            assert factored_log_marginal(model, [th]) == pytest.approx(dense, abs=1e-6)

    def test_factored_conditional(self):
        model = gaussian_factorization(scale=7.0)
        pts = np.linspace(-4, 4, 9)
        np.testing.assert_allclose(factored_conditional(model, pts, [1.0]), stats.norm.pdf(pts), atol=1e-8)
        x = np.linspace(-12, 12, 20_001)
        assert np.trapezoid(factored_conditional(model, x, [1.0]), x) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(factored_conditional(gaussian_factorization(), pts, [1.0]), factored_conditional(model, pts, [1.0]), rtol=1e-12)

    def test_two_dimensional_inner(self):
        def log_g1(t1, th):
            return -0.5 * float(t1 @ t1) / th[0]

        model = HierarchicalModel(Transform([log()]), factorization=Factorization(log_g1=log_g1, log_g2=lambda th: 0.0, inner_dim=2))
        assert nested_constant(model, [2.0]) == pytest.approx(2 * np.pi * 2.0, rel=1e-10)

    def test_exactly_one_source(self):
        with pytest.raises(ValueError):
            HierarchicalModel(Transform([log()]))
        with pytest.raises(ValueError):
            HierarchicalModel(Transform([log()]), log_density=lambda th: 0.0, factorization=gaussian_factorization().factorization)


class TestDirectMarginal:
    def test_independent_normals(self):
        joint = lambda v: float(stats.norm.logpdf(v).sum())
        pts = np.linspace(-8.0, 8.0, 801)
        curve = direct_marginal(joint, pts, index=0, init=[0.3, -0.2])
        assert curve.density[400] == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-6)

    @pytest.mark.parametrize("strategy", ["shared", "per-point"])
    def test_separable_proportional(self, strategy):
        f1 = lambda x: stats.gamma.logpdf(np.exp(x), 4.0) + x
        joint = lambda v: float(f1(v[1]) + stats.norm.logpdf(v[0], 1.0, 0.5) + stats.norm.logpdf(v[2], -1.0, 2.0))
        pts = np.linspace(-1.0, 3.0, 41)
        curve = direct_marginal(joint, pts, index=1, init=[1.0, 1.0, -1.0], strategy=strategy, level=6)
        ratio = curve.density / np.exp(f1(pts))
        assert np.ptp(ratio) / ratio.mean() < 1e-8

    def test_correlated_gaussian_per_point(self):
        S = np.array([[1.0, 0.8, 0.3], [0.8, 2.0, 0.5], [0.3, 0.5, 1.5]])
        joint = lambda v: float(stats.multivariate_normal.logpdf(v, np.zeros(3), S))
        pts = np.linspace(-5.0, 5.0, 101)
        curve = direct_marginal(joint, pts, index=2, init=np.zeros(3), strategy="per-point", node_map="principal")
        ratio = curve.density / stats.norm.pdf(pts, 0.0, np.sqrt(1.5))
        assert np.ptp(ratio) / ratio.mean() < 1e-8

    def test_requires_weight_or_init(self):
        with pytest.raises(ValueError):
            direct_marginal(lambda v: 0.0, [0.0, 1.0])
        with pytest.raises(ValueError):
            direct_marginal(lambda v: 0.0, [0.0, 1.0], weight=GaussianWeight(np.zeros(2), np.eye(2)), strategy="grid")


class TestConverge:
    def test_constant_quantity(self, toy):
        _, model, gw = toy
        res = converge(BisqueJob(model, gw, lambda th: 4.0), 1, 6, 1e-12)
        assert res.converged
        assert res.level == 2
        assert res.changes == [0.0]
        assert res.value == pytest.approx(4.0)

    def test_conjugate_density(self):
        rng = np.random.default_rng(1)
        cfg = ConjugateConfig(rng.normal(1.0, 2.0, 2000))
        model = conjugate_toy(cfg)
        gw = build_weight(model.log_marginal_nu, model.initial_nu())
        t = cfg.mu_marginal()
        pts = np.linspace(t.mean() - 6 * t.std(), t.mean() + 6 * t.std(), 201)
        p = model.dim_theta2
        res = converge(BisqueJob(model, gw, lambda th: model.quantities["density"](pts, th)), p, p + 4, 1e-6)
        assert res.converged and res.level <= p + 4
        assert np.max(np.abs(res.value - t.pdf(pts))) / t.pdf(pts).max() < 1e-3

    def test_reuse_cheaper_than_rebuild(self, toy):
        _, model, gw = toy
        fn = lambda th: model.quantities["variance"](th)
        reuse = BisqueJob(model, gw, fn, family=NESTED, reuse=True)
        fresh = BisqueJob(model, gw, fn, family=NESTED, reuse=False)
        for q in (3, 8):
            reuse.evaluate(q)
            fresh.evaluate(q)
        assert reuse.calls < fresh.calls

    def test_not_converged_flag(self, toy):
        _, model, gw = toy
        res = converge(BisqueJob(model, gw, model.quantities["variance"]), 1, 3, 1e-30)
        assert not res.converged
        assert len(res.changes) >= 1
        assert res.report()["converged"] is False

    def test_skips_identical_levels(self, toy):
        _, model, gw = toy
        res = converge(BisqueJob(model, gw, model.quantities["variance"]), 3, 8, 1e-30)
        # univariate nested levels 3-7 share the 9-point rule
        assert res.levels == [3, 8]

    def test_q_start_below_dim(self):
        model = gaussian_model(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            converge(BisqueJob(model, GaussianWeight(np.zeros(2), np.eye(2)), lambda th: 0.0), 1, 4, 1e-6)

    def test_change_metric(self):
        assert change_metric(1.5, 1.0) == pytest.approx(0.5 / 2.5)
        assert change_metric([1.0, 2.0], [1.0, 2.5]) == 0.5
        assert change_metric(1.5, 1.0, "sup") == 0.5


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-500, 500), level=st.integers(1, 8), family=st.sampled_from([NESTED, CLASSICAL]))
def test_log_shift_invariance(shift, level, family):
    base, moved = gamma_model(), gamma_model(shift=shift)
    gw = build_weight(base.log_marginal_nu, base.initial_nu())
    a, b = bisque_weights(base, gw, level, family), bisque_weights(moved, gw, level, family)
    assert a.std_weights.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(b.std_weights, a.std_weights, rtol=1e-10, atol=1e-14)
    pts = np.linspace(0.1, 4.0, 7)
    cond = lambda x, th: stats.expon.pdf(x, scale=1 / th[0])
    np.testing.assert_allclose(marginal_density(b, cond, pts).density, marginal_density(a, cond, pts).density, rtol=1e-10)


@settings(max_examples=25, deadline=None)
@given(
    mode=st.floats(-2, 2),
    sd=st.floats(0.05, 2.0),
    level=st.integers(1, 10),
    shape=st.floats(1.5, 30.0),
)
def test_standardized_weights_sum_to_one(mode, sd, level, shape):
    model = gamma_model(shape, 1.0)
    mix = bisque_weights(model, GaussianWeight([mode], [[sd]]), level)
    assert mix.std_weights.sum() == pytest.approx(1.0, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(level=st.integers(1, 9), a=st.floats(-3, 3), b=st.floats(0.0, 2.0))
def test_variance_non_negative_with_positive_weights(level, a, b):
    model = gamma_model(4.0, 1.0)
    gw = build_weight(model.log_marginal_nu, model.initial_nu())
    mix = bisque_weights(model, gw, level, CLASSICAL)
    assert np.all(mix.std_weights >= 0)
    mean_fn = lambda th: a * th[0]
    var_fn = lambda th: b * th[0] ** 2
    m = posterior_expectation(mix, mean_fn)
    with warnings.catch_warnings():
        warnings.simplefilter("error", NegativeVarianceWarning)
        assert posterior_variance(mix, mean_fn, var_fn, m) >= 0


def test_deterministic(toy):
    _, model, gw = toy
    a, b = bisque_weights(model, gw, 7), bisque_weights(model, gw, 7)
    assert a.std_weights.tobytes() == b.std_weights.tobytes()
    assert a.nodes_nu.tobytes() == b.nodes_nu.tobytes()


def test_threads_match_serial(toy):
    _, model, gw = toy
    a = bisque_weights(model, gw, 7, n_jobs=1)
    b = bisque_weights(model, gw, 7, n_jobs=4)
    assert a.std_weights.tobytes() == b.std_weights.tobytes()
