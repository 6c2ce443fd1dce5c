import json
import math
import warnings

import numpy as np
import pytest
from scipy import stats

from bisque.mcmc import (
    ChainSamples,
    DegenerateSampleWarning,
    composition_predict,
    furseal_rb_density,
    histogram_pmf,
    kde_density,
    pilot_proposal_cov,
    run_furseal_chain,
    run_spatial_chain,
    sigma2_rb_log_density,
    silverman_bandwidth,
)
from bisque.models import SpatialConfig, kriging_conditional, simulate_furseal, simulate_spatial
from bisque.models.furseal import U2_DEFAULT, _alpha_mixture, log_marginal_u1, n_given_u1


def batch_se(x, batches=40):
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    size = x.size // batches
    means = x[: size * batches].reshape(batches, size).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(batches)


def exact_furseal_moments(data, U2=U2_DEFAULT):
    """Posterior means of N, alpha and U1 by exact summation over N and a dense U1 grid."""
    u = np.linspace(-6.0, 6.0, 1201)
    logw = np.array([log_marginal_u1(data, v, U2) for v in u])
    w = np.exp(logw - logw.max())
    w /= w.sum()
    keep = w > 1e-14
    mean_N = 0.0
    mean_alpha = np.zeros(data.I)
    for wi, v in zip(w[keep], u[keep]):
        Ns, pN = n_given_u1(data, v, U2)
        mean_N += wi * np.dot(Ns, pN)
        for i in range(data.I):
            pw, A, B = _alpha_mixture(data, v, U2, i)
            mean_alpha[i] += wi * np.dot(pw, A / (A + B))
    return mean_N, mean_alpha, float(np.dot(w, u))


@pytest.fixture(scope="module")
def seals():
    return simulate_furseal()


@pytest.fixture(scope="module")
def seal_chain(seals):
    return run_furseal_chain(seals.data, iterations=40_000, seed=5)


class TestChainSamples:
    def test_burn_in_must_be_below_iterations(self):
        with pytest.raises(ValueError):
            ChainSamples(np.zeros((10, 2)), ["a", "b"], 0, 10)

    def test_exports(self, tmp_path):
        ch = ChainSamples(np.arange(12.0).reshape(6, 2), ["a", "b"], 3, 2, {"a": 0.5})
        path = tmp_path / "chain.csv"
        ch.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,a,b" and len(lines) == 7
        summary = json.loads(ch.summary_json())
        assert summary["means"]["a"] == pytest.approx(np.mean([4, 6, 8, 10]))
        assert summary["burn_in"] == 2 and summary["acceptance"] == {"a": 0.5}

    def test_column_uses_retained(self):
        ch = ChainSamples(np.arange(10.0)[:, None], ["x"], 0, 4)
        np.testing.assert_array_equal(ch.column("x"), np.arange(4.0, 10.0))


class TestFurSealChain:
    def test_same_seed_identical(self, seals):
        a = run_furseal_chain(seals.data, iterations=1000, seed=9)
        b = run_furseal_chain(seals.data, iterations=1000, seed=9)
        assert a.draws.tobytes() == b.draws.tobytes()
        c = run_furseal_chain(seals.data, iterations=1000, seed=10)
        assert a.draws.tobytes() != c.draws.tobytes()

    def test_rejects_short_chains(self, seals):
        with pytest.raises(ValueError):
            run_furseal_chain(seals.data, iterations=999)

    def test_invariants(self, seals, seal_chain):
        d = seal_chain.draws
        assert np.all(np.isfinite(d))
        assert seal_chain.burn_in == seal_chain.iterations // 2
        assert np.all(d[:, 0] >= seals.data.r) and np.all(d[:, 0] == np.round(d[:, 0]))
        assert np.all((d[:, 1:8] > 0) & (d[:, 1:8] < 1))
        assert 0.0 <= seal_chain.acceptance["U1"] <= 1.0

    def test_u1_acceptance_rate(self, seal_chain):
        assert 0.1 < seal_chain.acceptance["U1"] < 0.7

    def test_means_match_exact_posterior(self, seals, seal_chain):
        mean_N, mean_alpha, mean_u = exact_furseal_moments(seals.data)
        N = seal_chain.column("N")
        assert abs(N.mean() - mean_N) < 3 * batch_se(N)
        for i in range(7):
            a = seal_chain.column(f"alpha_{i + 1}")
            assert abs(a.mean() - mean_alpha[i]) < 3 * batch_se(a)
        u = seal_chain.column("U1")
        assert abs(u.mean() - mean_u) < 3 * batch_se(u)

    def test_alpha_pinned_by_large_population(self):
        # 2000 animals leave each alpha_i with posterior sd near 0.01
        data = simulate_furseal(seed=4, N=2000, I=5, U1=math.log(0.3 / 0.7)).data
        chain = run_furseal_chain(data, iterations=20_000, seed=2)
        mean_N, mean_alpha, _ = exact_furseal_moments(data)
        N = chain.column("N")
        assert abs(N.mean() - mean_N) < 3 * batch_se(N)
        for i in range(5):
            a = chain.column(f"alpha_{i + 1}")
            assert a.std() < 0.02
            assert abs(a.mean() - mean_alpha[i]) < 3 * batch_se(a)

    def test_rb_densities_normalized(self, seals, seal_chain):
        pmf = furseal_rb_density(seal_chain, seals.data, "N", np.arange(seals.data.r, 400), thin=20)
        assert pmf.sum() == pytest.approx(1.0, abs=1e-6)
        x = np.linspace(1e-4, 1 - 1e-4, 4001)
        dens = furseal_rb_density(seal_chain, seals.data, "alpha_3", x, thin=20)
        assert np.trapezoid(dens, x) == pytest.approx(1.0, abs=1e-4)
        u = np.linspace(-3, 3, 2001)
        dens = furseal_rb_density(seal_chain, seals.data, "U1", u, thin=20)
        assert np.trapezoid(dens, u) == pytest.approx(1.0, abs=1e-4)
        with pytest.raises(ValueError):
            furseal_rb_density(seal_chain, seals.data, "U2", u)


class TestSpatialChain:
    def test_same_seed_identical(self):
        cfg = simulate_spatial(seed=1, N=10, M=4)
        a = run_spatial_chain(cfg, iterations=1000, seed=4)
        b = run_spatial_chain(cfg, iterations=1000, seed=4)
        assert a.draws.tobytes() == b.draws.tobytes()

    def test_single_point_sigma2_is_inverse_gamma(self):
        x = 0.8
        cfg = SpatialConfig(np.array([[0.5, 0.5]]), np.array([x]))
        chain = run_spatial_chain(cfg, iterations=40_000, seed=3)
        s2 = chain.column("sigma2")
        a, b = cfg.priors[:2]
        exact = stats.invgamma(a + 0.5, scale=b + 0.5 * x * x)
        assert abs(s2.mean() - exact.mean()) < 3 * batch_se(s2)
        # log sigma2 has all moments, so check its mean and variance as well
        ls = np.log(s2)
        ref = exact.rvs(size=400_000, random_state=np.random.default_rng(0))
        assert abs(ls.mean() - np.log(ref).mean()) < 3 * batch_se(ls)
        assert ls.var() == pytest.approx(np.log(ref).var(), rel=0.05)

    def test_single_point_range_and_smoothness_uniform(self):
        # with one observation the likelihood carries no information about rho or nu
        cfg = SpatialConfig(np.array([[0.5, 0.5]]), np.array([0.3]))
        chain = run_spatial_chain(cfg, iterations=40_000, seed=8)
        for name in ("rho", "nu"):
            v = chain.column(name)
            assert abs(v.mean() - 0.5) < 3 * batch_se(v)

    def test_rb_log_sigma2_exact_on_single_point(self):
        cfg = SpatialConfig(np.array([[0.5, 0.5]]), np.array([0.8]))
        chain = run_spatial_chain(cfg, iterations=2000, seed=3)
        pts = np.linspace(-3, 2, 11)
        ref = stats.invgamma.pdf(np.exp(pts), 2.5, scale=1.32) * np.exp(pts)
        np.testing.assert_allclose(sigma2_rb_log_density(chain, cfg, pts, thin=50), ref, rtol=1e-10)

    def test_invariants_and_pilot(self):
        cfg = simulate_spatial(seed=2, N=20, M=4)
        chain = run_spatial_chain(cfg, iterations=3000, seed=1)
        assert np.all(np.isfinite(chain.draws))
        assert 0.0 <= chain.acceptance["rho,nu"] <= 1.0
        cov = pilot_proposal_cov(chain, cfg)
        assert cov.shape == (2, 2) and np.all(np.linalg.eigvalsh(cov) > 0)
        tuned = run_spatial_chain(cfg, iterations=1000, seed=1, proposal_cov=cov)
        assert np.all(np.isfinite(tuned.draws))

    def test_failed_factorizations_are_counted(self):
        # nearly coincident sites: smooth, long-range proposals give a numerically singular matrix
        cfg = SpatialConfig(np.array([[0.2, 0.2], [0.2, 0.2 + 1e-9]]), np.array([0.1, 0.1]))
        chain = run_spatial_chain(cfg, iterations=2000, seed=0)
        assert chain.rejected > 0
        assert np.all(np.isfinite(chain.draws))
        assert chain.acceptance["rho,nu"] < 1.0


class TestComposition:
    def test_draw_count_and_interpolation(self):
        base = simulate_spatial(seed=3, N=15, M=4)
        cfg = SpatialConfig(base.locations, base.responses, base.locations[:3])
        chain = run_spatial_chain(cfg, iterations=2000, seed=0)
        draws = composition_predict(chain, cfg, seed=1)
        assert draws.count == chain.retained.shape[0]
        # prediction sites at observed locations have zero conditional variance
        np.testing.assert_allclose(draws.draws, np.tile(base.responses[:3], (draws.count, 1)), atol=1e-6)

    def test_threads_match_serial(self):
        cfg = simulate_spatial(seed=4, N=15, M=9)
        chain = run_spatial_chain(cfg, iterations=1000, seed=0)
        a = composition_predict(chain, cfg, seed=2)
        b = composition_predict(chain, cfg, seed=2, n_jobs=4)
        assert a.draws.tobytes() == b.draws.tobytes()

    def test_moments_for_fixed_parameters(self):
        # a chain frozen at one parameter value gives draws from the kriging conditional
        cfg = simulate_spatial(seed=6, N=15, M=4)
        draws = np.tile([1.0, 0.3, 0.5], (20_000, 1))
        chain = ChainSamples(draws, ["sigma2", "rho", "nu"], 0, 0)
        pred = composition_predict(chain, cfg, seed=3).draws
        ref = kriging_conditional(cfg, 1.0, 0.3, 0.5)
        se = np.sqrt(ref.var / pred.shape[0])
        assert np.all(np.abs(pred.mean(axis=0) - ref.mean) < 4 * se)
        np.testing.assert_allclose(np.cov(pred.T), ref.cov, atol=0.05)


class TestKDE:
    def test_spike_at_common_value(self):
        x = np.full(500, 2.5)
        pts = np.array([2.4, 2.5, 2.6])
        with pytest.warns(DegenerateSampleWarning):
            dens = kde_density(x, pts)
        assert dens[1] > 1e4 and dens[0] == 0.0 and dens[2] == 0.0

    def test_standard_normal_at_zero(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        assert kde_density(x, [0.0])[0] == pytest.approx(1 / math.sqrt(2 * math.pi), rel=0.05)

    def test_integrates_to_one(self):
        x = np.random.default_rng(1).gamma(2.0, size=5000)
        pts = np.linspace(-3, 20, 4001)
        assert np.trapezoid(kde_density(x, pts), pts) == pytest.approx(1.0, abs=1e-2)

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError):
            kde_density(np.arange(99.0), [0.0])

    def test_silverman_rule(self):
        x = np.random.default_rng(2).standard_normal(1000)
        iqr = np.subtract(*np.percentile(x, [75, 25]))
        expected = 0.9 * min(x.std(ddof=1), iqr / 1.349) * 1000 ** (-0.2)
        assert silverman_bandwidth(x) == pytest.approx(expected)

    def test_no_warning_for_spread_samples(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            kde_density(np.linspace(0, 1, 200), [0.5])


def test_histogram_pmf():
    np.testing.assert_allclose(histogram_pmf([3, 3, 4, 6], [2, 3, 4, 5, 6]), [0, 0.5, 0.25, 0, 0.25])
