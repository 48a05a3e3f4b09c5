import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from ddpstar.formula import StandardisationRecord, destandardize
from ddpstar.functionals import (
    FunctionalError,
    FunctionalRequest,
    auc_from_roc,
    conditional_mixture,
    exceedance,
    mixture_cdf,
    mixture_density,
    mixture_mean,
    mixture_quantile,
    mixture_variance,
    posterior_functional,
    roc_curve,
    roc_from_mixtures,
)


def random_state(rng, L=5):
    w = rng.dirichlet(np.ones(L))
    mu = rng.uniform(-3, 3, L)
    sd = rng.uniform(0.1, 2, L)
    return w, mu, sd


def quad(f, w, mu, sd, upper=None):
    lo = np.min(mu - 12 * sd)
    hi = np.max(mu + 12 * sd) if upper is None else upper
    pts = np.sort(mu)
    pts = pts[(pts > lo) & (pts < hi)]
    val, _ = integrate.quad(f, lo, hi, points=pts, limit=500, epsabs=1e-13, epsrel=1e-13)
    return val


class TestFrozenExamples:
    def test_standard_normal_density(self):
        assert mixture_density(0.0, np.ones(1), np.zeros(1), np.ones(1)) == pytest.approx(0.39894, abs=1e-5)

    def test_symmetric_pair_density(self):
        v = mixture_density(0.0, [0.5, 0.5], np.array([-2.0, 2.0]), np.ones(2))
        assert v == pytest.approx(stats.norm.pdf(2.0), rel=1e-14)
        assert v == pytest.approx(0.05399, abs=1e-5)

    def test_mean(self):
        assert mixture_mean(np.array([0.3, 0.7]), np.array([1.0, 2.0])) == pytest.approx(1.7)

    def test_variance(self):
        assert mixture_variance(np.array([0.5, 0.5]), np.array([-1.0, 1.0]), np.ones(2)) == pytest.approx(2.0)

    def test_median_standard_normal(self):
        assert abs(mixture_quantile(0.5, np.ones(1), np.zeros(1), np.ones(1))) < 1e-8

    def test_median_symmetric_pair(self):
        q = mixture_quantile(0.5, np.array([0.5, 0.5]), np.array([0.0, 4.0]), np.ones(2))
        assert abs(q - 2) < 1e-6

    def test_exceedance_at_median(self):
        rng = np.random.default_rng(0)
        w, mu, sd = random_state(rng)
        med = mixture_quantile(0.5, w, mu, sd)
        assert abs(exceedance(med, w, mu, sd) - 0.5) < 1e-8

    def test_exceedance_limits(self):
        w, mu, sd = random_state(np.random.default_rng(1))
        assert exceedance(-1e6, w, mu, sd) == 0
        assert exceedance(1e6, w, mu, sd) == pytest.approx(1, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
class TestQuadratureOracles:
    def test_density_integrates(self, seed):
        w, mu, sd = random_state(np.random.default_rng(seed))
        grid = np.linspace(np.min(mu - 12 * sd), np.max(mu + 12 * sd), 200001)
        assert abs(np.trapezoid(mixture_density(grid, w, mu, sd), grid) - 1) < 1e-6

    def test_moments(self, seed):
        w, mu, sd = random_state(np.random.default_rng(seed))
        m = quad(lambda y: y * mixture_density(y, w, mu, sd), w, mu, sd)
        v = quad(lambda y: (y - m) ** 2 * mixture_density(y, w, mu, sd), w, mu, sd)
        assert abs(mixture_mean(w, mu) - m) < 1e-6
        assert abs(mixture_variance(w, mu, sd) - v) < 1e-6

    def test_cdf_and_quantile(self, seed):
        rng = np.random.default_rng(seed)
        w, mu, sd = random_state(rng)
        for ystar in rng.uniform(-3, 3, 3):
            F = quad(lambda y: mixture_density(y, w, mu, sd), w, mu, sd, upper=ystar)
            assert abs(mixture_cdf(ystar, w, mu, sd) - F) < 1e-6
        p = np.array([0.05, 0.25, 0.5, 0.75, 0.95])
        q = mixture_quantile(p, w, mu, sd)
        assert np.all(np.diff(q) > 0)
        np.testing.assert_allclose(mixture_cdf(q, w, mu, sd), p, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1 - 1e-6))
def test_quantile_cdf_inverse_pair(seed, p):
    w, mu, sd = random_state(np.random.default_rng(seed))
    q = mixture_quantile(p, w, mu, sd)
    F = mixture_cdf(q, w, mu, sd)
    dens = mixture_density(q, w, mu, sd)
    # bisection tolerance on the y axis maps to a probability error of at most dens * tol
    assert abs(F - p) <= dens * 1e-8 + 1e-13


def test_quantile_batches_over_draws():
    rng = np.random.default_rng(2)
    states = [random_state(rng) for _ in range(7)]
    W, M, S = (np.array(a) for a in zip(*states))
    p = np.array([0.1, 0.9])
    batch = mixture_quantile(p[None, :], W[:, None, :], M[:, None, :], S[:, None, :])
    single = np.array([mixture_quantile(p, *s) for s in states])
    np.testing.assert_allclose(batch, single, atol=1e-8)


def test_quantile_bracket_expands():
    # Phi(-10) is about 7.6e-24, so p = 1e-30 lies below the initial bracket
    q = mixture_quantile(1e-30, np.array([1.0]), np.array([0.0]), np.array([1.0]))
    assert q < -10
    assert q == pytest.approx(stats.norm.ppf(1e-30), abs=1e-7)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_invalid_probability(p):
    with pytest.raises(FunctionalError):
        mixture_quantile(p, np.ones(1), np.zeros(1), np.ones(1))


class TestROC:
    def one(self, m, s=1.0):
        return np.ones((1, 1)), np.full((1, 1), m), np.full((1, 1), s)

    def test_binormal_auc(self):
        t = np.linspace(0, 1, 201)
        roc = roc_from_mixtures(t, self.one(1.0), self.one(0.0))
        assert abs(auc_from_roc(t, roc)[0] - stats.norm.cdf(1 / np.sqrt(2))) < 1e-3
        np.testing.assert_allclose(roc[0], 1 - stats.norm.cdf(stats.norm.ppf(1 - t) - 1), atol=1e-8)

    def test_identical_states(self):
        t = np.linspace(0, 1, 201)
        rng = np.random.default_rng(0)
        w, mu, sd = random_state(rng)
        mix = (w[None], mu[None], sd[None])
        roc = roc_from_mixtures(t, mix, mix)
        np.testing.assert_allclose(roc[0], t, atol=1e-7)
        assert auc_from_roc(t, roc)[0] == pytest.approx(0.5, abs=1e-7)

    def test_endpoints_exact(self):
        t = np.linspace(0, 1, 11)
        roc = roc_from_mixtures(t, self.one(3.0, 0.5), self.one(0.0))
        assert roc[0, 0] == 0.0 and roc[0, -1] == 1.0

    def test_auc_vs_fine_quadrature(self):
        mix_d = (np.array([[0.4, 0.6]]), np.array([[0.5, 2.0]]), np.array([[1.0, 0.7]]))
        mix_nd = (np.array([[0.7, 0.3]]), np.array([[0.0, -1.0]]), np.array([[1.0, 0.5]]))
        t = np.linspace(0, 1, 201)
        auc = auc_from_roc(t, roc_from_mixtures(t, mix_d, mix_nd))[0]
        # AUC = Pr(Y_D > Y_nonD) = int F_nonD(y) f_D(y) dy
        exact, _ = integrate.quad(lambda y: mixture_cdf(y, *(a[0] for a in mix_nd))
                                  * mixture_density(y, *(a[0] for a in mix_d)), -15, 15, limit=200)
        # trapezoid error bound: |f''| max / 12 * h^2, with a generous ceiling on the curvature
        assert abs(auc - exact) < 1e-3


class TestPosterior:
    def test_constant_draws_zero_width(self, scenario1_small):
        df, draws = scenario1_small
        const = draws.subset(np.zeros(20, dtype=int))
        res = posterior_functional(const, pd.DataFrame({"x": [0.3, 0.7]}),
                                   "mean,variance,quantile:0.1:0.9,density,exceedance:0")
        t = res.table
        np.testing.assert_allclose(t["lo"], t["median"], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(t["hi"], t["median"], rtol=1e-12, atol=1e-15)

    def test_level_override(self, scenario1_small):
        _, draws = scenario1_small
        q = pd.DataFrame({"x": [0.5]})
        wide = posterior_functional(draws, q, "mean", level=0.95).table.iloc[0]
        narrow = posterior_functional(draws, q, "mean", level=0.5).table.iloc[0]
        assert wide.lo <= narrow.lo <= narrow.hi <= wide.hi

    def test_quantile_curves_monotone(self, scenario1_small):
        _, draws = scenario1_small
        t = posterior_functional(draws, pd.DataFrame({"x": [0.2, 0.8]}), "quantile:0.1:0.25:0.5:0.75:0.9").table
        for _, g in t.groupby("query"):
            assert np.all(np.diff(g["median"].to_numpy()) > 0)

    def test_density_nonnegative_and_normalised(self, scenario1_small):
        _, draws = scenario1_small
        t = posterior_functional(draws, pd.DataFrame({"x": [0.5]}), "density").table
        assert (t[["median", "lo", "hi"]] >= 0).all().all()
        assert len(t) == 201
        assert abs(np.trapezoid(t["median"], t["arg"]) - 1) < 0.02

    def test_backtransform_coherence(self, scenario1_small):
        _, draws = scenario1_small
        rec = StandardisationRecord.from_dict(draws.manifest["standardisation"])
        from ddpstar.functionals import query_design

        C = query_design(draws.manifest, pd.DataFrame({"x": [0.4]}))
        w = draws.weights[:5, None, :]
        mu_s = draws.component_means(C)[:5]
        sd_s = np.sqrt(draws.sigma2[:5])[:, None, :]
        w_o, mu_o, sd_o = conditional_mixture(draws.subset(np.arange(5)), pd.DataFrame({"x": [0.4]}))
        np.testing.assert_allclose(mixture_mean(w_o, mu_o),
                                   destandardize(mixture_mean(w, mu_s), rec, "location"), rtol=1e-10)
        np.testing.assert_allclose(mixture_variance(w_o, mu_o, sd_o),
                                   destandardize(mixture_variance(w, mu_s, sd_s), rec, "variance"), rtol=1e-10)
        p = np.array([0.2, 0.7])[None, :]
        np.testing.assert_allclose(mixture_quantile(p, w_o, mu_o, sd_o),
                                   destandardize(mixture_quantile(p, w, mu_s, sd_s), rec, "location"),
                                   atol=1e-10 + 2e-8 * rec.y_scale)
        y_o = np.array([-1.0, 0.3, 2.0])[None, :]
        y_s = (y_o - rec.y_loc) / rec.y_scale
        np.testing.assert_allclose(mixture_density(y_o, w_o, mu_o, sd_o),
                                   destandardize(mixture_density(y_s, w, mu_s, sd_s), rec, "density"),
                                   rtol=1e-10)

    def test_out_of_domain_rows_reported(self, scenario1_small):
        _, draws = scenario1_small
        with pytest.raises(FunctionalError, match=r"row 1: x=1\.5 outside the training range"):
            posterior_functional(draws, pd.DataFrame({"x": [0.5, 1.5]}), "mean")

    def test_missing_column(self, scenario1_small):
        _, draws = scenario1_small
        with pytest.raises(FunctionalError, match="lacks column"):
            posterior_functional(draws, pd.DataFrame({"z": [0.5]}), "mean")

    def test_roc_pipeline_identical_fits(self, scenario1_small):
        _, draws = scenario1_small
        roc, auc = roc_curve(draws, draws.subset(np.arange(50)), pd.DataFrame({"x": [0.5]}))
        r = roc.table
        assert r["median"].iloc[0] == 0 and r["median"].iloc[-1] == 1
        assert len(r) == 201
        assert abs(auc.table["median"].iloc[0] - 0.5) < 1e-6

    def test_roc_empty_draws(self, scenario1_small):
        _, draws = scenario1_small
        with pytest.raises(FunctionalError):
            roc_curve(draws, draws.subset(np.arange(0)), pd.DataFrame({"x": [0.5]}))


@pytest.mark.parametrize("text,err", [("median", "unknown"), ("quantile", "needs arguments")])
def test_request_parsing_errors(text, err):
    with pytest.raises(FunctionalError, match=err):
        FunctionalRequest.parse_list(text)


def test_request_parsing():
    reqs = FunctionalRequest.parse_list("density, quantile:0.25:0.75,exceedance:33")
    assert [r.name for r in reqs] == ["density", "quantile", "exceedance"]
    assert reqs[1].args == (0.25, 0.75)
