from __future__ import annotations

import numpy as np
import pytest

from deepdemand import simgen
from deepdemand.errors import ConfigError, NumericError
from deepdemand.market import Market
from deepdemand.nncore import rng_stream


def _softmax(v):
    e = np.exp(v)
    return e / (1.0 + e.sum())


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(J=0), dict(M=0), dict(K=-1), dict(N=0), dict(dgp="PROBIT")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            simgen.SimConfig(**kw)

    def test_inattention_needs_price_only(self):
        with pytest.raises(ConfigError):
            simgen.SimConfig(dgp="INATTENTION", K=2)


class TestFeatures:
    def test_distributions(self):
        cfg = simgen.SimConfig(J=1000, M=100, K=1)
        prices, feats = simgen.gen_features(cfg)
        assert 1.97 <= prices.mean() <= 2.03
        assert prices.min() >= 0 and prices.max() <= 4
        assert 0.97 <= feats.var() <= 1.03

    def test_same_seed_identical(self):
        cfg = simgen.SimConfig(J=5, M=4, K=3, seed=9)
        a, b = simgen.gen_features(cfg), simgen.gen_features(cfg)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestMnl:
    def test_single_product_half(self):
        truth = simgen.TruthModel("MNL", np.array([-1.0]), np.zeros((1, 0)))
        s = simgen.argmax_shares(truth, np.array([0.0]), np.zeros((1, 0)), 10_000, rng_stream(1))
        assert abs(s[0] - 0.5) < 0.02

    def test_symmetric_products(self):
        truth = simgen.TruthModel("MNL", np.array([-1.0]), np.ones((1, 2)))
        x = np.array([[0.3, -0.2], [0.3, -0.2]])
        s = simgen.argmax_shares(truth, np.array([1.5, 1.5]), x, 10_000, rng_stream(2))
        assert abs(s[0] - s[1]) < 0.02

    def test_matches_closed_form(self):
        N = 200_000
        truth = simgen.TruthModel("MNL", np.array([-1.0]), np.ones((1, 2)))
        rng = np.random.default_rng(3)
        p, x = rng.uniform(0, 4, 4), rng.normal(size=(4, 2))
        s = simgen.argmax_shares(truth, p, x, N, rng_stream(3))
        exact = _softmax(-p + x.sum(axis=1))
        assert np.max(np.abs(s - exact)) < 3 / np.sqrt(N)

    def test_dataset_invariants(self):
        ds = simgen.simulate_mnl(simgen.SimConfig(dgp="MNL", J=10, M=20, K=3, N=2000))
        for m in ds.markets:
            assert np.all((m.shares > 0) & (m.shares < 1)) and m.shares.sum() < 1

    def test_wrong_entry_point(self):
        with pytest.raises(ConfigError):
            simgen.simulate_mnl(simgen.SimConfig(dgp="RCL"))


class TestRcl:
    def test_degenerate_limit_is_mnl(self):
        cfg = simgen.SimConfig(dgp="RCL", J=6, M=5, K=3, N=500, coef=simgen.CoefSpec(-1.0, 0.0, 0.7, 0.0))
        truth = simgen.make_truth(cfg)
        ds = simgen.simulate_rcl(cfg)
        for m in ds.markets:
            exact = _softmax(-m.prices + 0.7 * m.features.sum(axis=1))
            assert np.max(np.abs(m.shares - exact)) < 1e-12
        # zero variance with full draw arrays also collapses
        alpha = np.full(300, -1.0)
        beta = np.full((300, 3), 0.7)
        t = simgen.TruthModel("RCL", alpha, beta)
        m = ds.markets[0]
        assert np.max(np.abs(t.shares(m.prices, m.features) - m.shares)) < 1e-12
        assert truth.alpha.shape == (1,)

    def test_coefficient_distribution(self):
        truth = simgen.make_truth(simgen.SimConfig(dgp="RCL", K=8, N=100_000, seed=4))
        assert truth.alpha.mean() == pytest.approx(-1.0, abs=0.02)
        assert truth.alpha.var() == pytest.approx(1.0, abs=0.03)
        assert np.allclose(truth.beta.var(axis=0), 1.0, atol=0.03)
        mu = truth.meta["mu_beta"]
        assert np.allclose(truth.beta.mean(axis=0), mu, atol=0.02)

    def test_shares_valid_and_smooth(self):
        ds = simgen.simulate_rcl(simgen.SimConfig(dgp="RCL", J=10, M=10, K=4, N=2000))
        for m in ds.markets:
            assert np.all((m.shares > 0) & (m.shares < 1)) and m.shares.sum() < 1

    def test_price_monotonicity(self):
        # holds whenever every draw dislikes price; use a tight alpha distribution
        cfg = simgen.SimConfig(dgp="RCL", J=5, M=1, K=2, N=2000, coef=simgen.CoefSpec(-1.0, 0.04, None, 1.0))
        truth = simgen.make_truth(cfg)
        assert np.all(truth.alpha < 0)
        m = simgen.simulate(cfg, truth).markets[0]
        base = truth.shares(m.prices, m.features)
        for j in range(5):
            p = m.prices.copy()
            p[j] += 0.1
            assert truth.shares(p, m.features)[j] < base[j]

    def test_price_lovers_can_break_monotonicity(self):
        # alpha ~ N(-1, 1) gives ~16% of draws a positive price coefficient
        truth = simgen.make_truth(simgen.SimConfig(dgp="RCL", J=5, M=1, K=2, N=2000))
        assert 0.1 < np.mean(truth.alpha > 0) < 0.22
        mixed = simgen.TruthModel("RCL", np.array([-3.0, 1.0]), np.zeros((2, 0)))
        p = np.array([3.0, 3.0])
        s0 = mixed.shares(p, np.zeros((2, 0)))[0]
        p[0] += 0.1
        assert mixed.shares(p, np.zeros((2, 0)))[0] > s0

    def test_reproducible(self):
        cfg = simgen.SimConfig(dgp="RCL", J=4, M=5, K=2, N=1000, seed=11)
        a, b = simgen.simulate(cfg), simgen.simulate(cfg)
        for x, y in zip(a.markets, b.markets):
            assert np.array_equal(x.shares, y.shares) and np.array_equal(x.features, y.features)

    def test_price_only(self):
        ds = simgen.simulate_rcl(simgen.SimConfig(dgp="RCL", J=3, M=2, K=0, N=500))
        assert ds.markets[0].features.shape == (3, 0)

    def test_batch_matches_per_market(self):
        cfg = simgen.SimConfig(dgp="RCL", J=3, M=6, K=2, N=800)
        truth = simgen.make_truth(cfg)
        P, X = simgen.gen_features(cfg)
        batch = truth.batch_shares(P, X)
        for m in range(6):
            assert np.max(np.abs(batch[m] - truth.shares(P[m], X[m]))) < 1e-14


class TestNonlinear:
    def test_log_values(self):
        assert simgen.apply_nonlinear("LOG", 0.5) == 0.0
        assert simgen.apply_nonlinear("LOG", 1.0) == pytest.approx(np.log(9.0), abs=1e-12)
        assert simgen.apply_nonlinear("LOG", 0.0) == pytest.approx(-np.log(9.0), abs=1e-12)

    def test_sin_values(self):
        assert simgen.apply_nonlinear("SIN", 0.0) == 0.0
        assert simgen.apply_nonlinear("SIN", np.pi / 2) == pytest.approx(1.0)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            simgen.apply_nonlinear("EXP", 1.0)

    def test_transform_only_inside_utilities(self):
        ds = simgen.simulate(simgen.SimConfig(dgp="RCL_LOG", J=3, M=2, K=1, N=200))
        m = ds.markets[0]
        prices, feats = simgen.gen_features(simgen.SimConfig(dgp="RCL_LOG", J=3, M=2, K=1, N=200))
        assert np.array_equal(m.prices, prices[0]) and np.array_equal(m.features, feats[0])
        plain = simgen.TruthModel("RCL", ds.truth.alpha, ds.truth.beta)
        assert not np.allclose(plain.shares(m.prices, m.features), m.shares)


class TestInattention:
    def _truth(self):
        return simgen.make_truth(simgen.SimConfig(dgp="INATTENTION", J=2, M=1, K=0, N=2000))

    def test_zero_price_reduces_to_rcl(self):
        truth = self._truth()
        plain = simgen.TruthModel("RCL", truth.alpha, truth.beta)
        p = np.array([0.0, 0.0])
        assert simgen.inattentive_fraction(0.0) == 0.0
        assert np.array_equal(truth.shares(p, np.zeros((2, 0))), plain.shares(p, np.zeros((2, 0))))

    def test_mixture_bound(self):
        truth = self._truth()
        for top in (5.0, 50.0, 500.0):
            s = truth.shares(np.array([1.0, top]), np.zeros((2, 0)))
            assert s[1] <= 1.0 / (1.0 + top)

    def test_mixture_weights(self):
        truth = self._truth()
        plain = simgen.TruthModel("RCL", truth.alpha, truth.beta)
        p = np.array([1.0, 3.0])
        f = simgen.inattentive_fraction(3.0)
        s_all = plain.choice_probs(p, np.zeros((2, 0)))
        s_wo = plain.choice_probs(p, np.zeros((2, 0)), exclude=1)
        assert np.allclose(truth.shares(p, np.zeros((2, 0))), (1 - f) * s_all + f * s_wo, atol=1e-15)
        assert s_wo[1] == 0.0

    def test_tie_lowest_index(self):
        truth = self._truth()
        s = truth.shares(np.array([2.0, 2.0]), np.zeros((2, 0)))
        assert s[0] < s[1]

    def test_flattening(self):
        truth = self._truth()
        plain = simgen.TruthModel("RCL", truth.alpha, truth.beta)
        prices = np.linspace(2.5, 4.0, 7)

        def curve(model):
            return np.array([simgen.true_elasticity(model, Market(np.array([2.0, p]), np.zeros((2, 0))), 1, 1)
                             for p in prices])

        e_in, e_rcl = curve(truth), curve(plain)
        # the ignored product's own elasticity changes more slowly with its price than without inattention
        assert np.ptp(e_in) < np.ptp(e_rcl)
        # and sits near the -p/(1+p) term that the inattentive share adds
        assert np.all(np.abs(e_in - (e_rcl - prices / (1 + prices))) < 0.05)

class TestNewProduct:
    def test_adds_row_and_substitutes(self):
        cfg = simgen.SimConfig(dgp="RCL", J=5, M=1, K=2, N=2000)
        truth = simgen.make_truth(cfg)
        m = simgen.simulate(cfg, truth).markets[0]
        aug, s = simgen.add_new_product(m, truth, rng_stream(3))
        assert aug.J == 6 and s.shape == (6,)
        assert np.all(s[:5] <= m.shares)

    def test_clone_equal_share(self):
        cfg = simgen.SimConfig(dgp="RCL", J=4, M=1, K=2, N=2000)
        truth = simgen.make_truth(cfg)
        m = simgen.simulate(cfg, truth).markets[0]
        _, s = simgen.add_new_product(m, truth, rng_stream(3), features=m.features[2], price=m.prices[2])
        assert s[4] == pytest.approx(s[2], abs=1e-12)


class TestElasticity:
    def test_mnl_analytic(self):
        truth = simgen.TruthModel("MNL", np.array([-1.0]), np.ones((1, 2)))
        rng = np.random.default_rng(5)
        m = Market(rng.uniform(0, 4, 4), rng.normal(size=(4, 2)))
        s = truth.shares(m.prices, m.features)
        for j in range(4):
            for k in range(4):
                e = simgen.true_elasticity(truth, m, j, k, 0.01)
                exact = -1.0 * m.prices[j] * (1 - s[j]) if j == k else 1.0 * m.prices[k] * s[k]
                assert e == pytest.approx(exact, rel=0.02)
                assert (e < 0) if j == k else (e > 0)

    def test_bad_pct(self):
        truth = simgen.TruthModel("MNL", np.array([-1.0]), np.ones((1, 1)))
        with pytest.raises(ConfigError):
            simgen.true_elasticity(truth, Market([1.0], [[0.0]]), 0, 0, 0.0)

    def test_zero_share(self):
        truth = simgen.TruthModel("MNL", np.array([-1.0]), np.ones((1, 1)))
        with pytest.raises(NumericError):
            simgen.true_elasticity(truth, Market([1e6], [[0.0]]), 0, 0)


class TestSplit:
    def test_counts_and_disjoint(self):
        ds = simgen.simulate(simgen.SimConfig(J=2, M=100, K=1, N=100))
        tr, te = simgen.split(ds, 0.8, rng_stream(1))
        assert len(tr) == 80 and len(te) == 20
        ids_tr = {m.market_id for m in tr.markets}
        ids_te = {m.market_id for m in te.markets}
        assert not ids_tr & ids_te and ids_tr | ids_te == set(range(100))

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
    def test_extremes(self, ratio):
        ds = simgen.simulate(simgen.SimConfig(J=2, M=10, K=1, N=100))
        with pytest.raises(ConfigError):
            simgen.split(ds, ratio)

    def test_same_seed_same_split(self):
        ds = simgen.simulate(simgen.SimConfig(J=2, M=30, K=1, N=100))
        a = simgen.split(ds, 0.8, rng_stream(4))[1]
        b = simgen.split(ds, 0.8, rng_stream(4))[1]
        assert [m.market_id for m in a.markets] == [m.market_id for m in b.markets]
