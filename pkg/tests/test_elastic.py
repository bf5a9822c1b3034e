from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepdemand import baselines, deepset, elastic, simgen
from deepdemand.errors import ConfigError
from deepdemand.market import Market
from deepdemand.nncore import rng_stream


def _mnl_market(seed=0, J=5):
    rng = np.random.default_rng(seed)
    return Market(rng.uniform(0.1, 4, J), rng.normal(size=(J, 2)))


class TestElasticityMatrix:
    def test_mnl_oracle(self):
        fit = baselines.MnlFit(-1.0, np.array([1.0, 0.5]))
        for seed in range(5):
            m = _mnl_market(seed)
            s = fit.predict(m)
            em = elastic.elasticity_matrix(fit.predict, m, elastic.Perturbation(pct=0.01))
            assert np.allclose(em.own(), -m.prices * (1 - s), rtol=0.02)
            for j in range(m.J):
                for k in range(m.J):
                    if j != k:
                        assert em.values[j, k] == pytest.approx(m.prices[k] * s[k], rel=0.02)
            assert np.all(em.own() < 0) and np.all(em.cross() > 0)

    def test_constant_predictor(self):
        m = _mnl_market()
        em = elastic.elasticity_matrix(lambda mk: np.full(mk.J, 0.1), m)
        assert np.all(em.values == 0)

    def test_absolute_step(self):
        fit = baselines.MnlFit(-1.0, np.array([1.0, 0.5]))
        m = _mnl_market(1)
        em = elastic.elasticity_matrix(fit.predict, m, elastic.Perturbation(pct=None, delta=1e-4))
        s = fit.predict(m)
        assert np.allclose(em.own(), -m.prices * (1 - s), rtol=1e-3)

    def test_undefined_flagged(self):
        m = Market([0.0, 2.0], [[0.0], [1.0]])
        em = elastic.elasticity_matrix(lambda mk: np.array([0.0, 0.3]) + 0.01 * mk.prices, m)
        assert em.undefined[:, 0].all()  # zero price under a percentage step
        assert em.undefined[0, :].all()  # zero predicted share
        assert np.isnan(em.values[em.undefined]).all()
        assert not em.undefined[1, 1] and np.isfinite(em.values[1, 1])

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            elastic.Perturbation(pct=None, delta=None)
        with pytest.raises(ConfigError):
            elastic.Perturbation(pct=0.01, delta=1.0)

    def test_permutation_equivariance_deepset(self):
        model = deepset.build_model(deepset.Architecture(k_in=3), rng_stream(2))
        m = _mnl_market(3, J=6)
        base = elastic.elasticity_matrix(model.predict, m).values
        perm = np.random.default_rng(4).permutation(6)
        permuted = Market(m.prices[perm], m.features[perm])
        out = elastic.elasticity_matrix(model.predict, permuted).values
        assert np.array_equal(out, base[np.ix_(perm, perm)])


class TestMaeRmse:
    def test_examples(self):
        assert elastic.mae_rmse([1, -1], [0, 0]) == (1.0, 1.0)
        assert elastic.mae_rmse([0, 0], [0, 0]) == (0.0, 0.0)
        mae, rmse = elastic.mae_rmse([3, 4], [0, 0])
        assert mae == 3.5 and rmse == pytest.approx(math.sqrt(12.5))

    def test_errors(self):
        with pytest.raises(ConfigError):
            elastic.mae_rmse([], [])
        with pytest.raises(ConfigError):
            elastic.mae_rmse([1.0, 2.0], [1.0])

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_rmse_at_least_mae(self, errs):
        mae, rmse = elastic.mae_rmse(errs, [0.0] * len(errs))
        assert rmse >= mae * (1 - 1e-12)


class TestBenchmark:
    def test_rows_and_failures(self):
        cfg = elastic.BenchmarkConfig(dgp="RCL", J=3, M=20, K=1, N=200, reps=2, estimators=("mnl", "mean", "np"),
                                      new_product=True, np_grid={"layers": (3,), "nodes": (8,), "lr": (1e-3,),
                                                                 "epochs": (1,)})
        rows = elastic.benchmark_run(cfg)
        by = elastic.rows_by_key(rows)
        assert set(by) == {("share", "mnl"), ("share", "mean"), ("share", "np"), ("own_elasticity", "mnl"),
                           ("own_elasticity", "np"), ("cross_elasticity", "mnl"), ("cross_elasticity", "np")}
        assert "StructuralError" in by[("share", "np")].error and by[("share", "np")].n_obs == 0
        # 4 test markets x 4 products x 2 replications
        assert by[("share", "mnl")].n_obs == 32
        assert by[("cross_elasticity", "mnl")].n_obs == 2 * 4 * 4 * 3
        assert elastic.MetricRow.header()[:9] == ["quantity", "dgp", "J", "M", "K", "estimator", "MAE", "RMSE", "n_obs"]

    def test_reproducible(self):
        cfg = elastic.BenchmarkConfig(dgp="MNL", J=3, M=10, K=1, N=500, reps=2, estimators=("mnl", "mean"))
        a = [r.as_list() for r in elastic.benchmark_run(cfg)]
        b = [r.as_list() for r in elastic.benchmark_run(cfg)]
        assert a == b

    def test_unknown_estimator(self):
        with pytest.raises(ConfigError):
            elastic.BenchmarkConfig(estimators=("deepset", "probit"))

    def test_elasticity_curve_rows(self):
        ds = simgen.simulate(simgen.SimConfig(dgp="INATTENTION", J=2, M=6, K=0, N=300))
        fit = baselines.fit_mnl(ds.markets)
        rows = elastic.elasticity_curve({"mnl": fit}, ds.markets, ds.truth)
        assert len(rows) == 12
        for mid, price, name, own, other_price, cross in rows:
            assert price >= other_price and name in ("true", "mnl")
            assert own < 0
