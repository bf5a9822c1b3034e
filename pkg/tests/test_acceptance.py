"""Acceptance suite: one PASS/FAIL line per criterion.

Run on its own with ``pytest tests/test_acceptance.py -v``; the PASS/FAIL
lines are printed to the terminal even under output capture. The full suite
takes roughly 20 minutes on one CPU core, most of it in the coverage study.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from scipy import stats

from deepdemand import autos, baselines, causal, deepset, elastic, io, nncore, simgen
from deepdemand.market import Market, pack

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def _report(n: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}")
        assert ok, detail

    return _report


def _share_mae(rows) -> dict:
    return {r.estimator: r.MAE for r in rows if r.quantity == "share"}


class TestAcceptance:
    def test_1_baseline_rcl(self, report):
        t0 = time.perf_counter()
        cfg = elastic.BenchmarkConfig(dgp="RCL", J=10, M=100, K=10, reps=10, estimators=("deepset", "mnl", "mean"),
                                      elasticities=False)
        mae = _share_mae(elastic.benchmark_run(cfg))
        minutes = (time.perf_counter() - t0) / 60
        ok = mae["deepset"] <= 0.035 and mae["deepset"] < mae["mnl"] and mae["deepset"] < mae["mean"] and minutes <= 20
        report(1, "baseline RCL share MAE", ok,
               f"deepset {mae['deepset']:.4f} (<= 0.035), mnl {mae['mnl']:.4f}, mean {mae['mean']:.4f}, "
               f"{minutes:.1f} min (<= 20)")

    def test_2_baseline_mnl(self, report):
        cfg = elastic.BenchmarkConfig(dgp="MNL", J=10, M=100, K=10, reps=10, estimators=("deepset", "mnl"),
                                      elasticities=False)
        mae = _share_mae(elastic.benchmark_run(cfg))
        report(2, "MNL data: MNL baseline beats deep set", mae["mnl"] < mae["deepset"],
               f"mnl {mae['mnl']:.4f} < deepset {mae['deepset']:.4f}")

    def test_3_product_count_monotone(self, report):
        maes = []
        for J in (5, 10, 20):
            cfg = elastic.BenchmarkConfig(dgp="RCL", J=J, M=100, K=10, reps=5, estimators=("deepset",),
                                          elasticities=False)
            maes.append(_share_mae(elastic.benchmark_run(cfg))["deepset"])
        ok = maes[0] > maes[1] > maes[2]
        report(3, "deep-set MAE decreases J=5->10->20", ok, " -> ".join(f"{m:.4f}" for m in maes))

    def test_4_nonlinear_log(self, report):
        cfg = elastic.BenchmarkConfig(dgp="RCL_LOG", J=10, M=100, K=0, reps=3, estimators=("deepset", "rcl"),
                                      elasticities=False, deepset_train=deepset.TrainConfig(epochs=2000))
        mae = _share_mae(elastic.benchmark_run(cfg))
        ratio = mae["rcl"] / mae["deepset"]
        report(4, "LOG DGP: deep set >= 4x better than RCL", ratio >= 4.0,
               f"rcl {mae['rcl']:.4f} / deepset {mae['deepset']:.4f} = {ratio:.2f} (>= 4)")

    def test_5_inattention(self, report):
        cfg = elastic.BenchmarkConfig(dgp="INATTENTION", J=2, M=1000, K=0, reps=2, estimators=("deepset", "mnl", "rcl"),
                                      deepset_train=deepset.TrainConfig(epochs=2000))
        reps = [elastic.run_replication(cfg, r) for r in range(cfg.reps)]
        own = {r.estimator: r.MAE for r in elastic.aggregate(cfg, reps) if r.quantity == "own_elasticity"}

        # elasticity-vs-price curve of the top-priced product, first replication's test markets
        ds = simgen.simulate(simgen.SimConfig(J=2, M=1000, K=0, N=cfg.N, dgp="INATTENTION", seed=cfg.seed))
        _, test = simgen.split(ds, cfg.train_ratio, nncore.rng_stream(cfg.seed, 5))
        rows = elastic.elasticity_curve(reps[0].fits, test.markets, ds.truth, cfg.pct)
        slope = {}
        for name in ("true", "deepset", "mnl", "rcl"):
            pts = np.array([(p, e) for _, p, n, e, _, _ in rows if n == name and p >= 2.0 and np.isfinite(e)])
            slope[name] = stats.theilslopes(pts[:, 1], pts[:, 0])[0]
        flat = abs(slope["deepset"]) <= 0.25 and abs(slope["deepset"]) < 0.5 * min(abs(slope["mnl"]), abs(slope["rcl"]))
        ok = own["deepset"] < own["mnl"] and own["deepset"] < own["rcl"] and flat
        report(5, "inattention own-elasticity MAE and flattening", ok,
               f"own MAE deepset {own['deepset']:.3f} vs mnl {own['mnl']:.3f} / rcl {own['rcl']:.3f}; "
               f"high-price slope deepset {slope['deepset']:.3f} (|.| <= 0.25 and < half of mnl {slope['mnl']:.3f}, "
               f"rcl {slope['rcl']:.3f}), truth {slope['true']:.3f}")

    def test_6_new_product(self, report):
        cfg = elastic.BenchmarkConfig(dgp="RCL", J=10, M=100, K=10, reps=3, estimators=("deepset", "np"),
                                      elasticities=False, new_product=True,
                                      np_grid={"layers": (3,), "nodes": (64,), "lr": (1e-3,), "epochs": (1,)})
        by = elastic.rows_by_key(elastic.benchmark_run(cfg))
        ds_mae, np_row = by[("share", "deepset")].MAE, by[("share", "np")]
        ok = ds_mae <= 0.04 and "StructuralError" in np_row.error and np_row.n_obs == 0
        report(6, "new-product counterfactual", ok,
               f"deepset J+1 share MAE {ds_mae:.4f} (<= 0.04); stacked NP: {np_row.error.split(':')[0] or 'no error'}")

    @pytest.mark.parametrize("preset", ["coverage-mnl", "coverage-rcl"])
    def test_7_coverage(self, report, preset):
        res = causal.coverage_experiment(preset, n_sims=50)
        ok = res.coverage >= 0.80 and abs(res.mean_bias) < 5e-3
        report(7, f"coverage ({preset})", ok,
               f"coverage {res.coverage:.2f} (>= 0.80), mean bias {res.mean_bias:.2e} (|.| < 5e-3), "
               f"theta0 {res.theta0:.5f}, {res.n_ok} of 50 sims")

    def test_8_property_suite(self, report, tmp_path):
        t0 = time.perf_counter()
        checks = {}
        rng = np.random.default_rng(0)

        # permutation invariance, exact
        model = deepset.build_model(deepset.Architecture(k_in=4), nncore.rng_stream(1))
        m = Market(rng.uniform(0, 4, 8), rng.normal(size=(8, 3)))
        perm = rng.permutation(8)
        s = model.predict(m)
        checks["permutation"] = np.array_equal(model.predict(Market(m.prices[perm], m.features[perm])), s[perm])

        # analytic vs finite-difference gradients of the deep-set loss
        model = deepset.build_model(deepset.Architecture(k_in=3, embed_dim=4, phi_hidden=(6,), rho_hidden=(6,)),
                                    nncore.rng_stream(2))
        mks = [Market(rng.uniform(0, 4, 4), rng.normal(size=(4, 2)), rng.uniform(0.05, 0.2, 4)) for _ in range(3)]
        data = pack(mks)
        deepset.fit_scaler(model, data.X)
        _, grads = deepset.mse_loss_grad(model, data)
        worst = 0.0
        for net, g in zip(model.nets(), grads):
            for arr, garr in [*zip(net.weights, g.weights), *zip(net.biases, g.biases)]:
                for idx in zip(*[rng.integers(0, n, 4) for n in arr.shape]):
                    old = arr[idx]
                    arr[idx] = old + 1e-6
                    up = deepset.mse_loss_grad(model, data, need_grad=False)[0]
                    arr[idx] = old - 1e-6
                    dn = deepset.mse_loss_grad(model, data, need_grad=False)[0]
                    arr[idx] = old
                    num = (up - dn) / 2e-6
                    if abs(num) + abs(garr[idx]) > 1e-9:
                        worst = max(worst, abs(num - garr[idx]) / max(abs(num), abs(garr[idx])))
        checks["gradient"] = worst < 1e-4

        # RCL with zero dispersion is MNL
        beta = np.array([0.8, -0.4])
        mks = [Market(rng.uniform(0, 4, 5), rng.normal(size=(5, 2))) for _ in range(5)]
        rcl = baselines.RclFit(-1.0, beta, 0.0, np.zeros(2), nncore.rng_stream(3).standard_normal((200, 3)))
        mnl = baselines.MnlFit(-1.0, beta)
        checks["rcl_mnl_limit"] = max(np.max(np.abs(rcl.predict(mk) - mnl.predict(mk))) for mk in mks) <= 1e-12

        # MNL elasticities against the closed form
        ok = True
        for mk in mks:
            em = elastic.elasticity_matrix(mnl.predict, mk)
            sh = mnl.predict(mk)
            ok &= bool(np.allclose(em.own(), -mk.prices * (1 - sh), rtol=0.02))
            off = ~np.eye(mk.J, dtype=bool)
            ok &= bool(np.allclose(em.values[off], np.broadcast_to(mk.prices * sh, (mk.J, mk.J))[off], rtol=0.02))
        checks["mnl_elasticity_oracle"] = ok

        # the cross-fit influence values average to zero
        ds = simgen.simulate(simgen.SimConfig(dgp="MNL", J=3, M=20, K=1, N=2000, seed=4))
        hyper = causal.CrossfitHyper(demand=deepset.TrainConfig(epochs=20), riesz=causal.RieszHyper(epochs=20))
        res = causal.crossfit_debiased(ds, 2, causal.MomentSpec(elastic.Perturbation(pct=0.01)), hyper)
        checks["psi_mean"] = abs(float(np.mean(res.psi))) <= 1e-8

        # instrument totals identity, exact on integer-valued characteristics
        X = rng.integers(-50, 50, size=(40, 4)).astype(float)
        Z = autos.blp_instruments(X, rng.integers(0, 6, 40))
        checks["instrument_totals"] = np.array_equal(Z[:, :4] + Z[:, 4:8] + X, np.broadcast_to(X.sum(axis=0), X.shape))

        # CSV round trip
        ds = simgen.simulate(simgen.SimConfig(dgp="RCL", J=4, M=5, K=2, N=300, seed=5))
        io.write_dataset(tmp_path / "d.csv", ds)
        back = io.read_dataset(tmp_path / "d.csv")
        checks["csv_round_trip"] = all(
            np.array_equal(a.prices, b.prices) and np.array_equal(a.features, b.features)
            and np.array_equal(a.shares, b.shares) for a, b in zip(ds.markets, back.markets))

        seconds = time.perf_counter() - t0
        failed = [k for k, v in checks.items() if not v]
        report(8, "property suite", not failed and seconds <= 300,
               f"{len(checks) - len(failed)}/{len(checks)} properties hold"
               + (f" (failed: {', '.join(failed)})" if failed else "")
               + f"; gradient rel-err {worst:.1e} (< 1e-4); {seconds:.0f} s (<= 300)")

    def test_9_empirical(self, report):
        data = autos.records_to_data(autos.synthetic_autos())
        raw = autos.run_empirical(data, autos.EmpiricalConfig(iv="none", intervals=False))
        iv = autos.run_empirical(data, autos.EmpiricalConfig(iv="blp", intervals=False))
        low = raw.categories() == "low"
        pos_low = float(np.mean(raw.elasticities()[low] > 0))
        neg_iv = float(np.mean(iv.elasticities() < 0))
        report(9, "empirical endogeneity direction", pos_low >= 0.20 and neg_iv >= 0.90,
               f"no IV: {pos_low:.0%} of {int(low.sum())} low-price elasticities positive (>= 20%); "
               f"with IV: {neg_iv:.0%} of all negative (>= 90%)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
