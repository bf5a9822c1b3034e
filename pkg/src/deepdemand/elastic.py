"""Elasticity matrices, error metrics and the replicated benchmark harness."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import baselines, deepset, simgen
from .errors import ConfigError, NumericError
from .market import Market
from .nncore import rng_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Perturbation:
    """Relative (``pct`` of the price) or absolute (``delta``) price change."""

    pct: float | None = 0.01
    delta: float | None = None

    def __post_init__(self):
        if (self.pct is None) == (self.delta is None):
            raise ConfigError("give exactly one of pct or delta")

    def step(self, price: float) -> float:
        return self.pct * price if self.delta is None else self.delta


@dataclass
class ElasticityMatrix:
    """Entry (j, k): % change in share j per % change in price k."""

    values: np.ndarray
    undefined: np.ndarray
    spec: Perturbation

    def own(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def cross(self) -> np.ndarray:
        off = ~np.eye(self.values.shape[0], dtype=bool)
        return self.values[off]


def elasticity_matrix(predict_fn, market: Market, spec: Perturbation | None = None) -> ElasticityMatrix:
    spec = spec or Perturbation()
    s0 = np.asarray(predict_fn(market), dtype=np.float64)
    J = market.J
    vals = np.full((J, J), np.nan)
    undefined = np.zeros((J, J), dtype=bool)
    undefined[s0 == 0, :] = True
    for k in range(J):
        pk = market.prices[k]
        dp = spec.step(pk)
        if pk == 0 or dp == 0:
            undefined[:, k] = True
            continue
        p = market.prices.copy()
        p[k] += dp
        s1 = np.asarray(predict_fn(market.with_prices(p)), dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals[:, k] = (s1 - s0) / s0 / (dp / pk)
    vals[undefined] = np.nan
    return ElasticityMatrix(vals, undefined, spec)


def mae_rmse(predicted, truth) -> tuple[float, float]:
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ConfigError(f"predicted and truth shapes differ: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ConfigError("error metrics need at least one observation")
    e = np.abs(predicted - truth)
    scale = float(e.max())
    if scale == 0.0 or not np.isfinite(scale):
        return float(np.mean(e)), float(np.sqrt(np.mean(e**2)))
    # scaling keeps tiny or huge errors from under/overflowing when squared
    return float(np.mean(e)), scale * float(np.sqrt(np.mean((e / scale) ** 2)))


# -- benchmark harness ----------------------------------------------------------

ESTIMATORS = ("deepset", "mnl", "rcl", "np", "mean")
QUANTITIES = ("share", "own_elasticity", "cross_elasticity")


@dataclass
class MetricRow:
    quantity: str
    dgp: str
    J: int
    M: int
    K: int
    estimator: str
    MAE: float
    RMSE: float
    n_obs: int
    error: str = ""

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def as_list(self):
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class BenchmarkConfig:
    dgp: str = "RCL"
    J: int = 10
    M: int = 100
    K: int = 10
    N: int = 10_000
    reps: int = 20
    seed: int = 0
    train_ratio: float = 0.8
    estimators: tuple = ESTIMATORS
    pct: float = 0.01
    elasticities: bool = True
    new_product: bool = False
    deepset_train: deepset.TrainConfig = field(default_factory=deepset.TrainConfig)
    rcl_draws: int = 500
    np_grid: dict | None = None

    def __post_init__(self):
        unknown = set(self.estimators) - set(ESTIMATORS) - {"true"}
        if unknown:
            raise ConfigError(f"unknown estimators {sorted(unknown)}")


def fit_estimator(name: str, train, cfg: BenchmarkConfig, seed: int, truth=None):
    markets = train.markets
    if name == "deepset":
        tc = deepset.TrainConfig(**{**asdict(cfg.deepset_train), "seed": seed})
        return deepset.fit(markets, cfg=tc)
    if name == "mnl":
        return baselines.fit_mnl(markets)
    if name == "rcl":
        return baselines.fit_rcl(markets, R=cfg.rcl_draws, seed=seed)
    if name == "np":
        return baselines.fit_stacked_np(markets, cfg.np_grid, seed=seed)
    if name == "mean":
        return baselines.fit_mean(markets)
    if name == "true":
        return truth
    raise ConfigError(f"unknown estimator {name!r}")


@dataclass
class RepResult:
    """Pooled per-observation errors of one replication."""

    errors: dict = field(default_factory=dict)  # (estimator, quantity) -> list of arrays
    failures: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)


def _test_markets(test, truth, cfg: BenchmarkConfig, seed: int):
    if not cfg.new_product:
        return [(m, m.shares) for m in test.markets]
    rng = rng_stream(seed, 77)
    out = []
    for m in test.markets:
        aug, s_true = simgen.add_new_product(m, truth, rng)
        out.append((aug, s_true))
    return out


def run_replication(cfg: BenchmarkConfig, rep: int) -> RepResult:
    seed = cfg.seed + rep
    sim = simgen.SimConfig(J=cfg.J, M=cfg.M, K=cfg.K, N=cfg.N, dgp=cfg.dgp, seed=seed)
    ds = simgen.simulate(sim)
    train, test = simgen.split(ds, cfg.train_ratio, rng_stream(seed, 5))
    truth = ds.truth
    res = RepResult()
    evals = _test_markets(test, truth, cfg, seed)
    truth_el = None
    if cfg.elasticities:
        spec = Perturbation(pct=cfg.pct)
        truth_el = [elasticity_matrix(truth.predict, m, spec) for m, _ in evals]
    for name in cfg.estimators:
        try:
            fit = fit_estimator(name, train, cfg, seed, truth)
            res.fits[name] = fit
            pred = np.concatenate([fit.predict(m) for m, _ in evals])
            target = np.concatenate([s for _, s in evals])
            res.errors.setdefault((name, "share"), []).append(pred - target)
            if cfg.elasticities and name != "mean":
                own, cross = [], []
                for (m, _), te in zip(evals, truth_el):
                    em = elasticity_matrix(fit.predict, m, spec)
                    d = em.values - te.values
                    ok = ~(em.undefined | te.undefined)
                    off = ~np.eye(m.J, dtype=bool)
                    own.append(np.diag(d)[np.diag(ok)])
                    cross.append(d[off & ok])
                res.errors.setdefault((name, "own_elasticity"), []).append(np.concatenate(own))
                res.errors.setdefault((name, "cross_elasticity"), []).append(np.concatenate(cross))
        except Exception as exc:  # recorded per row; the run continues
            log.warning("estimator %s failed in replication %d: %s", name, rep, exc)
            res.failures[name] = f"{type(exc).__name__}: {exc}"
    return res


def aggregate(cfg: BenchmarkConfig, reps: list[RepResult]) -> list[MetricRow]:
    rows = []
    for q in QUANTITIES:
        for name in cfg.estimators:
            if q != "share" and (name == "mean" or not cfg.elasticities):
                continue
            errs = [e for r in reps for e in r.errors.get((name, q), [])]
            fails = sorted({r.failures[name] for r in reps if name in r.failures})
            if errs:
                e = np.concatenate(errs)
                mae, rmse = float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e**2)))
                n = int(e.size)
            else:
                mae = rmse = float("nan")
                n = 0
            rows.append(MetricRow(q, cfg.dgp, cfg.J, cfg.M, cfg.K, name, mae, rmse, n, "; ".join(fails)))
    return rows


def benchmark_run(cfg: BenchmarkConfig, workers: int = 1) -> list[MetricRow]:
    """Replicate generate/split/fit/evaluate ``cfg.reps`` times and pool errors."""
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            reps = list(ex.map(run_replication, [cfg] * cfg.reps, range(cfg.reps)))
    else:
        reps = [run_replication(cfg, r) for r in range(cfg.reps)]
    return aggregate(cfg, reps)


def rows_by_key(rows: list[MetricRow]) -> dict:
    return {(r.quantity, r.estimator): r for r in rows}


def elasticity_curve(fits: dict, markets, truth, pct: float = 0.01):
    """Elasticity-vs-price curve: per market, the top-priced product's price and own elasticity.

    Returns rows ``(market_id, price, estimator, own_elasticity, other_price, cross_elasticity)``.
    The cross entry is the top product's share response to the other product's price.
    """
    spec = Perturbation(pct=pct)
    rows = []
    predictors = {"true": truth.predict, **{k: v.predict for k, v in fits.items()}}
    for m in markets:
        top = int(np.argmax(m.prices))
        other = 1 - top if m.J == 2 else None
        for name, fn in predictors.items():
            em = elasticity_matrix(fn, m, spec)
            cross = float(em.values[top, other]) if other is not None else float("nan")
            rows.append((int(m.market_id), float(m.prices[top]), name, float(em.values[top, top]),
                         float(m.prices[other]) if other is not None else float("nan"), cross))
    return rows


def check_finite(values, what: str):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite {what}")
