"""Automobile-style product data: loading, BLP instruments, synthetic fixture.

CSV schema, one row per (model, year):

    year, firm_id, model_name, price, horsepower, space, mpd, ac, share,
    region, wage, exchange_rate

``price`` is in $1000s, ``mpd`` is miles per dollar and ``ac`` a 0/1 flag.
Each year is one market. ``wage`` and ``exchange_rate`` are cost shifters
for the producing region in that year and are passed through as instruments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import ConfigError, DataValidationError, SchemaError
from .market import Dataset, Market
from .nncore import rng_stream

AUTO_COLUMNS = (
    "year", "firm_id", "model_name", "price", "horsepower", "space", "mpd", "ac", "share",
    "region", "wage", "exchange_rate",
)
CHARACTERISTICS = ("horsepower", "space", "mpd", "ac")
COST_SHIFTERS = ("wage", "exchange_rate")


@dataclass(frozen=True)
class AutoRecord:
    year: int
    firm_id: int
    model_name: str
    price: float
    horsepower: float
    space: float
    mpd: float
    ac: float
    share: float
    region: str
    wage: float
    exchange_rate: float

    def characteristics(self) -> list:
        return [self.horsepower, self.space, self.mpd, self.ac]


@dataclass
class AutoData:
    """Records grouped by year; ``markets[t]`` rows follow ``groups[t]``."""

    records: list
    groups: list  # per market: list of record indices
    markets: list

    @property
    def years(self) -> list:
        return [m.market_id for m in self.markets]

    def firms(self, t: int) -> np.ndarray:
        return np.array([self.records[i].firm_id for i in self.groups[t]])

    def cost_shifters(self, t: int) -> np.ndarray:
        return np.array([[self.records[i].wage, self.records[i].exchange_rate] for i in self.groups[t]])

    def dataset(self) -> Dataset:
        return Dataset(list(self.markets), meta={"source": "autos"})


def _num(row: dict, col: str, idx: int) -> float:
    try:
        v = float(row[col])
    except (TypeError, ValueError):
        raise DataValidationError(f"row {idx}: column {col!r} is not numeric ({row[col]!r})") from None
    if not math.isfinite(v):
        raise DataValidationError(f"row {idx}: column {col!r} is not finite")
    return v


def records_to_data(records: list) -> AutoData:
    years = sorted({r.year for r in records})
    groups, markets = [], []
    for y in years:
        idx = [i for i, r in enumerate(records) if r.year == y]
        total = sum(records[i].share for i in idx)
        if total >= 1.0:
            raise DataValidationError(f"year {y}: market shares sum to {total:.4f} >= 1")
        recs = [records[i] for i in idx]
        markets.append(Market(
            prices=[r.price for r in recs],
            features=np.array([r.characteristics() for r in recs], dtype=np.float64),
            shares=[r.share for r in recs],
            market_id=y,
            product_ids=np.array(idx),
        ))
        groups.append(idx)
    data = AutoData(records, groups, markets)
    for t, Z in enumerate(build_blp_instruments(data)):
        data.markets[t].instruments = Z
    return data


def load_auto_csv(path) -> AutoData:
    """Read and validate an automobile CSV; every year becomes one market with BLP instruments."""
    header, rows = io.read_csv(path)
    missing = [c for c in AUTO_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    records = []
    for i, row in enumerate(rows):
        price = _num(row, "price", i)
        share = _num(row, "share", i)
        if price <= 0:
            raise DataValidationError(f"row {i}: price must be positive, got {price}")
        if not 0.0 < share < 1.0:
            raise DataValidationError(f"row {i}: share must lie in (0, 1), got {share}")
        year = _num(row, "year", i)
        firm = _num(row, "firm_id", i)
        records.append(AutoRecord(
            int(year), int(firm), row["model_name"], price,
            _num(row, "horsepower", i), _num(row, "space", i), _num(row, "mpd", i), _num(row, "ac", i),
            share, row["region"], _num(row, "wage", i), _num(row, "exchange_rate", i),
        ))
    if not records:
        raise DataValidationError(f"{path}: no data rows")
    return records_to_data(records)


def write_auto_csv(path, records) -> None:
    rows = [[getattr(r, c) for c in AUTO_COLUMNS] for r in records]
    io.write_csv(path, AUTO_COLUMNS, rows)


def blp_instruments(features: np.ndarray, firms, cost=None) -> np.ndarray:
    """Own-firm-other and rival sums per characteristic, then cost shifters.

    Columns: ``Z1_c`` for each characteristic, ``Z2_c`` for each, then the
    cost-shifter columns unchanged.
    """
    X = np.asarray(features, dtype=np.float64)
    firms = np.asarray(firms)
    same = firms[:, None] == firms[None, :]
    own_firm = same.astype(np.float64) @ X  # includes own row
    z1 = own_firm - X
    z2 = X.sum(axis=0, keepdims=True) - own_firm
    parts = [z1, z2]
    if cost is not None:
        parts.append(np.asarray(cost, dtype=np.float64).reshape(X.shape[0], -1))
    return np.hstack(parts)


def instrument_names(chars=CHARACTERISTICS, cost=COST_SHIFTERS) -> list:
    return [*[f"same_firm_{c}" for c in chars], *[f"rival_{c}" for c in chars], *cost]


def build_blp_instruments(data: AutoData) -> list:
    """One (J, 2C + 2) instrument block per market."""
    out = []
    for t, m in enumerate(data.markets):
        firms = data.firms(t)
        if np.unique(firms).size < 2:
            warnings.warn(f"year {m.market_id} has a single firm; rival-sum instruments are all zero",
                          RuntimeWarning, stacklevel=2)
        out.append(blp_instruments(m.features, firms, data.cost_shifters(t)))
    return out


# -- synthetic fixture ----------------------------------------------------------------

REGIONS = ("US", "EU", "JP")


@dataclass(frozen=True)
class SyntheticAutoConfig:
    years: tuple = (1971, 1990)
    n_firms: int = 10
    cars_per_year: tuple = (30, 45)
    price_slope: float = 0.15  # utility per $1000
    xi_sd: float = 1.0
    xi_price: float = 6.0  # price loading on unobserved quality (endogeneity)
    price_noise: float = 0.3
    outside_utility: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.years[1] < self.years[0] or self.n_firms < 1 or self.cars_per_year[0] < 1:
            raise ConfigError("bad synthetic auto configuration")


def synthetic_autos(cfg: SyntheticAutoConfig | None = None) -> list:
    """Records with price correlated with an unobserved quality that also raises shares.

    Price is linear in characteristics, cost shifters and the quality shock;
    utility is logit in characteristics, price and the quality shock.
    """
    cfg = cfg or SyntheticAutoConfig()
    rng = rng_stream(cfg.seed, 501)
    firm_region = [REGIONS[f % len(REGIONS)] for f in range(cfg.n_firms)]
    beta = np.array([0.8, 0.6, 0.5, 0.4])
    records = []
    for year in range(cfg.years[0], cfg.years[1] + 1):
        wage = {r: float(rng.uniform(0.5, 1.5)) for r in REGIONS}
        fx = {r: (1.0 if r == "US" else float(rng.uniform(0.6, 1.4))) for r in REGIONS}
        J = int(rng.integers(cfg.cars_per_year[0], cfg.cars_per_year[1] + 1))
        firms = rng.integers(0, cfg.n_firms, size=J)
        hp = rng.lognormal(0.0, 0.35, size=J)
        space = rng.normal(1.2, 0.2, size=J)
        mpd = rng.lognormal(3.0, 0.25, size=J) / 10.0
        ac = (rng.uniform(size=J) < min(0.9, 0.1 + 0.04 * (year - cfg.years[0]))).astype(float)
        xi = rng.normal(0.0, cfg.xi_sd, size=J)
        w = np.array([wage[firm_region[f]] for f in firms])
        e = np.array([fx[firm_region[f]] for f in firms])
        X = np.column_stack([hp, space, mpd, ac])
        price = -2.0 + 5.0 * hp + 3.0 * space - 1.0 * mpd + 3.0 * ac + 4.0 * w + 4.0 * e \
            + cfg.xi_price * xi + cfg.price_noise * rng.standard_normal(J)
        price = np.maximum(price, 0.5)
        delta = -cfg.outside_utility + (X - X.mean(axis=0)) @ beta - cfg.price_slope * price + xi
        ex = np.exp(delta)
        share = ex / (1.0 + ex.sum())
        for j in range(J):
            f = int(firms[j])
            records.append(AutoRecord(
                year, f, f"F{f}-{year}-{j}", float(price[j]), float(hp[j]), float(space[j]), float(mpd[j]),
                float(ac[j]), float(share[j]), firm_region[f], float(w[j]), float(e[j]),
            ))
    return records


def price_category(price) -> np.ndarray:
    """'high' at $20k and above, 'medium' from $8k, otherwise 'low' (price in $1000s)."""
    p = np.asarray(price, dtype=np.float64)
    return np.where(p >= 20.0, "high", np.where(p >= 8.0, "medium", "low"))


# -- empirical pipeline -----------------------------------------------------------------

CATEGORIES = {"high": (20.0, None), "medium": (8.0, 20.0), "low": (None, 8.0)}


@dataclass
class EmpiricalConfig:
    iv: str = "blp"  # "blp": control function from BLP instruments; "none": raw prices
    first_stage: str = "ols"
    delta: float = 1.0  # $1000 price change
    epochs: int = 1000
    lr: float = 1e-3
    seed: int = 0
    folds: int = 5
    intervals: bool = True

    def __post_init__(self):
        if self.iv not in ("blp", "none"):
            raise ConfigError(f"iv must be 'blp' or 'none', got {self.iv!r}")
        if self.delta <= 0:
            raise ConfigError("price change must be positive")


@dataclass
class EmpiricalResult:
    rows: list  # per (car, year)
    summary: list  # per price category
    first_stage: object | None

    ROW_HEADER = ("year", "firm_id", "model_name", "price", "category", "share", "predicted_share", "own_elasticity")
    SUMMARY_HEADER = ("category", "n", "mean_elasticity", "theta", "se", "ci_lo", "ci_hi")

    def elasticities(self) -> np.ndarray:
        return np.array([r[-1] for r in self.rows])

    def categories(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])


def own_elasticities(model, market: Market, delta: float) -> tuple:
    """Predicted shares and (s(p + delta) - s(p)) / s(p) * p / delta per product, competitors fixed."""
    from . import deepset

    X = market.design()
    own = X.copy()
    own[:, 0] += delta
    s0 = deepset.predict_design(model, X)
    s1 = deepset.predict_design(model, X, own)
    return s0, (s1 - s0) / s0 * X[:, 0] / delta


def run_empirical(data: AutoData, cfg: EmpiricalConfig | None = None) -> EmpiricalResult:
    """Fit the share model (with or without the control function) and report own elasticities."""
    from . import causal, deepset
    from .elastic import Perturbation

    cfg = cfg or EmpiricalConfig()
    ds = data.dataset()
    fs = None
    if cfg.iv == "blp":
        fs = causal.fit_first_stage(ds, spec=cfg.first_stage, column_names=[*CHARACTERISTICS, *instrument_names()],
                                    seed=cfg.seed)
        ds = causal.augment_with_residuals(ds, fs)
    tc = deepset.TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = deepset.fit(ds.markets, cfg=tc)
    rows = []
    for t, m in enumerate(ds.markets):
        s_hat, el = own_elasticities(model, m, cfg.delta)
        cats = price_category(m.prices)
        for j, i in enumerate(data.groups[t]):
            r = data.records[i]
            rows.append((r.year, r.firm_id, r.model_name, r.price, str(cats[j]), r.share, float(s_hat[j]), float(el[j])))
    el_all = np.array([r[-1] for r in rows])
    cat_all = np.array([r[4] for r in rows])
    inference = {}
    if cfg.intervals:
        moments = {
            c: causal.MomentSpec(Perturbation(pct=None, delta=cfg.delta), elasticity=True, price_range=rng)
            for c, rng in CATEGORIES.items() if np.any(cat_all == c)
        }
        hyper = causal.CrossfitHyper(demand=tc, seed=cfg.seed)
        inference = causal.crossfit_multi(ds, cfg.folds, moments, hyper)
    summary = []
    for c in CATEGORIES:
        sel = cat_all == c
        if not np.any(sel):
            continue
        res = inference.get(c)
        summary.append((c, int(sel.sum()), float(el_all[sel].mean()),
                        *( (res.theta, res.se, res.ci_lo, res.ci_hi) if res else (float("nan"),) * 4)))
    return EmpiricalResult(rows, summary, fs)
