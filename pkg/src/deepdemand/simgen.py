"""Synthetic aggregate-share data and ground-truth share/elasticity oracles.

Utility of consumer ``i`` for product ``j`` in market ``m`` is
``alpha_i * g(price) + beta_i . g(x) + eps`` with Type-I extreme value noise and
an outside option of mean utility 0; ``g`` is the identity except in the
nonlinear DGPs, where it transforms every observable (price included). MNL shares are argmax frequencies over
``N`` simulated consumers; RCL shares average the per-consumer logit
probabilities over ``N`` frozen coefficient draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .market import Dataset, Market
from .nncore import rng_stream

DGPS = ("MNL", "RCL", "RCL_LOG", "RCL_SIN", "INATTENTION")

# stream ids; market m uses base + m
_TRUTH_STREAM = 1
_FEATURE_STREAM = 100_000
_NOISE_STREAM = 200_000_000


@dataclass(frozen=True)
class CoefSpec:
    """Coefficient distribution. Second moments are variances."""

    alpha_mean: float = -1.0
    alpha_var: float = 1.0
    beta_mean: float | None = None  # None: each beta_k mean drawn from N(0, 1/(2K))
    beta_var: float = 1.0


COEF_PRESETS = {
    "mnl": CoefSpec(-1.0, 0.0, 1.0, 0.0),
    "rcl": CoefSpec(-1.0, 1.0, None, 1.0),
    "coverage_rcl": CoefSpec(-1.0, 0.5, 1.0, 0.5),
    "coverage_mnl": CoefSpec(-1.0, 0.0, 1.0, 0.0),
}


@dataclass
class SimConfig:
    J: int = 10
    M: int = 100
    K: int = 10
    N: int = 10_000
    dgp: str = "RCL"
    seed: int = 0
    truth_seed: int | None = None  # frozen coefficient draws; defaults to seed
    coef: CoefSpec | None = None

    def __post_init__(self):
        self.dgp = self.dgp.upper()
        if self.dgp not in DGPS:
            raise ConfigError(f"unknown dgp {self.dgp!r}; choose from {DGPS}")
        if self.J < 1 or self.M < 1 or self.K < 0 or self.N < 1:
            raise ConfigError(f"need J>=1, M>=1, K>=0, N>=1 (got J={self.J}, M={self.M}, K={self.K}, N={self.N})")
        if self.dgp == "INATTENTION" and self.K != 0:
            raise ConfigError("inattention DGP is price-only; set K=0")
        if self.coef is None:
            self.coef = COEF_PRESETS["mnl" if self.dgp == "MNL" else "rcl"]

    @property
    def frozen_seed(self) -> int:
        return self.seed if self.truth_seed is None else self.truth_seed


def apply_nonlinear(tag: str | None, x):
    """Feature transform used inside utilities only."""
    if tag is None:
        return x
    x = np.asarray(x, dtype=np.float64)
    if tag == "LOG":
        return np.log(np.abs(16.0 * x - 8.0) + 1.0) * np.sign(x - 0.5)
    if tag == "SIN":
        return np.sin(x)
    raise ConfigError(f"unknown transform {tag!r}")


def _softmax_with_outside(V: np.ndarray) -> np.ndarray:
    """Row-wise logit probabilities for utilities ``V`` (R, J); outside utility 0."""
    top = np.maximum(V.max(axis=1, keepdims=True), 0.0)
    e = np.exp(V - top)
    return e / (np.exp(-top) + e.sum(axis=1, keepdims=True))


@dataclass
class TruthModel:
    """Frozen generative model; ``alpha`` (R,), ``beta`` (R, K)."""

    dgp: str
    alpha: np.ndarray
    beta: np.ndarray
    transform: str | None = None
    inattention: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    def utilities(self, prices, features) -> np.ndarray:
        gx = apply_nonlinear(self.transform, np.asarray(features, dtype=np.float64))
        gp = apply_nonlinear(self.transform, np.asarray(prices, dtype=np.float64))
        return np.outer(self.alpha, gp) + self.beta @ gx.T

    def choice_probs(self, prices, features, exclude: int | None = None) -> np.ndarray:
        V = self.utilities(prices, features)
        if exclude is not None:
            V[:, exclude] = -np.inf
        return _softmax_with_outside(V).mean(axis=0)

    def shares(self, prices, features) -> np.ndarray:
        prices = np.asarray(prices, dtype=np.float64)
        s_all = self.choice_probs(prices, features)
        if not self.inattention or prices.shape[0] < 2:
            return s_all
        top = int(np.argmax(prices))  # ties -> lowest index
        frac = inattentive_fraction(prices[top])
        s_wo = self.choice_probs(prices, features, exclude=top)
        return (1.0 - frac) * s_all + frac * s_wo

    def predict(self, market: Market) -> np.ndarray:
        return self.shares(market.prices, market.features)

    def batch_shares(self, prices, features) -> np.ndarray:
        """Shares for B same-size markets at once: prices (B, J), features (B, J, K) -> (B, J)."""
        if self.inattention:
            raise ConfigError("batched shares do not cover the inattention mixture")
        gp = apply_nonlinear(self.transform, np.asarray(prices, dtype=np.float64))
        gx = apply_nonlinear(self.transform, np.asarray(features, dtype=np.float64))
        B, J = gp.shape
        # (B*J, R) layout keeps the draw axis contiguous for the reductions
        V = (gp.reshape(-1, 1) * self.alpha[None, :]) + gx.reshape(B * J, -1) @ self.beta.T
        V = V.reshape(B, J, -1)
        top = np.maximum(V.max(axis=1, keepdims=True), 0.0)
        e = np.exp(V - top)
        return (e / (np.exp(-top) + e.sum(axis=1, keepdims=True))).mean(axis=2)


def inattentive_fraction(price: float) -> float:
    return 1.0 - 1.0 / (1.0 + price)


def make_truth(config: SimConfig) -> TruthModel:
    c = config.coef
    K = config.K
    rng = rng_stream(config.frozen_seed, _TRUTH_STREAM)
    transform = {"RCL_LOG": "LOG", "RCL_SIN": "SIN"}.get(config.dgp)
    if config.dgp == "MNL" or (c.alpha_var == 0 and c.beta_var == 0 and c.beta_mean is not None):
        alpha = np.array([c.alpha_mean])
        beta = np.full((1, K), c.beta_mean if c.beta_mean is not None else 0.0)
        return TruthModel(config.dgp, alpha, beta, transform, config.dgp == "INATTENTION", {"coef": c})
    if c.beta_mean is None:
        mu_beta = rng.normal(0.0, np.sqrt(1.0 / (2 * K)), size=K) if K else np.zeros(0)
    else:
        mu_beta = np.full(K, c.beta_mean)
    alpha = c.alpha_mean + np.sqrt(c.alpha_var) * rng.standard_normal(config.N)
    beta = mu_beta + np.sqrt(c.beta_var) * rng.standard_normal((config.N, K))
    return TruthModel(config.dgp, alpha, beta, transform, config.dgp == "INATTENTION", {"coef": c, "mu_beta": mu_beta})


def gen_features(config: SimConfig, rng: np.random.Generator | None = None):
    """Prices ~ U[0,4] and features ~ N(0,1); returns arrays (M, J) and (M, J, K)."""
    J, K = config.J, config.K
    prices = np.empty((config.M, J))
    feats = np.empty((config.M, J, K))
    for m in range(config.M):
        r = rng if rng is not None else rng_stream(config.seed, _FEATURE_STREAM + m)
        prices[m] = r.uniform(0.0, 4.0, size=J)
        feats[m] = r.standard_normal((J, K))
    return prices, feats


def argmax_shares(truth: TruthModel, prices, features, n_consumers: int, rng) -> np.ndarray:
    """Fraction of ``n_consumers`` Gumbel draws choosing each product.

    Zero counts (inside goods or outside option) get half a consumer before
    normalising so every share lies strictly inside (0, 1).
    """
    v = np.concatenate([[0.0], truth.utilities(prices, features).mean(axis=0)])
    u = rng.uniform(size=(n_consumers, v.shape[0]))
    gumbel = -np.log(-np.log(u))
    choice = np.argmax(v + gumbel, axis=1)
    counts = np.bincount(choice, minlength=v.shape[0]).astype(np.float64)
    counts[counts == 0] = 0.5
    return (counts / counts.sum())[1:]


def simulate(config: SimConfig, truth: TruthModel | None = None) -> Dataset:
    truth = truth or make_truth(config)
    prices, feats = gen_features(config)
    markets = []
    for m in range(config.M):
        if config.dgp == "MNL":
            s = argmax_shares(truth, prices[m], feats[m], config.N, rng_stream(config.seed, _NOISE_STREAM + m))
        else:
            s = truth.shares(prices[m], feats[m])
        markets.append(Market(prices[m], feats[m], s, market_id=m))
    return Dataset(markets, truth, "all", {"config": config})


def simulate_mnl(config: SimConfig) -> Dataset:
    if config.dgp != "MNL":
        raise ConfigError("simulate_mnl needs dgp='MNL'")
    return simulate(config)


def simulate_rcl(config: SimConfig) -> Dataset:
    if config.dgp not in ("RCL", "RCL_LOG", "RCL_SIN", "INATTENTION"):
        raise ConfigError(f"simulate_rcl does not handle dgp {config.dgp!r}")
    return simulate(config)


def simulate_inattention(config: SimConfig) -> Dataset:
    if config.dgp != "INATTENTION":
        raise ConfigError("simulate_inattention needs dgp='INATTENTION'")
    return simulate(config)


def add_new_product(market: Market, truth: TruthModel, rng: np.random.Generator, features=None, price=None):
    """Append one product drawn like the incumbents and recompute all true shares."""
    K = market.K
    p_new = rng.uniform(0.0, 4.0) if price is None else float(price)
    x_new = rng.standard_normal(K) if features is None else np.asarray(features, dtype=np.float64)
    prices = np.append(market.prices, p_new)
    feats = np.vstack([market.features, x_new.reshape(1, K)])
    s = truth.shares(prices, feats)
    pid = np.append(market.product_ids, int(market.product_ids.max()) + 1 if market.J else 0)
    return Market(prices, feats, s, market.market_id, pid), s


def true_elasticity(truth: TruthModel, market: Market, j: int, k: int, pct: float = 0.01) -> float:
    if pct <= 0:
        raise ConfigError("pct must be positive")
    s0 = truth.shares(market.prices, market.features)
    if s0[j] <= 0:
        raise NumericError(f"true share of product {j} is zero; elasticity undefined")
    p = market.prices.copy()
    p[k] *= 1.0 + pct
    s1 = truth.shares(p, market.features)
    return float((s1[j] - s0[j]) / s0[j] / pct)


def split(dataset: Dataset, ratio: float = 0.8, rng: np.random.Generator | None = None):
    """Random train/test partition by market."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    M = len(dataset)
    n_train = int(round(ratio * M))
    if n_train < 1 or n_train >= M:
        raise ConfigError(f"ratio {ratio} leaves an empty side with {M} markets")
    rng = rng if rng is not None else rng_stream(0, 7)
    perm = rng.permutation(M)
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")
