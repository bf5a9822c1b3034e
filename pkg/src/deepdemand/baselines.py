"""Comparator estimators: logit, random-coefficients logit, stacked MLP, mean.

All fits expose ``predict(market) -> shares`` so they plug into the
elasticity and benchmark code the same way the deep-set model does. Only
raw price and features are used; a control-function column is ignored.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import nncore
from .errors import ConfigError, InversionError, StructuralError
from .market import Market
from .simgen import _softmax_with_outside

log = logging.getLogger(__name__)


def _stack(markets):
    P = np.concatenate([m.prices for m in markets])
    X = np.vstack([m.features for m in markets])
    y = np.concatenate([m.shares for m in markets])
    sizes = np.array([m.J for m in markets])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    mi = np.repeat(np.arange(len(markets)), sizes)
    return P, X, y, starts, mi


def logit_shares(alpha: float, beta, prices, features) -> np.ndarray:
    v = alpha * np.asarray(prices) + np.asarray(features) @ np.asarray(beta)
    return _softmax_with_outside(v[None, :])[0]


@dataclass
class MnlFit:
    alpha: float
    beta: np.ndarray

    def predict(self, market: Market) -> np.ndarray:
        return logit_shares(self.alpha, self.beta, market.prices, market.features)

    def to_dict(self):
        return {"estimator": "mnl", "alpha": self.alpha, "beta": self.beta.tolist()}


def fit_mnl(markets) -> MnlFit:
    """OLS of ``log(s_j / s_0)`` on price and features (no intercept)."""
    markets = list(markets)
    rows, targets = [], []
    for m in markets:
        s0 = 1.0 - m.shares.sum()
        if s0 <= 0 or np.any(m.shares <= 0):
            raise InversionError(f"market {m.market_id}: outside share {s0:.4g} or an inside share is not positive")
        rows.append(np.column_stack([m.prices, m.features]))
        targets.append(np.log(m.shares / s0))
    A = np.vstack(rows)
    coef, *_ = np.linalg.lstsq(A, np.concatenate(targets), rcond=None)
    return MnlFit(float(coef[0]), coef[1:].copy())


# -- random coefficients ----------------------------------------------------


@dataclass
class RclFit:
    alpha_mean: float
    beta_mean: np.ndarray
    alpha_sd: float
    beta_sd: np.ndarray
    draws: np.ndarray  # (R, 1+K) standard normals, frozen
    objective: float = float("nan")
    converged: bool = True
    message: str = ""

    @property
    def R(self) -> int:
        return self.draws.shape[0]

    def coefficients(self):
        a = self.alpha_mean + self.alpha_sd * self.draws[:, 0]
        b = self.beta_mean + self.beta_sd * self.draws[:, 1:]
        return a, b

    def predict(self, market: Market) -> np.ndarray:
        a, b = self.coefficients()
        V = np.outer(a, market.prices) + b @ market.features.T
        return _softmax_with_outside(V).mean(axis=0)

    def to_dict(self):
        return {
            "estimator": "rcl",
            "alpha_mean": self.alpha_mean,
            "beta_mean": self.beta_mean.tolist(),
            "alpha_sd": self.alpha_sd,
            "beta_sd": self.beta_sd.tolist(),
            "R": self.R,
            "objective": self.objective,
            "converged": self.converged,
        }


def _rcl_shares(P, X, starts, mi, a, b):
    """Per-draw shares (n, R) for stacked rows."""
    delta = np.outer(P, a) + X @ b.T
    top = np.maximum(np.maximum.reduceat(delta, starts, axis=0), 0.0)
    e = np.exp(delta - top[mi])
    denom = np.exp(-top) + np.add.reduceat(e, starts, axis=0)
    return e / denom[mi]


def rcl_objective(markets, alpha_mean, beta_mean, alpha_sd, beta_sd, draws) -> float:
    """Mean squared share error of a normal random-coefficients logit."""
    P, X, y, starts, mi = _stack(list(markets))
    a = alpha_mean + alpha_sd * draws[:, 0]
    b = np.asarray(beta_mean) + np.asarray(beta_sd) * draws[:, 1:]
    s = _rcl_shares(P, X, starts, mi, a, b).mean(axis=1)
    return float(np.mean((s - y) ** 2))


def _rcl_loss_grad(theta, P, X, y, starts, mi, nu, K, fix_sd_zero):
    mu_a, mu_b = theta[0], theta[1 : 1 + K]
    if fix_sd_zero:
        sd_a, sd_b = 0.0, np.zeros(K)
    else:
        sd_a, sd_b = np.exp(theta[1 + K]), np.exp(theta[2 + K :])
    a = mu_a + sd_a * nu[:, 0]
    b = mu_b + sd_b * nu[:, 1:]
    S = _rcl_shares(P, X, starts, mi, a, b)
    R = nu.shape[0]
    s = S.mean(axis=1)
    n = y.shape[0]
    err = s - y
    loss = float(np.mean(err**2))
    g = 2.0 * err / n
    # dL/d delta_kr = s_kr (g_k - sum_{j in market} g_j s_jr) / R
    inner = np.add.reduceat(g[:, None] * S, starts, axis=0)[mi]
    D = S * (g[:, None] - inner) / R
    Dp = D * P[:, None]
    grad = [Dp.sum()]
    grad.extend(X.T @ D.sum(axis=1))
    if not fix_sd_zero:
        grad.append(float((Dp @ nu[:, 0]).sum()) * sd_a)
        grad.extend(((D @ nu[:, 1:]) * X).sum(axis=0) * sd_b)
    return loss, np.asarray(grad, dtype=np.float64)


def fit_rcl(markets, R: int = 500, seed: int = 0, fix_sd_zero: bool = False, maxiter: int = 300) -> RclFit:
    """Simulated share matching over means and log standard deviations."""
    if R < 100:
        raise ConfigError(f"need at least 100 simulation draws, got {R}")
    markets = list(markets)
    P, X, y, starts, mi = _stack(markets)
    K = X.shape[1]
    nu = nncore.rng_stream(seed, 31).standard_normal((R, 1 + K))
    try:
        start = fit_mnl(markets)
        theta0 = [start.alpha, *start.beta]
    except InversionError:
        theta0 = [-1.0, *np.zeros(K)]
    if not fix_sd_zero:
        theta0 += [np.log(0.5)] * (1 + K)
    theta0 = np.asarray(theta0, dtype=np.float64)
    bounds = [(None, None)] * (1 + K) + ([] if fix_sd_zero else [(np.log(1e-4), np.log(10.0))] * (1 + K))
    res = optimize.minimize(
        _rcl_loss_grad, theta0, args=(P, X, y, starts, mi, nu, K, fix_sd_zero),
        jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter},
    )
    th = res.x
    if fix_sd_zero:
        sd_a, sd_b = 0.0, np.zeros(K)
    else:
        sd_a, sd_b = float(np.exp(th[1 + K])), np.exp(th[2 + K :])
    if not res.success:
        log.warning("RCL fit did not converge (%s); returning best iterate", res.message)
    return RclFit(float(th[0]), th[1 : 1 + K].copy(), sd_a, sd_b, nu, float(res.fun), bool(res.success), str(res.message))


# -- stacked non-parametric network -------------------------------------------

NP_GRID = {
    "layers": (3, 4, 5),
    "nodes": (64, 128, 256),
    "lr": (1e-2, 1e-3, 1e-4),
    "epochs": (1, 2, 4),
}


@dataclass
class StackedNpModel:
    params: nncore.MlpParams
    J: int
    K: int
    hypers: dict
    x_mean: np.ndarray
    x_scale: np.ndarray
    cv_scores: dict = field(default_factory=dict)

    def _inputs(self, markets) -> np.ndarray:
        rows = []
        for m in markets:
            if m.J != self.J or m.K != self.K:
                raise StructuralError(
                    f"stacked network is built for J={self.J}, K={self.K}; market {m.market_id} has J={m.J}, K={m.K}"
                )
            rows.append(np.column_stack([m.prices, m.features]).ravel())
        return (np.vstack(rows) - self.x_mean) / self.x_scale

    def predict(self, market: Market) -> np.ndarray:
        out, _ = nncore.mlp_forward(self.params, self._inputs([market]))
        return out[0]

    def to_dict(self):
        return {"estimator": "stacked_np", "J": self.J, "K": self.K, "hypers": self.hypers, "mlp": self.params.to_dict()}


def _common_shape(markets):
    Js = {m.J for m in markets}
    Ks = {m.K for m in markets}
    if len(Js) != 1 or len(Ks) != 1:
        raise StructuralError(f"stacked network needs one product count across markets, got J in {sorted(Js)}")
    return Js.pop(), Ks.pop()


def _train_mlp(params, X, Y, lr, epochs, batch, rng):
    state = nncore.AdamState.for_params(params)
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            out, cache = nncore.mlp_forward(params, X[idx])
            grads, _ = nncore.mlp_backward(params, cache, 2.0 * (out - Y[idx]) / out.size)
            nncore.adam_step(params, grads, state, lr)
    return params


def _np_fit_once(X, Y, hyp, seed):
    rng = nncore.rng_stream(seed, 41)
    sizes = [X.shape[1], *([hyp["nodes"]] * hyp["layers"]), Y.shape[1]]
    params = nncore.init_params(sizes, "sigmoid", rng)
    return _train_mlp(params, X, Y, hyp["lr"], hyp["epochs"], hyp.get("batch", 32), rng)


def fit_stacked_np(markets, grid: dict | None = None, folds: int = 5, seed: int = 0, batch: int = 32) -> StackedNpModel:
    """Grid search by k-fold CV over markets, then refit on all of them."""
    markets = list(markets)
    J, K = _common_shape(markets)
    if len(markets) < folds:
        raise ConfigError(f"{folds}-fold CV needs at least {folds} markets")
    grid = grid or NP_GRID
    raw = np.vstack([np.column_stack([m.prices, m.features]).ravel() for m in markets])
    Y = np.vstack([m.shares for m in markets])
    x_mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    x_scale = np.where(sd > 1e-12, sd, 1.0)
    X = (raw - x_mean) / x_scale
    fold_of = nncore.rng_stream(seed, 43).permutation(len(markets)) % folds
    scores = {}
    keys = list(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        hyp = dict(zip(keys, combo), batch=batch)
        errs = []
        for f in range(folds):
            tr, va = fold_of != f, fold_of == f
            params = _np_fit_once(X[tr], Y[tr], hyp, seed + 1000 * f)
            out, _ = nncore.mlp_forward(params, X[va])
            errs.append(np.mean((out - Y[va]) ** 2))
        scores[combo] = float(np.mean(errs))
    best = min(scores, key=scores.get)
    hyp = dict(zip(keys, best), batch=batch)
    params = _np_fit_once(X, Y, hyp, seed)
    return StackedNpModel(params, J, K, hyp, x_mean, x_scale, {str(k): v for k, v in scores.items()})


# -- mean -------------------------------------------------------------------------


@dataclass
class MeanPredictor:
    mean_share: float

    def predict(self, market: Market) -> np.ndarray:
        return np.full(market.J, self.mean_share)

    def to_dict(self):
        return {"estimator": "mean", "mean_share": self.mean_share}


def fit_mean(markets) -> MeanPredictor:
    return MeanPredictor(float(np.mean(np.concatenate([m.shares for m in markets]))))


def fit_to_json(fit) -> str:
    return json.dumps(fit.to_dict())
