"""Control-function first stage and debiased inference on price-change effects.

The target is the average change in a product's share when its own price is
shifted and everything else (competitors, the control-function residual) is
held fixed. Cross-fitting trains the share model and a Riesz representer on
the complement of each fold and scores the held-out rows.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import deepset, nncore, simgen
from .elastic import Perturbation
from .errors import ConfigError, DataValidationError, NumericError, PlanError, ShapeError
from .market import PRICE_COL, Dataset, Market, pack

log = logging.getLogger(__name__)


# -- first stage -------------------------------------------------------------------


@dataclass
class FirstStageFit:
    """Price regression on (1, X, Z) with per-market residuals aligned to the dataset."""

    kind: str
    columns: list
    residuals: list  # one (J,) array per market, dataset order
    market_ids: list
    r2: float
    coef: np.ndarray | None = None
    mlp: nncore.MlpParams | None = None
    scaler: tuple | None = None  # (x_mean, x_scale, p_mean, p_scale) for the MLP

    def predict_prices(self, markets) -> list:
        out = []
        for m in markets:
            A = _regressors(m)
            if self.kind == "ols":
                out.append(A @ self.coef)
            else:
                xm, xs, pm, ps = self.scaler
                pred, _ = nncore.mlp_forward(self.mlp, (A[:, 1:] - xm) / xs)
                out.append(pred[:, 0] * ps + pm)
        return out

    def to_dict(self):
        d = {"kind": self.kind, "columns": list(self.columns), "r2": self.r2}
        if self.coef is not None:
            d["coef"] = self.coef.tolist()
        if self.mlp is not None:
            d["mlp"] = self.mlp.to_dict()
        return d


def _regressors(m: Market) -> np.ndarray:
    if m.instruments is None:
        raise ConfigError(f"market {m.market_id} has no instrument columns")
    Z = np.asarray(m.instruments, dtype=np.float64).reshape(m.J, -1)
    return np.hstack([np.ones((m.J, 1)), m.features, Z])


def _column_names(K: int, L: int, names=None) -> list:
    if names is not None:
        return ["const", *names]
    return ["const", *[f"x{i + 1}" for i in range(K)], *[f"z{i + 1}" for i in range(L)]]


def _collinear_columns(A: np.ndarray, names: list) -> list:
    """Columns that add no rank when appended left to right, with what spans them."""
    out = []
    kept: list[int] = []
    tol = max(A.shape) * np.finfo(float).eps * max(np.linalg.norm(A, 2), 1.0)
    for c in range(A.shape[1]):
        trial = kept + [c]
        sv = np.linalg.svd(A[:, trial], compute_uv=False)
        if sv[-1] <= tol * 1e3:
            coef, *_ = np.linalg.lstsq(A[:, kept], A[:, c], rcond=None) if kept else (np.zeros(0),)
            span = [names[k] for k, b in zip(kept, coef) if abs(b) > 1e-8]
            out.append(f"{names[c]} ~ {' + '.join(span) if span else '0'}")
        else:
            kept.append(c)
    return out


def fit_first_stage(dataset, instruments=None, spec: str = "ols", column_names=None, seed: int = 0) -> FirstStageFit:
    """Regress price on (1, X, Z); residuals are the control-function inputs.

    ``instruments`` optionally gives one (J, L) array per market; otherwise the
    markets' own ``instruments`` are used.
    """
    markets = list(dataset.markets if isinstance(dataset, Dataset) else dataset)
    spec = spec.lower()
    if spec not in ("ols", "mlp"):
        raise ConfigError(f"first-stage spec must be 'ols' or 'mlp', got {spec!r}")
    if instruments is not None:
        if len(instruments) != len(markets):
            raise ShapeError("one instrument block per market required")
        markets = [replace(m, instruments=np.asarray(z, dtype=np.float64).reshape(m.J, -1)) for m, z in zip(markets, instruments)]
    if not markets:
        raise DataValidationError("first stage needs at least one market")
    A = np.vstack([_regressors(m) for m in markets])
    p = np.concatenate([m.prices for m in markets])
    names = _column_names(markets[0].K, A.shape[1] - 1 - markets[0].K, column_names)
    if spec == "ols":
        if np.linalg.matrix_rank(A) < A.shape[1]:
            raise ConfigError("rank-deficient first-stage design; collinear columns: " + "; ".join(_collinear_columns(A, names)))
        coef, *_ = np.linalg.lstsq(A, p, rcond=None)
        fitted = A @ coef
        fit = FirstStageFit("ols", names, [], [m.market_id for m in markets], 0.0, coef=coef)
    else:
        mlp, scaler = _fit_mlp_first_stage(A[:, 1:], p, seed)
        fit = FirstStageFit("mlp", names, [], [m.market_id for m in markets], 0.0, mlp=mlp, scaler=scaler)
        fitted = np.concatenate(fit.predict_prices(markets))
    resid = p - fitted
    tss = float(np.sum((p - p.mean()) ** 2))
    fit.r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0
    sizes = np.cumsum([m.J for m in markets])[:-1]
    fit.residuals = np.split(resid, sizes)
    return fit


def _fit_mlp_first_stage(X, p, seed, hidden=(32, 32), epochs=2000, lr=1e-3):
    xm = X.mean(axis=0)
    sd = X.std(axis=0)
    xs = np.where(sd > 1e-12, sd, 1.0)
    pm, ps = float(p.mean()), float(p.std()) or 1.0
    Xs, ys = (X - xm) / xs, ((p - pm) / ps)[:, None]
    rng = nncore.rng_stream(seed, 61)
    params = nncore.init_params([X.shape[1], *hidden, 1], "identity", rng)
    state = nncore.AdamState.for_params(params)
    for _ in range(epochs):
        out, cache = nncore.mlp_forward(params, Xs)
        grads, _ = nncore.mlp_backward(params, cache, 2.0 * (out - ys) / ys.shape[0])
        nncore.adam_step(params, grads, state, lr)
    return params, (xm, xs, pm, ps)


def augment_with_residuals(dataset: Dataset, fit: FirstStageFit) -> Dataset:
    """Attach the first-stage residual as the last design column of every row."""
    markets = dataset.markets
    if len(fit.residuals) != len(markets):
        raise DataValidationError(f"first stage has {len(fit.residuals)} markets, dataset has {len(markets)}")
    out = []
    for m, mid, r in zip(markets, fit.market_ids, fit.residuals):
        if mid != m.market_id or r.shape[0] != m.J:
            raise DataValidationError(f"first-stage rows do not line up with market {m.market_id}")
        out.append(replace(m, mu=r.copy()))
    return Dataset(out, dataset.truth, dataset.split, dict(dataset.meta))


# -- moment -----------------------------------------------------------------------


@dataclass(frozen=True)
class MomentSpec:
    """Own-price shift; ``elasticity`` rescales each row by p / (step * y).

    The rescaled moment approximates the own-price elasticity while staying
    linear in the share function (the weights use observed shares).
    """

    shift: Perturbation = field(default_factory=Perturbation)
    elasticity: bool = False
    price_range: tuple | None = None  # [lo, hi): average only over rows priced in range

    def selects(self, prices) -> np.ndarray:
        prices = np.asarray(prices, dtype=np.float64)
        if self.price_range is None:
            return np.ones(prices.shape, dtype=bool)
        lo, hi = self.price_range
        return (prices >= (-np.inf if lo is None else lo)) & (prices < (np.inf if hi is None else hi))

    def shifted(self, prices: np.ndarray) -> np.ndarray:
        prices = np.asarray(prices, dtype=np.float64)
        if self.shift.delta is not None:
            return prices + self.shift.delta
        return prices * (1.0 + self.shift.pct)

    def weights(self, prices, shares) -> np.ndarray:
        prices = np.asarray(prices, dtype=np.float64)
        mask = self.selects(prices).astype(np.float64)
        if not self.elasticity:
            return mask
        if shares is None:
            raise DataValidationError("elasticity-scaled moment needs observed shares")
        step = self.shifted(prices) - prices
        with np.errstate(divide="ignore", invalid="ignore"):
            w = prices / (step * np.asarray(shares, dtype=np.float64))
        if not np.all(np.isfinite(w)):
            raise NumericError("elasticity weight undefined (zero price step or zero share)")
        return w * mask


def _predict_fn(predictor):
    if isinstance(predictor, deepset.DeepSetModel):
        return predictor.predict
    if hasattr(predictor, "predict"):
        return predictor.predict
    return predictor


def moment_price_change(predict_fn, market: Market, j: int, spec: MomentSpec | Perturbation | None = None) -> float:
    """pi_j at the shifted own price minus pi_j at the observed one; competitors unchanged."""
    spec = _as_moment(spec)
    fn = _predict_fn(predict_fn)
    p1 = market.prices.copy()
    p1[j] = spec.shifted(market.prices[j])
    diff = float(fn(market.with_prices(p1))[j] - fn(market)[j])
    if spec.elasticity or spec.price_range is not None:
        shares = None if market.shares is None else market.shares[j : j + 1]
        diff *= float(spec.weights(market.prices[j : j + 1], shares)[0])
    return diff


def _as_moment(spec) -> MomentSpec:
    if spec is None:
        return MomentSpec()
    if isinstance(spec, Perturbation):
        return MomentSpec(spec)
    return spec


def moment_values(predictor, market: Market, spec: MomentSpec | None = None) -> np.ndarray:
    """Moment for every product of ``market`` (unweighted differences times weights)."""
    spec = _as_moment(spec)
    if isinstance(predictor, deepset.DeepSetModel):
        X = market.design()
        own = X.copy()
        own[:, PRICE_COL] = spec.shifted(X[:, PRICE_COL])
        diff = deepset.predict_design(predictor, X, own) - deepset.predict_design(predictor, X)
    else:
        fn = _predict_fn(predictor)
        base = np.asarray(fn(market), dtype=np.float64)
        diff = np.empty(market.J)
        for j in range(market.J):
            p1 = market.prices.copy()
            p1[j] = spec.shifted(market.prices[j])
            diff[j] = fn(market.with_prices(p1))[j] - base[j]
    if spec.elasticity or spec.price_range is not None:
        return diff * spec.weights(market.prices, market.shares)
    return diff


# -- Riesz representer ---------------------------------------------------------------


@dataclass
class RieszHyper:
    embed_dim: int = 8
    phi_hidden: tuple = (16, 16)
    rho_hidden: tuple = (16, 16)
    lr: float = 1e-3
    epochs: int = 300
    weight_decay: float = 1e-3
    seed: int = 0
    valid_frac: float = 0.2  # held-out share of training markets for early stopping; 0 disables
    patience: int = 30


@dataclass
class RieszModel:
    net: deepset.DeepSetModel
    moment: MomentSpec
    loss_history: list = field(default_factory=list)  # in units of the rescaled weights
    scale: float = 1.0
    support: tuple | None = None  # training price range the moment term is restricted to

    def predict(self, market: Market) -> np.ndarray:
        return self.scale * deepset.predict_design(self.net, market.design())

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float("nan")


def riesz_loss_grad(model: deepset.DeepSetModel, data, moment: MomentSpec, need_grad: bool = True, scale: float = 1.0,
                    support: tuple | None = None):
    """mean[alpha(z)^2 - 2 w (alpha(z') - alpha(z))], z' = z with own price shifted.

    Row weights ``w`` come from the moment and are divided by ``scale``; the
    minimiser scales linearly with ``w``, so the caller multiplies back. With
    ``support = (lo, hi)`` rows whose shifted price leaves that range drop
    their moment term: there is no data at z' to tie alpha down, and the loss
    is unbounded below through them.
    """
    own = data.X.copy()
    own[:, PRICE_COL] = moment.shifted(data.X[:, PRICE_COL])
    w = moment.weights(data.X[:, PRICE_COL], data.y) / scale
    if support is not None:
        w = w * ((own[:, PRICE_COL] >= support[0]) & (own[:, PRICE_COL] <= support[1]))
    a, c0 = deepset.forward_packed(model, data)
    a1, c1 = deepset.forward_packed(model, data, own)
    n = a.shape[0]
    loss = float(np.mean(a**2 - 2.0 * w * (a1 - a)))
    if not need_grad:
        return loss, None
    g0 = deepset.backward_packed(model, data, c0, (2.0 * a + 2.0 * w) / n)
    g1 = deepset.backward_packed(model, data, c1, -2.0 * w * np.ones(n) / n)
    for ga, gb in zip(g0, g1):
        for k in range(len(ga.weights)):
            ga.weights[k] += gb.weights[k]
            ga.biases[k] += gb.biases[k]
    return loss, g0


def riesz_loss(model, markets, moment: MomentSpec) -> float:
    """Empirical Riesz loss of ``model`` (a RieszModel, or None for alpha = 0)."""
    markets = list(markets)
    data = pack(markets, with_shares=all(m.shares is not None for m in markets))
    if model is None:
        return 0.0
    scale = model.scale
    loss = riesz_loss_grad(model.net, data, moment, need_grad=False, scale=scale, support=model.support)[0]
    return loss * scale**2


def _weight_scale(markets, moment: MomentSpec) -> float:
    """Typical size of weight x price step; alpha scales linearly with both."""
    prices = np.concatenate([m.prices for m in markets])
    w = np.concatenate([moment.weights(m.prices, m.shares) for m in markets])
    mag = float(np.mean(np.abs(w * (moment.shifted(prices) - prices))))
    return mag if mag > 0 else 1.0


def fit_riesz(markets, moment: MomentSpec | None = None, hyper: RieszHyper | None = None) -> RieszModel:
    """Fit alpha by minimising the Riesz loss with a permutation-invariant identity-output net."""
    moment = _as_moment(moment)
    hyper = hyper or RieszHyper()
    markets = list(markets)
    k_in = markets[0].design().shape[1]
    arch = deepset.Architecture(k_in, hyper.embed_dim, tuple(hyper.phi_hidden), tuple(hyper.rho_hidden), "identity")
    net = deepset.build_model(arch, nncore.rng_stream(hyper.seed, 71))
    scale = _weight_scale(markets, moment)
    prices = np.concatenate([m.prices for m in markets])
    support = (float(prices.min()), float(prices.max()))
    trace: list = []

    def objective(model, data, need_grad=True):
        loss, grads = riesz_loss_grad(model, data, moment, need_grad, scale, support)
        trace.append(loss)
        return loss, grads

    # The empirical Riesz loss is unbounded below for a flexible net (alpha can
    # spike at z' while staying small at z), so training stops on held-out loss.
    train_mk, valid = markets, None
    n_valid = int(round(hyper.valid_frac * len(markets)))
    if hyper.valid_frac > 0 and n_valid >= 1 and len(markets) - n_valid >= 1:
        order = nncore.rng_stream(hyper.seed, 73).permutation(len(markets))
        valid = pack([markets[i] for i in np.sort(order[:n_valid])])
        train_mk = [markets[i] for i in np.sort(order[n_valid:])]
    best = {"loss": np.inf, "epoch": -1, "params": None}

    def on_epoch(epoch, model):
        if valid is None:
            return False
        vloss = riesz_loss_grad(model, valid, moment, False, scale, support)[0]
        if vloss < best["loss"]:
            best.update(loss=vloss, epoch=epoch, params=[p.copy() for p in model.nets()])
        return epoch - best["epoch"] >= hyper.patience

    cfg = deepset.TrainConfig(lr=hyper.lr, epochs=hyper.epochs, seed=hyper.seed, stream=72, weight_decay=hyper.weight_decay)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            deepset.train(net, train_mk, cfg, loss_grad=objective, on_epoch=on_epoch)
    except NumericError as exc:
        tail = ", ".join(f"{v:.3g}" for v in trace[-10:])
        raise NumericError(f"Riesz fit diverged ({exc}); last losses: {tail}") from exc
    history = list(net.history)
    if best["params"] is not None:
        net.phi1, net.phi2, net.rho = best["params"]
        history = history[: best["epoch"] + 1]
    return RieszModel(net, moment, history, scale, support)


class ZeroRiesz:
    """alpha = 0: the cross-fit estimate reduces to the plug-in average."""

    def predict(self, market: Market) -> np.ndarray:
        return np.zeros(market.J)


# -- cross-fitting --------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Market-level partition; ``folds[l]`` holds dataset market positions."""

    folds: list

    def validate(self, n_markets: int) -> None:
        if len(self.folds) < 2:
            raise PlanError("cross-fitting needs at least 2 folds")
        allidx = np.concatenate([np.asarray(f, dtype=int) for f in self.folds]) if self.folds else np.zeros(0, int)
        for l, f in enumerate(self.folds):
            if len(f) == 0:
                raise PlanError(f"fold {l} has no held-out markets")
        if allidx.size != n_markets or np.unique(allidx).size != n_markets or allidx.min() < 0 or allidx.max() >= n_markets:
            raise PlanError("folds must be disjoint and cover every market exactly once")

    @classmethod
    def random(cls, n_markets: int, L: int, seed: int = 0) -> "FoldPlan":
        if L < 2:
            raise PlanError(f"need L >= 2 folds, got {L}")
        if n_markets < L:
            raise PlanError(f"{L} folds need at least {L} markets, got {n_markets}")
        perm = nncore.rng_stream(seed, 81).permutation(n_markets)
        return cls([np.sort(perm[l::L]) for l in range(L)])


@dataclass
class CrossfitHyper:
    demand: deepset.TrainConfig = field(default_factory=deepset.TrainConfig)
    riesz: RieszHyper = field(default_factory=RieszHyper)
    seed: int = 0


@dataclass
class InferenceResult:
    theta: float
    V: float
    se: float
    ci_lo: float
    ci_hi: float
    L: int
    n: int
    psi: np.ndarray
    plugin: float
    moments: np.ndarray = None
    corrections: np.ndarray = None

    def to_dict(self):
        return {"theta": self.theta, "V": self.V, "se": self.se, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi, "L": self.L, "n": self.n}

    def covers(self, value: float) -> bool:
        return self.ci_lo <= value <= self.ci_hi


def _fold_seed(base: int, market_ids) -> int:
    """Seed derived from the fold's content so fold order does not matter."""
    ss = np.random.SeedSequence([int(base), *sorted(int(i) for i in market_ids)])
    return int(ss.generate_state(1)[0])


def default_demand_fitter(train_markets, seed: int, hyper: CrossfitHyper):
    cfg = replace(hyper.demand, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return deepset.fit(train_markets, cfg=cfg)


def default_riesz_fitter(train_markets, moment: MomentSpec, seed: int, hyper: CrossfitHyper):
    return fit_riesz(train_markets, moment, replace(hyper.riesz, seed=seed))


def crossfit_debiased(
    dataset,
    L: int = 5,
    moment: MomentSpec | Perturbation | None = None,
    hyper: CrossfitHyper | None = None,
    plan: FoldPlan | None = None,
    demand_fitter=None,
    riesz_fitter=None,
) -> InferenceResult:
    """Cross-fit debiased estimate of the average own-price-shift effect.

    ``demand_fitter(train_markets, seed)`` and ``riesz_fitter(train_markets,
    moment, seed)`` override the default deep-set nuisances; each returns an
    object whose ``predict(market)`` gives per-product values.
    """
    out = crossfit_multi(dataset, L, {"theta": _as_moment(moment)}, hyper, plan, demand_fitter, riesz_fitter)
    return out["theta"]


def crossfit_multi(dataset, L: int, moments: dict, hyper: CrossfitHyper | None = None, plan: FoldPlan | None = None,
                   demand_fitter=None, riesz_fitter=None) -> dict:
    """Several moments sharing one share model per fold; one Riesz fit per moment and fold.

    A moment restricted to a price range targets the average over rows in
    that range: the full-sample score mean is divided by the selected row
    fraction, and the influence values are divided by it as well.
    """
    hyper = hyper or CrossfitHyper()
    markets = list(dataset.markets if isinstance(dataset, Dataset) else dataset)
    if plan is None:
        if L < 2 or len(markets) < L:
            raise PlanError(f"need L >= 2 and at least L markets (L={L}, markets={len(markets)})")
        plan = FoldPlan.random(len(markets), L, hyper.seed)
    plan.validate(len(markets))
    fit_pi = demand_fitter or (lambda tr, s: default_demand_fitter(tr, s, hyper))
    fit_alpha = riesz_fitter or (lambda tr, mom, s: default_riesz_fitter(tr, mom, s, hyper))
    rows = {name: [] for name in moments}  # (market_id, product_id, m, correction, selected)
    for held in plan.folds:
        held = set(int(i) for i in held)
        train = [m for i, m in enumerate(markets) if i not in held]
        test = [markets[i] for i in sorted(held)]
        seed = _fold_seed(hyper.seed, [m.market_id for m in test])
        pi_hat = fit_pi(train, seed)
        preds = [np.asarray(_predict_fn(pi_hat)(mk), dtype=np.float64) for mk in test]
        for name, mom in moments.items():
            alpha_hat = fit_alpha(train, mom, seed)
            for mk, pred in zip(test, preds):
                mv = moment_values(pi_hat, mk, mom)
                corr = np.asarray(alpha_hat.predict(mk), dtype=np.float64) * (mk.shares - pred)
                sel = mom.selects(mk.prices)
                for j in range(mk.J):
                    rows[name].append((mk.market_id, int(mk.product_ids[j]), mv[j], corr[j], bool(sel[j])))
    return {name: _summarise(r, len(plan.folds)) for name, r in rows.items()}


def _summarise(rows, L: int) -> InferenceResult:
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    mvals = np.array([r[2] for r in rows])
    corr = np.array([r[3] for r in rows])
    sel = np.array([r[4] for r in rows])
    score = mvals + corr
    if not np.all(np.isfinite(score)):
        raise NumericError("non-finite debiased score")
    n = score.shape[0]
    frac = float(np.mean(sel))
    if frac == 0:
        raise PlanError("moment selects no rows")
    theta = float(np.mean(score)) / frac
    psi = (score - theta * sel) / frac
    V = float(np.mean(psi**2))
    se = math.sqrt(V / n)
    plugin = float(np.mean(mvals)) / frac
    return InferenceResult(theta, V, se, theta - 1.96 * se, theta + 1.96 * se, L, n, psi, plugin, mvals, corr)


# -- coverage ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoveragePreset:
    name: str
    dgp: str
    J: int = 3
    M: int = 100
    K: int = 5
    N: int = 10_000
    coef: simgen.CoefSpec = simgen.COEF_PRESETS["coverage_rcl"]
    pct: float = 0.01
    truth_seed: int = 12345

    def sim_config(self, seed: int) -> simgen.SimConfig:
        return simgen.SimConfig(J=self.J, M=self.M, K=self.K, N=self.N, dgp=self.dgp, seed=seed,
                                truth_seed=self.truth_seed, coef=self.coef)


COVERAGE_PRESETS = {
    "coverage-rcl": CoveragePreset("coverage-rcl", "RCL", coef=simgen.COEF_PRESETS["coverage_rcl"]),
    "coverage-mnl": CoveragePreset("coverage-mnl", "MNL", coef=simgen.COEF_PRESETS["coverage_mnl"]),
}


def population_effect(truth: simgen.TruthModel, J: int, K: int, moment: MomentSpec | None = None,
                      n_rows: int = 30_000, seed: int = 999_983, batch: int = 64) -> float:
    """Average own-price-shift effect over fresh markets drawn like the simulator's."""
    moment = _as_moment(moment)
    if moment.elasticity:
        raise ConfigError("the population effect is defined for the unscaled moment")
    n_markets = -(-n_rows // J)
    cfg = simgen.SimConfig(J=J, M=n_markets, K=K, N=1, dgp="RCL", seed=seed)
    rng = nncore.rng_stream(seed, 91)
    prices, feats = simgen.gen_features(cfg, rng)
    total = 0.0
    for s in range(0, n_markets, batch):
        P, F = prices[s : s + batch], feats[s : s + batch]
        base = truth.batch_shares(P, F)
        for j in range(J):
            P1 = P.copy()
            P1[:, j] = moment.shifted(P[:, j])
            total += float(np.sum(truth.batch_shares(P1, F)[:, j] - base[:, j]))
    return total / (n_markets * J)


@dataclass
class CoverageResult:
    preset: str
    coverage: float
    mean_bias: float
    theta0: float
    sims: list  # per-sim dicts
    failures: list

    @property
    def n_ok(self) -> int:
        return len(self.sims)

    def standardized(self, key: str = "theta") -> np.ndarray:
        """(estimate - theta0) / se per sim; the plug-in borrows the debiased se."""
        return np.array([(s[key] - self.theta0) / s["se"] for s in self.sims])

    def debiased_skew(self) -> float:
        return _skew(self.standardized("theta"))

    def plugin_skew(self) -> float:
        return _skew(self.standardized("plugin"))

    def summary(self) -> dict:
        return {
            "preset": self.preset, "coverage": self.coverage, "mean_bias": self.mean_bias, "theta0": self.theta0,
            "n_sims": self.n_ok, "n_failed": len(self.failures),
            "debiased_skew": self.debiased_skew(), "plugin_skew": self.plugin_skew(),
        }

    CSV_HEADER = ("sim", "seed", "theta", "se", "ci_lo", "ci_hi", "plugin", "theta0", "covered")

    def csv_rows(self):
        return [[s[k] for k in self.CSV_HEADER] for s in self.sims]


def _skew(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3 or np.std(x) == 0:
        return float("nan")
    z = (x - x.mean()) / x.std()
    return float(np.mean(z**3))


def _one_sim(preset: CoveragePreset, sim: int, seed: int, L: int, hyper: CrossfitHyper, theta0: float):
    ds = simgen.simulate(preset.sim_config(seed))
    res = crossfit_debiased(ds, L, MomentSpec(Perturbation(pct=preset.pct)), replace(hyper, seed=seed))
    return {"sim": sim, "seed": seed, "theta": res.theta, "se": res.se, "ci_lo": res.ci_lo, "ci_hi": res.ci_hi,
            "plugin": res.plugin, "theta0": theta0, "covered": int(res.covers(theta0))}


def _one_sim_safe(args):
    preset, sim, seed, L, hyper, theta0 = args
    try:
        return _one_sim(preset, sim, seed, L, hyper, theta0), None
    except Exception as exc:  # recorded and excluded from the rate
        return None, (sim, f"{type(exc).__name__}: {exc}")


def coverage_experiment(preset: str | CoveragePreset = "coverage-rcl", n_sims: int = 50, L: int = 5,
                        hyper: CrossfitHyper | None = None, seed: int = 0, workers: int = 1,
                        theta0: float | None = None) -> CoverageResult:
    """Repeat simulate -> cross-fit -> CI with frozen true coefficients and fresh features."""
    if isinstance(preset, str):
        if preset not in COVERAGE_PRESETS:
            raise ConfigError(f"unknown coverage preset {preset!r}; choose from {sorted(COVERAGE_PRESETS)}")
        preset = COVERAGE_PRESETS[preset]
    if n_sims < 1:
        raise ConfigError("need at least one simulation")
    hyper = hyper or CrossfitHyper()
    if theta0 is None:
        truth = simgen.make_truth(preset.sim_config(seed))
        theta0 = population_effect(truth, preset.J, preset.K, MomentSpec(Perturbation(pct=preset.pct)))
    jobs = [(preset, s, seed + s, L, hyper, theta0) for s in range(n_sims)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_one_sim_safe, jobs))
    else:
        results = [_one_sim_safe(j) for j in jobs]
    sims = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    for sim, msg in failures:
        warnings.warn(f"coverage sim {sim} failed and is excluded: {msg}", RuntimeWarning, stacklevel=2)
    if not sims:
        raise NumericError("every coverage simulation failed")
    coverage = float(np.mean([s["covered"] for s in sims]))
    bias = float(np.mean([s["theta"] - theta0 for s in sims]))
    return CoverageResult(preset.name, coverage, bias, theta0, sims, failures)
