"""Permutation-invariant share model ``rho(phi1(own) + sum_k phi2(competitor_k))``.

One parameter set serves markets of any size: only the feature width
and the layer widths determine the parameter count.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import ConfigError, CorruptFileError, DataValidationError, NumericError, ShapeError, VersionMismatchError
from .market import Market, Packed, pack

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


@dataclass
class Architecture:
    k_in: int
    embed_dim: int = 32
    phi_hidden: tuple = (64, 64)
    rho_hidden: tuple = (64, 64)
    output_activation: str = "sigmoid"

    def to_dict(self):
        return {
            "k_in": self.k_in,
            "embed_dim": self.embed_dim,
            "phi_hidden": list(self.phi_hidden),
            "rho_hidden": list(self.rho_hidden),
            "output_activation": self.output_activation,
        }


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 500
    batch_markets: int | None = None  # None = full batch
    seed: int = 0
    stream: int = 0
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # final lr as a fraction of the initial one (cosine)


@dataclass
class DeepSetModel:
    phi1: nncore.MlpParams
    phi2: nncore.MlpParams
    rho: nncore.MlpParams
    arch: Architecture
    x_mean: np.ndarray = None
    x_scale: np.ndarray = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.x_mean is None:
            self.x_mean = np.zeros(self.arch.k_in)
        if self.x_scale is None:
            self.x_scale = np.ones(self.arch.k_in)

    @property
    def k_in(self) -> int:
        return self.arch.k_in

    def n_params(self) -> int:
        return self.phi1.n_params() + self.phi2.n_params() + self.rho.n_params()

    def nets(self):
        return (self.phi1, self.phi2, self.rho)

    def predict(self, market: Market) -> np.ndarray:
        return predict_market(self, market)

    def copy(self) -> "DeepSetModel":
        return DeepSetModel(
            self.phi1.copy(), self.phi2.copy(), self.rho.copy(), self.arch,
            self.x_mean.copy(), self.x_scale.copy(), list(self.history),
        )


def build_model(arch: Architecture, rng: np.random.Generator | None = None) -> DeepSetModel:
    if arch.k_in < 1:
        raise ConfigError("deep-set model needs at least one input feature")
    rng = rng if rng is not None else nncore.rng_stream(0)
    phi_sizes = [arch.k_in, *arch.phi_hidden, arch.embed_dim]
    phi1 = nncore.init_params(phi_sizes, "identity", rng)
    phi2 = nncore.init_params(phi_sizes, "identity", rng)
    rho = nncore.init_params([arch.embed_dim, *arch.rho_hidden, 1], arch.output_activation, rng)
    return DeepSetModel(phi1, phi2, rho, arch)


def _check_width(model: DeepSetModel, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != model.k_in:
        raise ShapeError(f"market has {X.shape[-1]} feature columns, model expects {model.k_in}")


def _canonical_order(X: np.ndarray) -> np.ndarray:
    # lexicographic on (col0, col1, ...); identical rows are interchangeable
    return np.lexsort(X.T[::-1]) if X.shape[0] > 1 else np.arange(X.shape[0])


def _embed(model: DeepSetModel, X: np.ndarray):
    Xs = (X - model.x_mean) / model.x_scale
    e1, _ = nncore.mlp_forward(model.phi1, Xs)
    e2, _ = nncore.mlp_forward(model.phi2, Xs)
    return e1, e2


def predict_share(model: DeepSetModel, market: Market, j: int) -> float:
    """Share of product ``j``; competitors pooled in canonical sorted order."""
    X = market.design()
    _check_width(model, X)
    if not 0 <= j < X.shape[0]:
        raise IndexError(f"product index {j} outside market of size {X.shape[0]}")
    own = X[j : j + 1]
    comp = np.delete(X, j, axis=0)
    e1, _ = nncore.mlp_forward(model.phi1, (own - model.x_mean) / model.x_scale)
    if comp.shape[0]:
        comp = comp[_canonical_order(comp)]
        e2, _ = nncore.mlp_forward(model.phi2, (comp - model.x_mean) / model.x_scale)
        pooled = e2.sum(axis=0)
    else:
        pooled = np.zeros(model.arch.embed_dim)
    out, _ = nncore.mlp_forward(model.rho, e1 + pooled)
    return float(out[0, 0])


def predict_design(model: DeepSetModel, X: np.ndarray, own_X: np.ndarray | None = None) -> np.ndarray:
    """Shares for one market's design matrix.

    ``own_X`` optionally replaces each product's own-embedding input while the
    competitor pool is still built from ``X`` (used for own-price shifts).
    """
    X = np.asarray(X, dtype=np.float64)
    _check_width(model, X)
    order = _canonical_order(X)
    Xo = X[order]
    e1, e2 = _embed(model, Xo)
    if own_X is not None:
        own_X = np.asarray(own_X, dtype=np.float64)
        _check_width(model, own_X)
        e1, _ = nncore.mlp_forward(model.phi1, (own_X[order] - model.x_mean) / model.x_scale)
    total = e2.sum(axis=0)
    h = e1 + (total - e2)
    out, _ = nncore.mlp_forward(model.rho, h)
    res = np.empty(X.shape[0])
    res[order] = out[:, 0]
    return res


def predict_market(model: DeepSetModel, market: Market) -> np.ndarray:
    return predict_design(model, market.design())


def forward_packed(model: DeepSetModel, data: Packed, own_X: np.ndarray | None = None):
    """Vectorised forward over many markets; returns predictions and caches."""
    Xs = (data.X - model.x_mean) / model.x_scale
    own = Xs if own_X is None else (own_X - model.x_mean) / model.x_scale
    e1, c1 = nncore.mlp_forward(model.phi1, own)
    e2, c2 = nncore.mlp_forward(model.phi2, Xs)
    pooled = np.add.reduceat(e2, data.starts, axis=0)[data.market_index] - e2
    out, cr = nncore.mlp_forward(model.rho, e1 + pooled)
    return out[:, 0], (c1, c2, cr)


def backward_packed(model: DeepSetModel, data: Packed, caches, grad_pred: np.ndarray):
    c1, c2, cr = caches
    g_rho, dh = nncore.mlp_backward(model.rho, cr, grad_pred[:, None])
    g_phi1, _ = nncore.mlp_backward(model.phi1, c1, dh)
    # each competitor embedding feeds every other product of its market
    dpool = np.add.reduceat(dh, data.starts, axis=0)[data.market_index] - dh
    g_phi2, _ = nncore.mlp_backward(model.phi2, c2, dpool)
    return g_phi1, g_phi2, g_rho


def fit_scaler(model: DeepSetModel, X: np.ndarray) -> None:
    model.x_mean = X.mean(axis=0)
    sd = X.std(axis=0)
    model.x_scale = np.where(sd > 1e-12, sd, 1.0)


def _warm_start(model: DeepSetModel, y: np.ndarray | None) -> None:
    """Start from a constant predictor (mean share, or 0 without targets) with a damped pooled sum.

    Without this the sum over many competitor embeddings saturates the
    sigmoid at initialisation and the ReLU units die.
    """
    for phi in (model.phi1, model.phi2):
        phi.weights[-1] *= 0.1
    model.rho.weights[-1][:] = 0.0
    if y is None:
        model.rho.biases[-1][:] = 0.0
    elif model.arch.output_activation == "sigmoid":
        ybar = float(np.clip(np.mean(y), 1e-6, 1 - 1e-6))
        model.rho.biases[-1][:] = np.log(ybar / (1.0 - ybar))
    else:
        model.rho.biases[-1][:] = float(np.mean(y))


def _batches(n_markets: int, batch_markets: int | None, rng: np.random.Generator):
    if batch_markets is None or batch_markets >= n_markets:
        yield None
        return
    order = rng.permutation(n_markets)
    for s in range(0, n_markets, batch_markets):
        yield np.sort(order[s : s + batch_markets])


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay >= 1.0 or cfg.epochs <= 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    lo = cfg.lr * cfg.lr_decay
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + np.cos(np.pi * frac))


def train(
    model: DeepSetModel,
    markets,
    cfg: TrainConfig | None = None,
    *,
    loss_grad=None,
    fit_inputs: bool = True,
    warm_start: bool = True,
    on_epoch=None,
) -> DeepSetModel:
    """Minimise mean squared share error over all (product, market) rows.

    ``loss_grad(model, packed) -> (loss, grads)`` swaps in another objective;
    the Riesz fit uses this. ``on_epoch(epoch, model)`` runs after each epoch
    and stops training early by returning True. Training mutates and returns
    ``model``.
    """
    cfg = cfg or TrainConfig()
    markets = list(markets)
    if not markets:
        raise DataValidationError("training needs at least one market")
    if loss_grad is None:
        for m in markets:
            m.validate_shares()
    has_y = all(m.shares is not None for m in markets)
    full = pack(markets, with_shares=has_y)
    _check_width(model, full.X)
    if fit_inputs:
        fit_scaler(model, full.X)
    if warm_start:
        _warm_start(model, full.y if loss_grad is None else None)
    objective = loss_grad or mse_loss_grad
    rng = nncore.rng_stream(cfg.seed, cfg.stream + 1_000_003)
    states = [nncore.AdamState.for_params(p) for p in model.nets()]
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        for idx in _batches(len(markets), cfg.batch_markets, rng):
            data = full if idx is None else pack([markets[i] for i in idx], with_shares=has_y)
            loss, grads = objective(model, data)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            for p, g, st in zip(model.nets(), grads, states):
                if cfg.weight_decay:
                    for w, gw in zip(p.weights, g.weights):
                        gw += cfg.weight_decay * w
                nncore.adam_step(p, g, st, lr)
        loss, _ = objective(model, full, need_grad=False)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        history.append(float(loss))
        if on_epoch is not None and on_epoch(epoch, model):
            break
    model.history = history
    _soft_monotonic_check(history)
    return model


def _soft_monotonic_check(history, window: int = 50):
    for s in range(0, len(history) - window, window):
        if history[s + window] > history[s]:
            warnings.warn(f"training loss rose over epochs {s}-{s + window}", RuntimeWarning, stacklevel=3)
            return


def mse_loss_grad(model: DeepSetModel, data: Packed, need_grad: bool = True):
    pred, caches = forward_packed(model, data)
    err = pred - data.y
    loss = float(np.mean(err**2))
    if not need_grad:
        return loss, None
    return loss, backward_packed(model, data, caches, 2.0 * err / err.shape[0])


def fit(markets, arch: Architecture | None = None, cfg: TrainConfig | None = None) -> DeepSetModel:
    """Build and train a share model on ``markets``."""
    markets = list(markets)
    cfg = cfg or TrainConfig()
    k_in = markets[0].design().shape[1]
    arch = arch or Architecture(k_in)
    model = build_model(arch, nncore.rng_stream(cfg.seed, cfg.stream))
    return train(model, markets, cfg)


def save(model: DeepSetModel, path) -> None:
    blob = {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "x_mean": model.x_mean.tolist(),
        "x_scale": model.x_scale.tolist(),
        "phi1": model.phi1.to_dict(),
        "phi2": model.phi2.to_dict(),
        "rho": model.rho.to_dict(),
    }
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(blob))


def load(path) -> DeepSetModel:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        blob = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: truncated or corrupt model file ({exc})") from exc
    if blob.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: model format {blob.get('format_version')!r}, expected {MODEL_FORMAT_VERSION}")
    try:
        a = blob["architecture"]
        arch = Architecture(
            int(a["k_in"]), int(a["embed_dim"]), tuple(a["phi_hidden"]), tuple(a["rho_hidden"]), a["output_activation"]
        )
        model = DeepSetModel(
            nncore.MlpParams.from_dict(blob["phi1"]),
            nncore.MlpParams.from_dict(blob["phi2"]),
            nncore.MlpParams.from_dict(blob["rho"]),
            arch,
            np.asarray(blob["x_mean"], dtype=np.float64),
            np.asarray(blob["x_scale"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: malformed model file ({exc})") from exc
    return model
