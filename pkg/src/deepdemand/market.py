"""Market and dataset containers.

Design-matrix column order is fixed: ``price, x1..xK[, mu]``. Price is
always column 0; the control-function residual, when attached, is last.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataValidationError, ShapeError

PRICE_COL = 0


@dataclass
class Market:
    prices: np.ndarray
    features: np.ndarray
    shares: np.ndarray | None = None
    market_id: int = 0
    product_ids: np.ndarray | None = None
    mu: np.ndarray | None = None
    instruments: np.ndarray | None = None

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=np.float64).reshape(-1)
        J = self.prices.shape[0]
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats.reshape(J, -1) if feats.size or J == 0 else np.zeros((J, 0))
        if self.shares is not None:
            self.shares = np.asarray(self.shares, dtype=np.float64).reshape(-1)
            if self.shares.shape[0] != J:
                raise ShapeError(f"market {self.market_id}: {self.shares.shape[0]} shares for {J} products")
        if self.product_ids is None:
            self.product_ids = np.arange(J)
        if self.mu is not None:
            self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
            if self.mu.shape[0] != J:
                raise ShapeError(f"market {self.market_id}: residual column has wrong length")

    @property
    def J(self) -> int:
        return self.prices.shape[0]

    @property
    def K(self) -> int:
        return self.features.shape[1]

    def design(self) -> np.ndarray:
        cols = [self.prices[:, None], self.features]
        if self.mu is not None:
            cols.append(self.mu[:, None])
        return np.hstack(cols)

    def with_prices(self, prices) -> "Market":
        return replace(self, prices=np.asarray(prices, dtype=np.float64).copy())

    def validate_shares(self) -> None:
        s = self.shares
        if s is None:
            raise DataValidationError(f"market {self.market_id} has no shares")
        if np.any(s <= 0) or np.any(s >= 1):
            raise DataValidationError(f"market {self.market_id}: shares must lie strictly inside (0, 1)")
        if s.sum() >= 1:
            raise DataValidationError(f"market {self.market_id}: shares sum to {s.sum():.4f} >= 1")


@dataclass
class Dataset:
    markets: list[Market]
    truth: object | None = None
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.markets)

    @property
    def n_rows(self) -> int:
        return sum(m.J for m in self.markets)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset([self.markets[i] for i in idx], self.truth, split or self.split, dict(self.meta))


@dataclass
class Packed:
    """Markets stacked row-wise; rows of one market are contiguous."""

    X: np.ndarray
    y: np.ndarray | None
    starts: np.ndarray  # first row of each market
    market_index: np.ndarray  # row -> position of its market

    @property
    def n_markets(self) -> int:
        return self.starts.shape[0]


def pack(markets, with_shares: bool = True) -> Packed:
    if not markets:
        raise DataValidationError("no markets to pack")
    X = np.vstack([m.design() for m in markets])
    y = np.concatenate([m.shares for m in markets]) if with_shares else None
    sizes = np.array([m.J for m in markets])
    if np.any(sizes == 0):
        raise DataValidationError("empty market in dataset")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    market_index = np.repeat(np.arange(len(markets)), sizes)
    return Packed(X, y, starts, market_index)
