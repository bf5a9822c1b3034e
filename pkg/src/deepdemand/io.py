"""Atomic file writes and the dataset CSV format.

Dataset CSV columns: ``market_id, product_id, price, x1..xK, share[, mu]``.
One row per product-market, UTF-8, header row. Floats are written with
``repr`` so a write/read cycle is lossless.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import DataValidationError, SchemaError
from .market import Dataset, Market


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, rows_to_csv(header, rows))


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def dataset_to_csv(ds: Dataset) -> str:
    K = ds.markets[0].K if ds.markets else 0
    has_mu = any(m.mu is not None for m in ds.markets)
    header = ["market_id", "product_id", "price", *[f"x{i + 1}" for i in range(K)], "share"]
    if has_mu:
        header.append("mu")
    rows = []
    for m in ds.markets:
        for j in range(m.J):
            row = [int(m.market_id), int(m.product_ids[j]), m.prices[j], *m.features[j], m.shares[j]]
            if has_mu:
                row.append(m.mu[j])
            rows.append(row)
    return rows_to_csv(header, rows)


def write_dataset(path, ds: Dataset) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def read_dataset(path) -> Dataset:
    header, rows = read_csv(path)
    for col in ("market_id", "product_id", "price", "share"):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    xcols.sort(key=lambda h: int(h[1:]))
    has_mu = "mu" in header
    groups: "OrderedDict[int, list[dict]]" = OrderedDict()
    for i, r in enumerate(rows):
        try:
            groups.setdefault(int(r["market_id"]), []).append(r)
        except (TypeError, ValueError):
            raise DataValidationError(f"{path}: row {i}: market_id {r['market_id']!r} is not an integer") from None
    markets = []
    for mid, grp in groups.items():
        try:
            markets.append(_market_from_rows(mid, grp, xcols, has_mu))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataValidationError):
                raise
            raise DataValidationError(f"{path}: market {mid}: unreadable value ({exc})") from None
    return Dataset(markets)


def _market_from_rows(mid, grp, xcols, has_mu) -> Market:
    feats = np.array([[float(r[c]) for c in xcols] for r in grp], dtype=np.float64).reshape(len(grp), len(xcols))
    return Market(
        prices=[float(r["price"]) for r in grp],
        features=feats,
        shares=[float(r["share"]) for r in grp],
        market_id=mid,
        product_ids=np.array([int(r["product_id"]) for r in grp]),
        mu=[float(r["mu"]) for r in grp] if has_mu else None,
    )
