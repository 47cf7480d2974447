"""Regression metrics for yield predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

REPORT_COLUMNS = ("r2", "mae", "mape", "rmse", "bias")


@dataclass(frozen=True)
class MetricsReport:
    r2: float
    mae: float
    mape: float | None
    rmse: float
    bias: float
    n: int
    pearson: float | None = None
    mape_undefined: bool = False

    def as_row(self) -> list:
        return [self.r2, self.mae, self.mape, self.rmse, self.bias]

    def formatted(self) -> dict:
        mape = "n/a" if self.mape is None else f"{100 * self.mape:.0f}%"
        return {"r2": f"{self.r2:.2f}", "mae": f"{self.mae:.2f}", "mape": mape,
                "rmse": f"{self.rmse:.2f}", "bias": f"{self.bias:.2f}"}


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise DataError("pearson needs two equal-length series of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = np.sqrt((dx ** 2).sum() * (dy ** 2).sum())
    if denom == 0:
        raise DataError("pearson undefined for a constant series")
    return float((dx * dy).sum() / denom)


def r2_score(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    ss_tot = ((target - target.mean()) ** 2).sum()
    if ss_tot == 0:
        raise DataError("r2 undefined for constant targets")
    return float(1.0 - ((target - pred) ** 2).sum() / ss_tot)


def evaluate(pred, target, with_pearson: bool = False) -> MetricsReport:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.ndim != 1:
        raise DataError(f"prediction/target shapes differ: {pred.shape} vs {target.shape}")
    if pred.size < 2:
        raise DataError("need at least two samples")
    err = pred - target
    if np.any(target == 0):
        mape, undefined = None, True
    else:
        mape, undefined = float(np.mean(np.abs(err / target))), False
    return MetricsReport(
        r2=r2_score(pred, target),
        mae=float(np.mean(np.abs(err))),
        mape=mape,
        rmse=float(np.sqrt(np.mean(err ** 2))),
        bias=float(np.mean(err)),
        n=int(pred.size),
        pearson=pearson(pred, target) if with_pearson else None,
        mape_undefined=undefined,
    )
