"""Yield response to water: per-step losses, cumulative loss, reconstructed yield."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .fao56 import ETX_FLOOR


@dataclass(frozen=True)
class YieldLossTrace:
    contributions: np.ndarray
    y_l: float
    y_hat: float
    clamped: bool


def step_contributions(ky, eta, etx, eps: float = ETX_FLOOR) -> np.ndarray:
    """``ky * (1 - eta/etx)`` per step; zero where ``etx <= eps``.

    Works on any matching array shapes (a single series or a batch).
    """
    ky, eta, etx = (np.asarray(a, dtype=float) for a in (ky, eta, etx))
    if not ky.shape == eta.shape == etx.shape:
        raise DataError(f"shape mismatch: ky {ky.shape}, eta {eta.shape}, etx {etx.shape}")
    active = etx > eps
    ratio = np.divide(eta, np.maximum(etx, eps))
    return np.where(active, ky * (1.0 - ratio), 0.0)


def yield_loss_trace(ky, eta, etx, y_x: float, clamp: bool = True,
                     literal: bool = False) -> YieldLossTrace:
    """Cumulative relative yield loss for one pixel and the implied yield.

    The yield is ``(1 - y_l) * y_x``. ``literal=True`` instead returns
    ``y_l * y_x`` (the loss in t/ha), kept only for comparison.
    """
    if not y_x > 0:
        raise DataError(f"y_x must be positive, got {y_x}")
    contributions = step_contributions(ky, eta, etx)
    if contributions.ndim != 1:
        raise DataError("yield_loss_trace expects one series per call")
    y_l = float(contributions.sum())
    effective = y_l
    clamped = False
    if clamp and not 0.0 <= y_l <= 1.0:
        effective = min(max(y_l, 0.0), 1.0)
        clamped = True
    y_hat = effective * y_x if literal else (1.0 - effective) * y_x
    return YieldLossTrace(contributions, y_l, y_hat, clamped)


def batch_yield(ky: np.ndarray, eta: np.ndarray, etx: np.ndarray, y_x: float):
    """Unclamped ``(y_hat, y_l)`` for a ``(B, T)`` batch; used inside training."""
    y_l = step_contributions(ky, eta, etx).sum(axis=-1)
    return (1.0 - y_l) * y_x, y_l


def batch_yield_backward(d_yhat: np.ndarray, ky: np.ndarray, eta: np.ndarray,
                         etx: np.ndarray, y_x: float, eps: float = ETX_FLOOR):
    """Gradients of a scalar w.r.t. ``ky`` and ``eta`` given ``d scalar / d y_hat``."""
    active = etx > eps
    inv = np.where(active, 1.0 / np.maximum(etx, eps), 0.0)
    d_contrib = -y_x * d_yhat[..., None]
    d_ky = d_contrib * np.where(active, 1.0 - eta * inv, 0.0)
    d_eta = d_contrib * (-ky * inv)
    return d_ky, d_eta


def cumulative_yield(ky, eta, etx, y_x: float, clamp: bool = True) -> np.ndarray:
    """Yield implied by the partial loss sum after each step, shape ``(..., T)``."""
    partial = np.cumsum(step_contributions(ky, eta, etx), axis=-1)
    if clamp:
        partial = np.clip(partial, 0.0, 1.0)
    return (1.0 - partial) * y_x
