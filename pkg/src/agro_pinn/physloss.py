"""Two-component training objective: yield MSE plus ETa bound penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    total: float
    data_term: float
    physics_term: float
    lower: np.ndarray
    upper: np.ndarray
    within: np.ndarray


def bound_cases(eta: np.ndarray, etx: np.ndarray):
    """Boolean masks ``(below, above, within)``; they partition every element."""
    below = eta < 0
    above = eta > etx
    within = ~below & ~above
    return below, above, within


def _check(y_hat, y_a, eta, etx, mask):
    y_hat, y_a, eta, etx = (np.asarray(a, dtype=float) for a in (y_hat, y_a, eta, etx))
    if y_hat.shape != y_a.shape or y_hat.ndim != 1:
        raise DataError(f"yield shapes differ: {y_hat.shape} vs {y_a.shape}")
    if eta.shape != etx.shape or eta.shape[:1] != y_hat.shape:
        raise DataError(f"ET shapes differ: eta {eta.shape}, etx {etx.shape}, batch {y_hat.shape}")
    if mask is None:
        mask = np.ones(eta.shape, dtype=bool)
    elif mask.shape != eta.shape:
        raise DataError("mask shape differs from eta")
    for name, a in (("y_hat", y_hat), ("y_a", y_a), ("eta", eta), ("etx", etx)):
        if not np.all(np.isfinite(a[mask] if a.shape == mask.shape else a)):
            raise NumericError(f"non-finite values in {name}")
    if np.any(etx[mask] < 0):
        raise DataError("etx must be non-negative")
    return y_hat, y_a, eta, etx, mask


def total_loss(y_hat, y_a, eta, etx, cfg: LossConfig = LossConfig(), mask=None) -> LossBreakdown:
    """Weighted sum of the yield MSE and the mean per-step bound penalty.

    ``mask`` (same shape as ``eta``) excludes padded steps from the physics mean.
    """
    y_hat, y_a, eta, etx, mask = _check(y_hat, y_a, eta, etx, mask)
    below, above, within = bound_cases(eta, etx)
    sq_gap = (eta - etx) ** 2
    lower = np.where(below & mask, eta ** 2, 0.0)
    upper = np.where(above & mask, sq_gap, 0.0)
    inside = np.where(within & mask, sq_gap, 0.0)
    data_term = float(np.mean((y_hat - y_a) ** 2))
    physics_term = float((lower + upper + inside).sum() / mask.sum())
    total = cfg.lambda1 * data_term + cfg.lambda2 * physics_term
    return LossBreakdown(total, data_term, physics_term, lower, upper, inside)


def total_loss_grad(y_hat, y_a, eta, etx, cfg: LossConfig = LossConfig(), mask=None):
    """Loss breakdown plus ``(d total / d y_hat, d total / d eta)``.

    Ties at ``eta == 0`` or ``eta == etx`` take the within-bounds branch.
    """
    breakdown = total_loss(y_hat, y_a, eta, etx, cfg, mask)
    y_hat, y_a, eta, etx, mask = _check(y_hat, y_a, eta, etx, mask)
    below, _, _ = bound_cases(eta, etx)
    d_yhat = cfg.lambda1 * 2.0 * (y_hat - y_a) / y_hat.size
    d_eta = np.where(below, 2.0 * eta, 2.0 * (eta - etx))
    d_eta = np.where(mask, d_eta, 0.0) * (cfg.lambda2 / mask.sum())
    return breakdown, d_yhat, d_eta
