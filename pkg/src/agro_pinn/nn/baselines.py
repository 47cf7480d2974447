"""Reference baselines: a transformer encoder regressor and ordinary least squares."""

from __future__ import annotations

import numpy as np

from ..errors import DataError, NumericError
from . import layers as L


def init_transformer(n_features: int, width: int = 128, n_layers: int = 2, kernel: int = 3,
                     ffn_dim: int | None = None, mlp_dim: int = 64, seed: int = 0) -> dict:
    """Seeded parameters for :func:`transformer_encoder_forward`."""
    if kernel % 2 == 0:
        raise DataError("convolution kernel size must be odd")
    rng = np.random.default_rng(seed)
    ffn_dim = ffn_dim or 2 * width
    p = {
        "conv.w": L.uniform_init(rng, (kernel, n_features, width), kernel * n_features),
        "conv.b": L.uniform_init(rng, (width,), kernel * n_features),
    }
    for i in range(n_layers):
        for name in ("q", "k", "v", "o"):
            p[f"enc{i}.w{name}"] = L.uniform_init(rng, (width, width), width)
        p[f"enc{i}.ln1.gamma"] = np.ones(width)
        p[f"enc{i}.ln1.beta"] = np.zeros(width)
        p[f"enc{i}.ff1.w"] = L.uniform_init(rng, (width, ffn_dim), width)
        p[f"enc{i}.ff1.b"] = L.uniform_init(rng, (ffn_dim,), width)
        p[f"enc{i}.ff2.w"] = L.uniform_init(rng, (ffn_dim, width), ffn_dim)
        p[f"enc{i}.ff2.b"] = L.uniform_init(rng, (width,), ffn_dim)
        p[f"enc{i}.ln2.gamma"] = np.ones(width)
        p[f"enc{i}.ln2.beta"] = np.zeros(width)
    p["mlp1.w"] = L.uniform_init(rng, (width, mlp_dim), width)
    p["mlp1.b"] = L.uniform_init(rng, (mlp_dim,), width)
    p["mlp2.w"] = L.uniform_init(rng, (mlp_dim, 1), mlp_dim)
    p["mlp2.b"] = L.uniform_init(rng, (1,), mlp_dim)
    return p


def conv1d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 1-d convolution over time; ``x`` is ``(T, F)``, ``w`` is ``(K, F, D)``."""
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (0, 0)))
    out = np.tile(b, (x.shape[0], 1)).astype(float)
    for j in range(k):
        out += xp[j:j + x.shape[0]] @ w[j]
    return out


def transformer_encoder_forward(params: dict, inputs: np.ndarray) -> float:
    """Yield prediction for one ``(T, F)`` sequence.

    Convolutional projection to the model width, post-norm encoder layers with
    single-head self-attention and a ReLU feed-forward block, mean pooling
    over time, then a ReLU MLP to a scalar.
    """
    inputs = np.asarray(inputs, dtype=float)
    w = params["conv.w"]
    if inputs.ndim != 2 or inputs.shape[1] != w.shape[1]:
        raise DataError(f"expected inputs (T, {w.shape[1]}), got {inputs.shape}")
    if inputs.shape[0] < 1:
        raise DataError("empty sequence")
    h = conv1d_same(inputs, w, params["conv.b"])
    i = 0
    while f"enc{i}.wq" in params:
        pre = f"enc{i}."
        ctx, _, _ = L.attention_forward(h @ params[pre + "wq"], h @ params[pre + "wk"], h @ params[pre + "wv"])
        h = L.layernorm_forward(h + ctx @ params[pre + "wo"], params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
        ff = np.maximum(h @ params[pre + "ff1.w"] + params[pre + "ff1.b"], 0.0)
        ff = ff @ params[pre + "ff2.w"] + params[pre + "ff2.b"]
        h = L.layernorm_forward(h + ff, params[pre + "ln2.gamma"], params[pre + "ln2.beta"])
        i += 1
    pooled = h.mean(axis=0)
    z = np.maximum(pooled @ params["mlp1.w"] + params["mlp1.b"], 0.0)
    return float((z @ params["mlp2.w"] + params["mlp2.b"])[0])


# ------------------------------------------------------------------ linear regression

JITTER = 1e-8


def linear_regression_fit(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Least squares through the normal equations.

    The system is solved exactly when it is well conditioned; a ridge jitter
    of 1e-8 on the diagonal is added only to rescue a singular system.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if y.shape != (n,):
        raise DataError(f"y has shape {y.shape}, expected ({n},)")
    if n <= d:
        raise DataError(f"need more samples than features (N={n}, D={d})")
    design = np.hstack([x, np.ones((n, 1))])
    gram = design.T @ design
    rhs = design.T @ y
    if np.linalg.cond(gram) < 1e12:
        coef = np.linalg.solve(gram, rhs)
    else:
        jittered = gram + JITTER * np.eye(d + 1)
        if np.linalg.cond(jittered) >= 1e15:
            raise NumericError("design matrix is rank deficient beyond jitter rescue")
        coef = np.linalg.solve(jittered, rhs)
    return coef[:d], float(coef[d])


def linear_regression_predict(x: np.ndarray, weights: np.ndarray, bias: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (x[:, None] if x.ndim == 1 else x) @ weights + bias


def flatten_sequences(x: np.ndarray, mask: np.ndarray, fill: np.ndarray | None = None):
    """Flatten ``(B, T, F)`` to ``(B, T*F)``, filling padded steps with per-step feature means.

    Returns the flat matrix and the fill values so test data can reuse the
    training means.
    """
    if fill is None:
        counts = mask.sum(axis=0)[:, None]
        sums = np.where(mask[..., None], x, 0.0).sum(axis=0)
        fill = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    filled = np.where(mask[..., None], x, fill[None, :x.shape[1]])
    return filled.reshape(len(x), -1), fill
