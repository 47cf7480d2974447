"""Forward/backward pairs for the layers of the fixed model graph.

Arrays are batched as ``(B, T, D)``. Every ``*_forward`` returns its output
and a cache consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------------ linear

def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, cache, w):
    x = cache
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T, dw, db


# ------------------------------------------------------------------ LSTM

def lstm_layer_forward(x, w, u, b, h0=None, c0=None):
    """One LSTM layer over ``x`` of shape ``(B, T, D)``; gate order i, f, g, o."""
    n, t_len, _ = x.shape
    hidden = u.shape[0]
    if w.shape != (x.shape[2], 4 * hidden) or u.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise DataError(f"LSTM parameter shapes {w.shape}, {u.shape}, {b.shape} do not match input {x.shape}")
    h = np.zeros((n, hidden)) if h0 is None else h0
    c = np.zeros((n, hidden)) if c0 is None else c0
    xw = x @ w + b
    hs = np.empty((n, t_len, hidden))
    cs = np.empty((n, t_len, hidden))
    gates = np.empty((n, t_len, 4 * hidden))
    h_prev = np.empty((n, t_len, hidden))
    c_prev = np.empty((n, t_len, hidden))
    for t in range(t_len):
        h_prev[:, t] = h
        c_prev[:, t] = c
        z = xw[:, t] + h @ u
        i = sigmoid(z[:, :hidden])
        f = sigmoid(z[:, hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = sigmoid(z[:, 3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        hs[:, t] = h
        cs[:, t] = c
    return hs, (x, gates, cs, h_prev, c_prev)


def lstm_layer_backward(dhs, cache, w, u):
    x, gates, cs, h_prev, c_prev = cache
    n, t_len, hidden = dhs.shape
    dz_all = np.empty_like(gates)
    dh_next = np.zeros((n, hidden))
    dc_next = np.zeros((n, hidden))
    for t in reversed(range(t_len)):
        i = gates[:, t, :hidden]
        f = gates[:, t, hidden:2 * hidden]
        g = gates[:, t, 2 * hidden:3 * hidden]
        o = gates[:, t, 3 * hidden:]
        tc = np.tanh(cs[:, t])
        dh = dhs[:, t] + dh_next
        dc = dh * o * (1.0 - tc ** 2) + dc_next
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev[:, t] * f * (1.0 - f),
            dc * i * (1.0 - g ** 2),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dz_all[:, t] = dz
        dh_next = dz @ u.T
        dc_next = dc * f
    flat = dz_all.reshape(-1, 4 * hidden)
    dw = x.reshape(-1, x.shape[2]).T @ flat
    du = h_prev.reshape(-1, hidden).T @ flat
    db = flat.sum(axis=0)
    dx = dz_all @ w.T
    return dx, dw, du, db


# ------------------------------------------------------------------ attention

def attention_forward(q, k, v, key_mask=None):
    """Scaled dot-product attention; works on ``(T, d)`` or ``(B, T, d)``.

    ``key_mask`` (``(B, T)`` booleans) hides padded keys.
    """
    d = q.shape[-1]
    if d == 0:
        raise DataError("attention dimension must be positive")
    if k.shape[-1] != d or v.shape[:-1] != k.shape[:-1]:
        raise DataError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(d)
    scores = q @ np.swapaxes(k, -1, -2) * scale
    if key_mask is not None:
        scores = np.where(key_mask[..., None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=-1, keepdims=True)
    return weights @ v, weights, (q, k, v, weights, scale)


def attention_backward(dctx, cache):
    q, k, v, weights, scale = cache
    dweights = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(weights, -1, -2) @ dctx
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = np.swapaxes(dscores, -1, -2) @ q * scale
    return dq, dk, dv


# ------------------------------------------------------------------ batch norm

def batchnorm_forward(x, gamma, beta, mask, running, training: bool, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over all valid ``(b, t)`` positions.

    ``running`` holds ``mean``/``var`` arrays and is updated in place during
    training. At inference the frozen running statistics are used.
    """
    valid = x[mask]
    if training:
        n = valid.shape[0]
        mean = valid.mean(axis=0)
        var = valid.var(axis=0)
        if running is not None:
            unbiased = var * n / max(n - 1, 1)
            running["mean"] = (1 - momentum) * running["mean"] + momentum * mean
            running["var"] = (1 - momentum) * running["var"] + momentum * unbiased
    else:
        mean, var = running["mean"], running["var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mask, gamma, training)


def batchnorm_backward(dy, cache):
    xhat, inv_std, mask, gamma, training = cache
    dy = np.where(mask[..., None], dy, 0.0)
    dgamma = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = mask.sum()
    sum_dxhat = dxhat.reshape(-1, dy.shape[-1]).sum(axis=0)
    sum_dxhat_xhat = np.where(mask[..., None], dxhat * xhat, 0.0).reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = inv_std / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return np.where(mask[..., None], dx, 0.0), dgamma, dbeta


# ------------------------------------------------------------------ dropout

def dropout_forward(x, rate: float, training: bool, rng: np.random.Generator | None):
    if not training or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


# ------------------------------------------------------------------ layer norm

def layernorm_forward(x, gamma, beta, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def softplus(x):
    return np.logaddexp(0.0, x)
