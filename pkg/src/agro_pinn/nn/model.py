"""Physics-guided LSTM (optionally with temporal attention) and checkpoints."""

from __future__ import annotations

import copy
import json
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from . import layers as L

CONSTANT_KY = 1.05
CHECKPOINT_FORMAT = "agro-pinn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 14
    hidden_dim: int = 128
    lstm_layers: int = 2
    trunk_dim: int = 128
    dropout_rate: float = 0.2
    use_attention: bool = False
    head_mode: str = "learned_ky"
    separate_trunks: bool = False
    output_activation: str = "deficit"
    eta_units: str = "etx"
    eta_bias_init: float = 0.99
    deficit_sharpness: float = 20.0
    head_init: str = "zero"
    kind: str = "pg_lstm"
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.lstm_layers, self.trunk_dim) < 1:
            raise ConfigError("model dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.head_mode not in ("learned_ky", "constant_ky"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.output_activation not in ("none", "softplus", "deficit"):
            raise ConfigError(f"unknown output_activation {self.output_activation!r}")
        if self.eta_units not in ("etx", "scale"):
            raise ConfigError(f"unknown eta_units {self.eta_units!r}")
        if self.output_activation == "deficit" and not 0.0 <= self.eta_bias_init < 1.0:
            raise ConfigError("deficit heads need eta_bias_init in [0, 1)")
        if not self.deficit_sharpness > 0:
            raise ConfigError("deficit_sharpness must be positive")
        if self.kind not in ("pg_lstm", "lstm"):
            raise ConfigError(f"unknown model kind {self.kind!r}")

    def compatible_with(self, other: "ModelConfig") -> bool:
        return asdict(self) | {"seed": 0} == asdict(other) | {"seed": 0}


@dataclass
class SequenceOutput:
    eta_hat: np.ndarray
    ky_hat: np.ndarray


class PGLSTM:
    """LSTM backbone, shared linear/batch-norm/dropout trunk and two heads.

    The ETa head works in units of the step's ETx (``eta_units="etx"``) or of
    the mean training ETx per step (``"scale"``). With the default ``deficit``
    activation the head predicts a soft deficit fraction,
    ``eta = unit * (1 - softplus(beta * z) / beta)``, so ETa can never exceed
    ETx. ``eta_bias_init`` is the starting ETa/ETx ratio; zeroed head weights
    make every pixel start there. Inputs are standardised with stored
    training statistics.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {
            "input_mean": np.zeros(cfg.input_dim),
            "input_std": np.ones(cfg.input_dim),
            "eta_scale": np.ones(1),
        }
        h = cfg.hidden_dim
        d_in = cfg.input_dim
        for layer in range(cfg.lstm_layers):
            self.params[f"lstm{layer}.w"] = L.uniform_init(rng, (d_in, 4 * h), h)
            self.params[f"lstm{layer}.u"] = L.uniform_init(rng, (h, 4 * h), h)
            b = L.uniform_init(rng, (4 * h,), h)
            b[h:2 * h] += 1.0
            self.params[f"lstm{layer}.b"] = b
            d_in = h
        if cfg.kind == "lstm":
            self.params["out.w"] = L.uniform_init(rng, (h, 1), h)
            self.params["out.b"] = L.uniform_init(rng, (1,), h)
            return
        for trunk in self.trunk_names:
            self.params[f"{trunk}.w"] = L.uniform_init(rng, (h, cfg.trunk_dim), h)
            self.params[f"{trunk}.b"] = L.uniform_init(rng, (cfg.trunk_dim,), h)
            self.params[f"{trunk}.gamma"] = np.ones(cfg.trunk_dim)
            self.params[f"{trunk}.beta"] = np.zeros(cfg.trunk_dim)
            self.buffers[f"{trunk}.running_mean"] = np.zeros(cfg.trunk_dim)
            self.buffers[f"{trunk}.running_var"] = np.ones(cfg.trunk_dim)
        eta_start = cfg.eta_bias_init
        if cfg.output_activation == "deficit":
            beta = cfg.deficit_sharpness
            eta_start = np.log(np.expm1(beta * (1.0 - cfg.eta_bias_init))) / beta
        for head, start in (("eta", eta_start), ("ky", CONSTANT_KY)):
            w = L.uniform_init(rng, (cfg.trunk_dim, 1), cfg.trunk_dim)
            self.params[f"{head}.w"] = w if cfg.head_init == "uniform" else np.zeros_like(w)
            self.params[f"{head}.b"] = np.array([start])

    @property
    def trunk_names(self):
        return ("trunk_eta", "trunk_ky") if self.cfg.separate_trunks else ("trunk",)

    def _trunk_for(self, head: str) -> str:
        return f"trunk_{head}" if self.cfg.separate_trunks else "trunk"

    # -------------------------------------------------------------- setup

    def fit_normalization(self, x: np.ndarray, mask: np.ndarray, etx: np.ndarray) -> None:
        valid = x[mask]
        std = valid.std(axis=0)
        self.buffers["input_mean"] = valid.mean(axis=0)
        self.buffers["input_std"] = np.where(std > 1e-12, std, 1.0)
        scale = etx[mask].mean()
        self.buffers["eta_scale"] = np.array([scale if scale > 0 else 1.0])

    def copy(self) -> "PGLSTM":
        return copy.deepcopy(self)

    def state(self):
        return ({k: v.copy() for k, v in self.params.items()},
                {k: v.copy() for k, v in self.buffers.items()})

    def load_state(self, state) -> None:
        params, buffers = state
        self.params = {k: v.copy() for k, v in params.items()}
        self.buffers = {k: v.copy() for k, v in buffers.items()}

    # -------------------------------------------------------------- forward

    def _backbone(self, x, mask):
        if x.ndim != 3 or x.shape[2] != self.cfg.input_dim:
            raise DataError(f"expected input (B, T, {self.cfg.input_dim}), got {x.shape}")
        z = (x - self.buffers["input_mean"]) / self.buffers["input_std"]
        z = np.where(mask[..., None], z, 0.0)
        caches = []
        for layer in range(self.cfg.lstm_layers):
            p = self.params
            z, c = L.lstm_layer_forward(z, p[f"lstm{layer}.w"], p[f"lstm{layer}.u"], p[f"lstm{layer}.b"])
            caches.append(c)
        return z, caches

    def _backbone_backward(self, dh, caches, grads):
        for layer in reversed(range(self.cfg.lstm_layers)):
            p = self.params
            dh, dw, du, db = L.lstm_layer_backward(dh, caches[layer], p[f"lstm{layer}.w"], p[f"lstm{layer}.u"])
            grads[f"lstm{layer}.w"] = dw
            grads[f"lstm{layer}.u"] = du
            grads[f"lstm{layer}.b"] = db

    def _eta_unit(self, etx, shape):
        if self.cfg.eta_units == "scale":
            return np.full(shape, self.buffers["eta_scale"][0])
        if etx is None or etx.shape != shape:
            raise DataError("eta_units='etx' needs the per-step ETx of every sample")
        return etx

    def forward(self, x, mask=None, training: bool = False, rng: np.random.Generator | None = None,
                etx=None):
        """Return ``(eta_hat, ky_hat, cache)``, each series shaped ``(B, T)``."""
        if self.cfg.kind != "pg_lstm":
            raise ConfigError("forward() is for physics-guided models; use regress()")
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        if training and self.cfg.dropout_rate > 0 and rng is None:
            raise ConfigError("training forward pass needs an rng for dropout")
        hidden, lstm_caches = self._backbone(x, mask)
        attn_cache = None
        if self.cfg.use_attention:
            ctx, _, attn_cache = L.attention_forward(hidden, hidden, hidden, key_mask=mask)
            hidden = hidden + ctx
        trunk_out, trunk_caches = {}, {}
        for trunk in self.trunk_names:
            a, lin_cache = L.linear_forward(hidden, self.params[f"{trunk}.w"], self.params[f"{trunk}.b"])
            running = {"mean": self.buffers[f"{trunk}.running_mean"],
                       "var": self.buffers[f"{trunk}.running_var"]}
            bn, bn_cache = L.batchnorm_forward(a, self.params[f"{trunk}.gamma"], self.params[f"{trunk}.beta"],
                                               mask, running, training)
            if training:
                self.buffers[f"{trunk}.running_mean"] = running["mean"]
                self.buffers[f"{trunk}.running_var"] = running["var"]
            out, keep = L.dropout_forward(bn, self.cfg.dropout_rate, training, rng)
            trunk_out[trunk] = out
            trunk_caches[trunk] = (lin_cache, bn_cache, keep)
        raw = {}
        for head in ("eta", "ky"):
            feats = trunk_out[self._trunk_for(head)]
            raw[head] = (feats @ self.params[f"{head}.w"] + self.params[f"{head}.b"])[..., 0]
        if self.cfg.output_activation == "softplus":
            eta_unit, ky = L.softplus(raw["eta"]), L.softplus(raw["ky"])
        elif self.cfg.output_activation == "deficit":
            beta = self.cfg.deficit_sharpness
            eta_unit, ky = 1.0 - L.softplus(beta * raw["eta"]) / beta, raw["ky"]
        else:
            eta_unit, ky = raw["eta"], raw["ky"]
        unit = self._eta_unit(etx, eta_unit.shape)
        eta = eta_unit * unit
        if self.cfg.head_mode == "constant_ky":
            ky = np.full_like(eta, CONSTANT_KY)
        cache = (x, mask, lstm_caches, attn_cache, trunk_out, trunk_caches, raw, unit)
        return eta, ky, cache

    def backward(self, cache, d_eta, d_ky):
        """Parameter gradients given ``d loss / d eta_hat`` and ``d loss / d ky_hat``."""
        x, mask, lstm_caches, attn_cache, trunk_out, trunk_caches, raw, unit = cache
        grads = {}
        d_raw = {"eta": d_eta * unit,
                 "ky": np.zeros_like(d_ky) if self.cfg.head_mode == "constant_ky" else d_ky}
        if self.cfg.output_activation == "softplus":
            d_raw = {k: v * L.sigmoid(raw[k]) for k, v in d_raw.items()}
        elif self.cfg.output_activation == "deficit":
            d_raw["eta"] = -d_raw["eta"] * L.sigmoid(self.cfg.deficit_sharpness * raw["eta"])
        d_trunk = {t: np.zeros_like(trunk_out[t]) for t in self.trunk_names}
        for head in ("eta", "ky"):
            trunk = self._trunk_for(head)
            feats = trunk_out[trunk]
            dr = d_raw[head][..., None]
            grads[f"{head}.w"] = feats.reshape(-1, feats.shape[-1]).T @ dr.reshape(-1, 1)
            grads[f"{head}.b"] = dr.reshape(-1, 1).sum(axis=0)
            d_trunk[trunk] += dr @ self.params[f"{head}.w"].T
        d_hidden = 0.0
        for trunk in self.trunk_names:
            lin_cache, bn_cache, keep = trunk_caches[trunk]
            d_bn = L.dropout_backward(d_trunk[trunk], keep)
            d_a, grads[f"{trunk}.gamma"], grads[f"{trunk}.beta"] = L.batchnorm_backward(d_bn, bn_cache)
            d_h, grads[f"{trunk}.w"], grads[f"{trunk}.b"] = L.linear_backward(
                d_a, lin_cache, self.params[f"{trunk}.w"])
            d_hidden = d_hidden + d_h
        if attn_cache is not None:
            dq, dk, dv = L.attention_backward(d_hidden, attn_cache)
            d_hidden = d_hidden + dq + dk + dv
        self._backbone_backward(d_hidden, lstm_caches, grads)
        return grads

    # -------------------------------------------------------------- plain LSTM regressor

    def regress(self, x, mask=None):
        """Yield from the last valid hidden state (baseline ``kind="lstm"``)."""
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        hidden, caches = self._backbone(x, mask)
        last = mask.sum(axis=1) - 1
        h_last = hidden[np.arange(len(x)), last]
        y = (h_last @ self.params["out.w"] + self.params["out.b"])[:, 0]
        return y, (hidden.shape, last, h_last, caches)

    def regress_backward(self, cache, d_y):
        shape, last, h_last, caches = cache
        grads = {"out.w": h_last.T @ d_y[:, None], "out.b": np.array([d_y.sum()])}
        dh = np.zeros(shape)
        dh[np.arange(shape[0]), last] = d_y[:, None] * self.params["out.w"][:, 0]
        self._backbone_backward(dh, caches, grads)
        return grads

    def predict(self, x, mask=None, etx=None) -> SequenceOutput:
        eta, ky, _ = self.forward(x, mask, training=False, etx=etx)
        return SequenceOutput(eta, ky)


def lstm_forward(layer_params, inputs: np.ndarray) -> np.ndarray:
    """Run stacked LSTM layers over one ``T x F`` sequence from a zero state.

    ``layer_params`` is a sequence of ``(w, u, b)`` tuples, first layer first.
    """
    z = np.asarray(inputs, dtype=float)[None]
    for w, u, b in layer_params:
        z, _ = L.lstm_layer_forward(z, w, u, b)
    return z[0]


def attention(q, k, v):
    """``(context, weights)`` of scaled dot-product attention."""
    ctx, weights, _ = L.attention_forward(np.asarray(q, float), np.asarray(k, float), np.asarray(v, float))
    return ctx, weights


def pg_forward(model: PGLSTM, sample: np.ndarray, etx=None, training: bool = False,
               rng: np.random.Generator | None = None) -> SequenceOutput:
    """Per-step ``(eta_hat, ky_hat)`` for one ``T x F`` sample."""
    sample = np.asarray(sample, dtype=float)
    if sample.ndim != 2:
        raise DataError("pg_forward expects a single T x F sample")
    etx = None if etx is None else np.asarray(etx, dtype=float)[None]
    eta, ky, _ = model.forward(sample[None], None, training, rng, etx)
    return SequenceOutput(eta[0], ky[0])


# ------------------------------------------------------------------ checkpoints

def _encode(arrays):
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()}


def _decode(obj):
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in obj.items()}


def save_checkpoint(model: PGLSTM, path, meta: dict | None = None) -> None:
    """Write a JSON checkpoint atomically.

    Layout: ``{"format", "version", "config", "params", "buffers", "meta"}``;
    each tensor is ``{"shape": [...], "data": [row-major floats]}``.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "params": _encode(model.params),
        "buffers": _encode(model.buffers),
        "meta": meta or {},
    }
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a model checkpoint")
    if doc.get("version", 0) > CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {doc['version']} is newer than supported")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    model = PGLSTM(cfg)
    params, buffers = _decode(doc["params"]), _decode(doc["buffers"])
    if set(params) != set(model.params):
        raise DataError(f"{path}: parameter names do not match the configuration")
    for name, value in params.items():
        if value.shape != model.params[name].shape:
            raise DataError(f"{path}: parameter {name} has shape {value.shape}")
    model.load_state((params, buffers))
    return model, doc.get("meta", {})
