"""Optimisation loop, schedules, cross-validation splits and deep ensembles."""

from __future__ import annotations

import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, batch_arrays, compute_yx
from .errors import AgroPinnError, ConfigError, DataError, NumericError
from .nn.model import ModelConfig, PGLSTM
from .physloss import LossBreakdown, LossConfig, total_loss, total_loss_grad
from .yieldloss import batch_yield, batch_yield_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    dataset_yx: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.scheduler_patience < 1:
            raise ConfigError("batch_size and patience values must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 < self.scheduler_factor <= 1:
            raise ConfigError("scheduler_factor must be in (0, 1]")


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = 10
    base_seed: int = 0

    def __post_init__(self):
        if self.members < 1:
            raise ConfigError("an ensemble needs at least one member")


# ------------------------------------------------------------------ optimiser and schedules

def adam_step(params: dict, grads: dict, state: dict | None, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if state is None:
        state = {"t": 0, "m": {}, "v": {}}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DataError(f"gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state["t"] += 1
    t = state["t"]
    for name, g in grads.items():
        m = state["m"].get(name)
        v = state["v"].get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state["m"][name] = m
        state["v"][name] = v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    """Signals a stop once ``patience`` consecutive epochs fail to improve."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


# ------------------------------------------------------------------ splits

@dataclass
class Fold:
    name: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _carve_validation(train_idx, groups, fraction, rng):
    """Hold out whole groups (fields) worth about ``fraction`` of ``train_idx``."""
    train_groups = np.unique(groups[train_idx])
    if len(train_groups) < 2:
        shuffled = rng.permutation(train_idx)
        n_val = max(1, int(round(fraction * len(train_idx))))
        return np.sort(shuffled[n_val:]), np.sort(shuffled[:n_val])
    order = rng.permutation(train_groups)
    target = fraction * len(train_idx)
    chosen, count = [], 0
    for g in order:
        if chosen and count >= target:
            break
        if len(chosen) == len(train_groups) - 1:
            break
        chosen.append(g)
        count += int(np.sum(groups[train_idx] == g))
    is_val = np.isin(groups[train_idx], chosen)
    return np.sort(train_idx[~is_val]), np.sort(train_idx[is_val])


def holdout_split(dataset: Dataset, fraction: float = 0.1, seed: int = 0):
    """``(train, val)`` datasets with whole fields held out for validation."""
    rng = np.random.default_rng(seed)
    train_idx, val_idx = _carve_validation(np.arange(len(dataset)), dataset.fields(), fraction, rng)
    return dataset.subset(train_idx), dataset.subset(val_idx)


def split(dataset: Dataset, strategy: str = "kfold", k: int = 10, seed: int = 0,
          val_fraction: float = 0.1) -> list[Fold]:
    """Cross-validation folds grouped by field (k-fold) or by year (LOYO)."""
    n = len(dataset)
    groups = dataset.fields()
    rng = np.random.default_rng(seed)
    folds = []
    if strategy == "kfold":
        if k < 2:
            raise ConfigError("k-fold needs k >= 2")
        if k > n:
            raise ConfigError(f"k={k} exceeds the sample count {n}")
        unique = np.unique(groups)
        if k > len(unique):
            raise ConfigError(f"k={k} exceeds the number of fields ({len(unique)})")
        sizes = {g: int(np.sum(groups == g)) for g in unique}
        order = rng.permutation(unique)
        # largest fields first, each into the currently smallest fold
        order = sorted(order, key=lambda g: -sizes[g])
        load = np.zeros(k, dtype=int)
        assign = {}
        for g in order:
            f = int(np.argmin(load))
            assign[g] = f
            load[f] += sizes[g]
        fold_of = np.array([assign[g] for g in groups])
        for f in range(k):
            test = np.flatnonzero(fold_of == f)
            train, val = _carve_validation(np.flatnonzero(fold_of != f), groups, val_fraction, rng)
            folds.append(Fold(f"fold{f}", train, val, test))
    elif strategy == "loyo":
        years = dataset.years()
        unique = np.unique(years)
        if len(unique) < 2:
            raise ConfigError("leave-one-year-out needs at least two years")
        for year in unique:
            test = np.flatnonzero(years == year)
            train, val = _carve_validation(np.flatnonzero(years != year), groups, val_fraction, rng)
            folds.append(Fold(str(int(year)), train, val, test))
    else:
        raise ConfigError(f"unknown split strategy {strategy!r}")
    return folds


# ------------------------------------------------------------------ objective

@dataclass
class Batch:
    x: np.ndarray
    etx: np.ndarray
    mask: np.ndarray
    y: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        return cls(*batch_arrays(samples))

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.etx[idx], self.mask[idx], self.y[idx])

    def __len__(self):
        return len(self.y)


def objective(model: PGLSTM, batch: Batch, y_x: float, loss_cfg: LossConfig,
              training: bool = False, rng=None, need_grads: bool = True):
    """Loss breakdown, parameter gradients and predictions for one batch.

    Physics-guided models go through the yield response to water and the
    two-term loss; the plain LSTM baseline is fit with yield MSE alone.
    """
    if model.cfg.kind == "lstm":
        y_hat, cache = model.regress(batch.x, batch.mask)
        err = y_hat - batch.y
        data_term = float(np.mean(err ** 2))
        zeros = np.zeros_like(batch.etx)
        breakdown = LossBreakdown(data_term, data_term, 0.0, zeros, zeros, zeros)
        grads = model.regress_backward(cache, 2.0 * err / len(err)) if need_grads else None
        return breakdown, grads, (y_hat, None, None)
    eta, ky, cache = model.forward(batch.x, batch.mask, training, rng, batch.etx)
    y_hat, _ = batch_yield(ky, eta, batch.etx, y_x)
    if not need_grads:
        return total_loss(y_hat, batch.y, eta, batch.etx, loss_cfg, batch.mask), None, (y_hat, eta, ky)
    breakdown, d_yhat, d_eta = total_loss_grad(y_hat, batch.y, eta, batch.etx, loss_cfg, batch.mask)
    d_ky, d_eta_yield = batch_yield_backward(d_yhat, ky, eta, batch.etx, y_x)
    d_eta = d_eta + d_eta_yield
    grads = model.backward(cache, d_eta, d_ky)
    return breakdown, grads, (y_hat, eta, ky)


def backprop_gradients(model: PGLSTM, batch: Batch, y_x: float, loss_cfg: LossConfig = LossConfig(),
                       training: bool = False, seed: int | None = None) -> dict:
    """Gradients of the total loss w.r.t. every model parameter.

    With ``training=True`` the dropout mask is drawn from ``seed`` so repeated
    calls see the same mask.
    """
    rng = np.random.default_rng(seed) if training else None
    breakdown, grads, _ = objective(model, batch, y_x, loss_cfg, training, rng)
    if not math.isfinite(breakdown.total):
        raise NumericError("non-finite loss")
    return grads


def violation_rate(eta: np.ndarray, etx: np.ndarray, mask: np.ndarray) -> float:
    bad = ((eta < 0) | (eta > etx)) & mask
    return float(bad.sum() / mask.sum())


# ------------------------------------------------------------------ training loop

@dataclass
class TrainResult:
    model: PGLSTM
    history: list
    y_x: float
    best_epoch: int

    def meta(self) -> dict:
        return {"y_x": self.y_x, "best_epoch": self.best_epoch}


def evaluate_loss(model, batch: Batch, y_x, loss_cfg, chunk: int = 2048):
    """Inference-mode loss over a whole split, evaluated in chunks."""
    total = data = phys = 0.0
    etas = []
    n = len(batch)
    n_steps = batch.mask.sum()
    for lo in range(0, n, chunk):
        part = batch.take(slice(lo, lo + chunk))
        bd, _, (y_hat, eta, _) = objective(model, part, y_x, loss_cfg, need_grads=False)
        data += bd.data_term * len(part)
        phys += bd.physics_term * part.mask.sum()
        if eta is not None:
            etas.append(eta)
    data /= n
    phys /= n_steps
    total = loss_cfg.lambda1 * data + loss_cfg.lambda2 * phys if model.cfg.kind != "lstm" else data
    vio = violation_rate(np.concatenate(etas), batch.etx, batch.mask) if etas else 0.0
    return total, vio, data, phys


def _dump_batch(batch: Batch, diag_dir) -> str:
    diag_dir = Path(diag_dir) if diag_dir else Path(tempfile.gettempdir())
    diag_dir.mkdir(parents=True, exist_ok=True)
    fd, path = tempfile.mkstemp(dir=diag_dir, prefix="nonfinite-batch-", suffix=".npz")
    os.close(fd)
    np.savez(path, x=batch.x, etx=batch.etx, mask=batch.mask, y=batch.y)
    return path


def train_model(train: Dataset, val: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                y_x: float | None = None, diag_dir=None, epoch_callback=None) -> TrainResult:
    """Mini-batch Adam with plateau LR reduction and early stopping on validation loss.

    Returns the best-validation model; ``y_x`` defaults to the largest
    training yield.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation splits must be non-empty")
    if y_x is None:
        y_x = train.y_x if train_cfg.dataset_yx else compute_yx(train.samples)
    if train.n_features != model_cfg.input_dim:
        raise ConfigError(f"model input_dim {model_cfg.input_dim} != dataset features {train.n_features}")
    rng = np.random.default_rng(train_cfg.seed)
    model = PGLSTM(model_cfg, np.random.default_rng(model_cfg.seed))
    tr = Batch.from_samples(train.samples)
    va = Batch.from_samples(val.samples)
    model.fit_normalization(tr.x, tr.mask, tr.etx)

    plateau = ReduceOnPlateau(train_cfg.lr, train_cfg.scheduler_factor, train_cfg.scheduler_patience)
    stopper = EarlyStopping(train_cfg.patience)
    lr = train_cfg.lr
    state = None
    best_state = model.state()
    history = []
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(len(tr))
        seen, running = 0, 0.0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = tr.take(order[lo:lo + train_cfg.batch_size])
            try:
                bd, grads, _ = objective(model, batch, y_x, train_cfg.loss, training=True, rng=rng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}; batch saved to {_dump_batch(batch, diag_dir)}") from exc
            if not math.isfinite(bd.total):
                path = _dump_batch(batch, diag_dir)
                raise NumericError(f"epoch {epoch}: non-finite loss; batch saved to {path}")
            _, state = adam_step(model.params, grads, state, lr)
            running += bd.total * len(batch)
            seen += len(batch)
        val_loss, vio, val_data, val_phys = evaluate_loss(model, va, y_x, train_cfg.loss)
        if not math.isfinite(val_loss):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        history.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss,
                        "lr": lr, "violation_rate": vio, "val_data": val_data, "val_physics": val_phys})
        if epoch_callback:
            epoch_callback(history[-1])
        stop = stopper.step(val_loss, epoch)
        if stopper.improved_last:
            best_state = model.state()
        lr = plateau.step(val_loss)
        if stop:
            break
    model.load_state(best_state)
    return TrainResult(model, history, y_x, stopper.best_epoch)


# ------------------------------------------------------------------ ensembles

def worker_count(requested: int | None = None) -> int:
    """Worker processes allowed, capped by ``AGRO_PINN_THREADS`` (default 1)."""
    raw = os.environ.get("AGRO_PINN_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"AGRO_PINN_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("AGRO_PINN_THREADS must be >= 1")
    return cap if requested is None else max(1, min(requested, cap))


def member_configs(model_cfg: ModelConfig, train_cfg: TrainConfig, ens_cfg: EnsembleConfig):
    """Per-member configs; member ``i`` uses seed ``base_seed + i`` everywhere."""
    out = []
    for i in range(ens_cfg.members):
        seed = ens_cfg.base_seed + i
        out.append((replace(model_cfg, seed=seed), replace(train_cfg, seed=seed)))
    return out


def _train_member(args):
    index, train, val, model_cfg, train_cfg, y_x, diag_dir = args
    try:
        return train_model(train, val, model_cfg, train_cfg, y_x=y_x, diag_dir=diag_dir)
    except AgroPinnError as exc:
        raise type(exc)(f"ensemble member {index}: {exc}") from exc


def train_ensemble(train: Dataset, val: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   ens_cfg: EnsembleConfig = EnsembleConfig(), y_x: float | None = None,
                   diag_dir=None, workers: int | None = None) -> list[TrainResult]:
    """Train independent members that differ only by seed."""
    if y_x is None:
        y_x = train.y_x if train_cfg.dataset_yx else compute_yx(train.samples)
    jobs = [(i, train, val, m, t, y_x, diag_dir)
            for i, (m, t) in enumerate(member_configs(model_cfg, train_cfg, ens_cfg))]
    n_workers = worker_count(workers if workers is not None else len(jobs))
    if n_workers == 1 or len(jobs) == 1:
        return [_train_member(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_train_member, jobs))


@dataclass
class EnsemblePrediction:
    """Mean and population standard deviation across members."""
    yield_mean: np.ndarray
    yield_sd: np.ndarray
    eta_mean: np.ndarray
    eta_sd: np.ndarray
    ky_mean: np.ndarray
    ky_sd: np.ndarray
    yield_loss: np.ndarray
    members: int

    @property
    def lower(self) -> np.ndarray:
        return self.yield_mean - 2.0 * self.yield_sd

    @property
    def upper(self) -> np.ndarray:
        return self.yield_mean + 2.0 * self.yield_sd


def member_predict(model: PGLSTM, batch: Batch, y_x: float):
    """``(y_hat, y_l, eta_hat, ky_hat)`` for one model; eta/ky are None for the plain LSTM."""
    if model.cfg.kind == "lstm":
        y_hat, _ = model.regress(batch.x, batch.mask)
        return y_hat, 1.0 - y_hat / y_x, None, None
    out = model.predict(batch.x, batch.mask, batch.etx)
    y_hat, y_l = batch_yield(out.ky_hat, out.eta_hat, batch.etx, y_x)
    return y_hat, y_l, out.eta_hat, out.ky_hat


def summarize_members(yields, etas=None, kys=None, losses=None) -> EnsemblePrediction:
    """Stack per-member predictions into means and population standard deviations."""
    if len(yields) == 0:
        raise ConfigError("an ensemble prediction needs at least one member")
    y = np.stack(yields)

    def stats(parts, like):
        if parts is None or any(p is None for p in parts):
            nan = np.full(like, np.nan)
            return nan, nan
        a = np.stack(parts)
        return a.mean(axis=0), a.std(axis=0)

    eta_mean, eta_sd = stats(etas, y.shape[1:])
    ky_mean, ky_sd = stats(kys, y.shape[1:])
    loss = np.stack(losses).mean(axis=0) if losses is not None else np.full(y.shape[1:], np.nan)
    return EnsemblePrediction(y.mean(axis=0), y.std(axis=0), eta_mean, eta_sd, ky_mean, ky_sd, loss, len(y))


def ensemble_predict(members: list[PGLSTM], batch: Batch, y_x: float) -> EnsemblePrediction:
    """Pool member predictions; members must share a configuration up to the seed."""
    if not members:
        raise ConfigError("an ensemble prediction needs at least one member")
    first = members[0].cfg
    for i, m in enumerate(members[1:], start=1):
        if not m.cfg.compatible_with(first):
            raise ConfigError(f"ensemble member {i} has a configuration different from member 0")
    outs = [member_predict(m, batch, y_x) for m in members]
    return summarize_members([o[0] for o in outs], [o[2] for o in outs], [o[3] for o in outs],
                             [o[1] for o in outs])
