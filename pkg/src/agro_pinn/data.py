"""Pixel dataset schema, input-level fusion, Yx, NDVI and a synthetic generator."""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .fao56 import CropParameters, acquisition_intervals, aggregate_to_acquisitions, as_dates, simulate_etx
from .meteo import DailyWeather, saturation_vapour_pressure
from .yieldloss import step_contributions, yield_loss_trace

SPECTRAL_BANDS = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12")
WEATHER_CHANNELS = ("precip_sum", "t_min_min", "t_max_max")
DEFAULT_FEATURES = SPECTRAL_BANDS + WEATHER_CHANNELS
RED, NIR = SPECTRAL_BANDS.index("B04"), SPECTRAL_BANDS.index("B08")

# bare soil / full canopy reflectance per band
_SOIL = np.array([0.10, 0.13, 0.16, 0.19, 0.22, 0.24, 0.25, 0.26, 0.10, 0.30, 0.25])
_CANOPY = np.array([0.03, 0.07, 0.03, 0.12, 0.30, 0.38, 0.42, 0.43, 0.12, 0.20, 0.10])


@dataclass
class PixelSample:
    pixel_id: str
    field_id: str
    year: int
    acquisitions: list
    features: np.ndarray
    yield_actual: float
    etx_steps: np.ndarray

    def __post_init__(self):
        self.acquisitions = as_dates(self.acquisitions)
        self.features = np.asarray(self.features, dtype=float)
        self.etx_steps = np.asarray(self.etx_steps, dtype=float)
        self.validate()

    @property
    def n_steps(self) -> int:
        return len(self.acquisitions)

    def validate(self) -> None:
        t = len(self.acquisitions)
        if t < 2:
            raise DataError(f"pixel {self.pixel_id}: need at least 2 time steps, got {t}")
        if self.features.ndim != 2 or self.features.shape[0] != t:
            raise DataError(f"pixel {self.pixel_id}: features must be {t} x F")
        if self.etx_steps.shape != (t,):
            raise DataError(f"pixel {self.pixel_id}: etx_steps must have length {t}")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.etx_steps))
                and math.isfinite(self.yield_actual)):
            raise DataError(f"pixel {self.pixel_id}: non-finite values")
        if self.yield_actual < 0:
            raise DataError(f"pixel {self.pixel_id}: negative yield {self.yield_actual}")
        if np.any(self.etx_steps < 0):
            raise DataError(f"pixel {self.pixel_id}: negative etx_steps")

    def to_json(self) -> dict:
        return {
            "pixel_id": self.pixel_id, "field_id": self.field_id, "year": self.year,
            "acquisitions": [d.isoformat() for d in self.acquisitions],
            "features": self.features.tolist(),
            "yield": self.yield_actual,
            "etx_steps": self.etx_steps.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PixelSample":
        required = ("pixel_id", "field_id", "year", "acquisitions", "features", "yield", "etx_steps")
        missing = [k for k in required if k not in obj]
        if missing:
            raise DataError(f"missing keys {missing}")
        return cls(str(obj["pixel_id"]), str(obj["field_id"]), int(obj["year"]),
                   obj["acquisitions"], obj["features"], float(obj["yield"]), obj["etx_steps"])


@dataclass
class Dataset:
    samples: list
    y_x: float
    feature_names: tuple = DEFAULT_FEATURES

    def __len__(self):
        return len(self.samples)

    @property
    def n_features(self) -> int:
        return self.samples[0].features.shape[1]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.y_x, self.feature_names)

    def yields(self) -> np.ndarray:
        return np.array([s.yield_actual for s in self.samples])

    def fields(self) -> np.ndarray:
        return np.array([s.field_id for s in self.samples])

    def years(self) -> np.ndarray:
        return np.array([s.year for s in self.samples])


def batch_arrays(samples):
    """Pad a list of samples into ``(X, etx, mask, y)`` arrays.

    ``X`` is ``(B, T_max, F)``; padded steps carry zero features and zero ETx
    and are ``False`` in ``mask``.
    """
    t_max = max(s.n_steps for s in samples)
    n_feat = samples[0].features.shape[1]
    x = np.zeros((len(samples), t_max, n_feat))
    etx = np.zeros((len(samples), t_max))
    mask = np.zeros((len(samples), t_max), dtype=bool)
    for i, s in enumerate(samples):
        t = s.n_steps
        x[i, :t] = s.features
        etx[i, :t] = s.etx_steps
        mask[i, :t] = True
    y = np.array([s.yield_actual for s in samples])
    return x, etx, mask, y


def ndvi(red, nir):
    """Normalised difference vegetation index."""
    red = np.asarray(red, dtype=float)
    nir = np.asarray(nir, dtype=float)
    if np.any(red < 0) or np.any(nir < 0):
        raise DataError("reflectances must be non-negative")
    total = red + nir
    if np.any(total == 0):
        raise DataError("ndvi undefined when red and nir are both zero")
    out = (nir - red) / total
    return float(out) if out.ndim == 0 else out


def fuse_input_level(spectral, weather, acquisitions) -> np.ndarray:
    """Append precipitation sum, minimum t_min and maximum t_max per step."""
    spectral = np.asarray(spectral, dtype=float)
    acquisitions = as_dates(acquisitions)
    if spectral.ndim != 2 or spectral.shape[0] != len(acquisitions):
        raise DataError("spectral matrix must have one row per acquisition")
    dates = [w.date for w in weather]
    intervals = acquisition_intervals(dates, acquisitions)
    precip = np.array([w.precip for w in weather])
    t_min = np.array([w.t_min for w in weather])
    t_max = np.array([w.t_max for w in weather])
    extra = np.array([[precip[lo:hi].sum(), t_min[lo:hi].min(), t_max[lo:hi].max()]
                      for lo, hi in intervals])
    return np.concatenate([spectral, extra], axis=1)


def compute_yx(train_samples) -> float:
    """Maximum observed yield over the given (training) samples."""
    if len(train_samples) == 0:
        raise DataError("cannot compute y_x from an empty split")
    return max(s.yield_actual for s in train_samples)


def save_dataset(dataset: Dataset, path) -> None:
    """Write JSON lines: one metadata line, then one object per pixel."""
    with Path(path).open("w") as fh:
        fh.write(json.dumps({"feature_names": list(dataset.feature_names), "y_x": dataset.y_x}) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a JSON-lines dataset.

    An optional leading object without ``pixel_id`` carries ``feature_names``
    and ``y_x``; without it ``y_x`` is the largest yield in the file.
    """
    path = Path(path)
    samples, meta = [], {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "pixel_id" not in obj and not samples and not meta:
                    meta = obj
                    continue
                samples.append(PixelSample.from_json(obj))
            except (DataError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not samples:
        raise DataError(f"{path}: no samples")
    widths = {s.features.shape[1] for s in samples}
    if len(widths) != 1:
        raise DataError(f"{path}: inconsistent feature counts {sorted(widths)}")
    n_feat = widths.pop()
    names = tuple(meta.get("feature_names") or
                  (DEFAULT_FEATURES if n_feat == len(DEFAULT_FEATURES) else
                   tuple(f"f{i}" for i in range(n_feat))))
    if len(names) != n_feat:
        raise DataError(f"{path}: {len(names)} feature names for {n_feat} features")
    y_x = float(meta.get("y_x", compute_yx(samples)))
    if y_x <= 0 or y_x < compute_yx(samples):
        raise DataError(f"{path}: y_x={y_x} is below the largest yield")
    return Dataset(samples, y_x, names)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_fields: int = 20
    pixels_per_field: int = 100
    season_days: int = 100
    acquisition_every: int = 5
    noise_sd: float = 0.02
    seed: int = 0
    first_year: int = 2017
    n_years: int = 5
    y_x: float = 10.0
    max_loss: float = 0.5
    min_loss: float = 0.0
    # vigour drop per unit relative ET deficit
    stress_gain: float = 10.0
    kc_mode: str = "dual"
    start_month: int = 4

    def __post_init__(self):
        if min(self.n_fields, self.pixels_per_field, self.season_days, self.n_years) < 1:
            raise ConfigError("synthetic sizes must be positive")
        if self.acquisition_every < 3:
            raise ConfigError("acquisition_every must be >= 3 days")
        if self.season_days // self.acquisition_every < 2:
            raise ConfigError("season too short for two acquisitions")
        if self.noise_sd < 0 or not 0 <= self.min_loss <= self.max_loss:
            raise ConfigError("invalid noise or loss range")


@dataclass
class SyntheticTruth:
    pixel_ids: list
    eta_true: np.ndarray
    ky_true: np.ndarray
    ks_map: np.ndarray
    y_x: float

    def save(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write(json.dumps({"y_x": self.y_x}) + "\n")
            for i, pid in enumerate(self.pixel_ids):
                fh.write(json.dumps({"pixel_id": pid, "ks": float(self.ks_map[i]),
                                     "eta_true": self.eta_true[i].tolist(),
                                     "ky_true": self.ky_true[i].tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticTruth":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        rows = [json.loads(l) for l in lines[1:] if l.strip()]
        return cls([r["pixel_id"] for r in rows],
                   np.array([r["eta_true"] for r in rows]),
                   np.array([r["ky_true"] for r in rows]),
                   np.array([r["ks"] for r in rows]), float(head["y_x"]))


def synth_weather(rng: np.random.Generator, start: dt.date, days: int) -> list[DailyWeather]:
    """Plausible spring/summer daily weather for a temperate cereal season."""
    frac = np.arange(days) / max(days - 1, 1)
    anomaly = np.zeros(days)
    for i in range(1, days):
        anomaly[i] = 0.7 * anomaly[i - 1] + rng.normal(0, 1.4)
    t_mean = 9.0 + 10.0 * np.sin(0.5 * np.pi * frac) + anomaly
    dtr = np.clip(rng.normal(10.0, 2.0, days), 3.0, 16.0)
    wet = rng.random(days) < 0.3
    precip = np.where(wet, rng.gamma(1.5, 4.0, days), 0.0)
    cloud = np.clip(np.where(wet, rng.normal(0.7, 0.15, days), rng.normal(0.3, 0.2, days)), 0, 1)
    rn = (9.0 + 7.0 * np.sin(0.5 * np.pi * frac)) * (1.0 - 0.55 * cloud)
    u2 = rng.lognormal(np.log(2.0), 0.35, days)
    rh = rng.uniform(0.8, 1.0, days)
    out = []
    for i in range(days):
        t_min = t_mean[i] - dtr[i] / 2
        t_max = t_mean[i] + dtr[i] / 2
        out.append(DailyWeather(start + dt.timedelta(days=i), float(t_min), float(t_max),
                                u2=float(u2[i]), rn=float(rn[i]),
                                e_a=float(rh[i] * saturation_vapour_pressure(t_min)),
                                precip=float(precip[i])))
    return out


def stage_ky(day: float, params: CropParameters) -> float:
    """Cereal yield response factor: flowering window high, other stages low."""
    vegetative, flowering, _ = params.ky_stage
    end_dev = params.len_ini + params.len_dev
    if end_dev - 0.25 * params.len_dev <= day < end_dev + 0.5 * params.len_mid:
        return flowering
    return vegetative


def _smooth_field(rng: np.random.Generator, n_pixels: int) -> tuple[np.ndarray, int]:
    """Spatially smooth values scaled to [0, 1] on a square-ish pixel grid."""
    side = math.ceil(math.sqrt(n_pixels))
    idx = np.arange(n_pixels)
    r, c = idx // side / side, idx % side / side
    u = np.zeros(n_pixels)
    for _ in range(3):
        fr, fc = rng.uniform(-1.0, 1.0, 2)
        u += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fr * r + fc * c) + rng.uniform(0, 2 * np.pi))
    span = u.max() - u.min()
    return ((u - u.min()) / span if span > 0 else np.zeros(n_pixels)), side


def _phenology(day: np.ndarray, season_days: int) -> np.ndarray:
    green_up = 1.0 / (1.0 + np.exp(-(day - 0.35 * season_days) / (0.07 * season_days)))
    senescence = 1.0 / (1.0 + np.exp(-(day - 0.85 * season_days) / (0.05 * season_days)))
    return 0.05 + 0.95 * green_up * (1.0 - 0.6 * senescence)


def synth_generate(cfg: SynthConfig = SynthConfig(), params: CropParameters | None = None):
    """Dataset with planted stress, ETa, Ky and yields; deterministic for a seed.

    Spectral reflectance mixes bare-soil and canopy end-members; canopy vigour
    follows a fixed phenology scaled down by the pixel's cumulative relative ET
    deficit (cumulative ETa over cumulative ETx).
    """
    rng = np.random.default_rng(cfg.seed)
    params = (params or CropParameters()).scaled_to(cfg.season_days)
    years = [cfg.first_year + i for i in range(cfg.n_years)]
    acq_days = np.arange(cfg.acquisition_every - 1, cfg.season_days, cfg.acquisition_every)
    n_steps = len(acq_days)

    per_year = {}
    for year in years:
        start = dt.date(year, cfg.start_month, 1)
        weather = synth_weather(rng, start, cfg.season_days)
        trace = simulate_etx(weather, params, cfg.kc_mode)
        acquisitions = [start + dt.timedelta(days=int(d)) for d in acq_days]
        etx_steps = aggregate_to_acquisitions(trace.etx, trace.dates, acquisitions)
        weather_channels = fuse_input_level(np.zeros((n_steps, 0)), weather, acquisitions)
        per_year[year] = (acquisitions, etx_steps, weather_channels)

    prev = np.concatenate([[-1], acq_days[:-1]])
    ky_steps = np.array([stage_ky(0.5 * (a + b + 1), params) for a, b in zip(prev, acq_days)])
    active_ky = ky_steps.sum()
    vigour_base = _phenology(acq_days.astype(float), cfg.season_days)

    samples, pixel_ids, etas, kys, kss = [], [], [], [], []
    for f in range(cfg.n_fields):
        year = years[f % cfg.n_years]
        acquisitions, etx_steps, weather_channels = per_year[year]
        active = np.where(etx_steps > 1e-6, ky_steps, 0.0).sum()
        u, _ = _smooth_field(rng, cfg.pixels_per_field)
        severity = rng.uniform(0.3, 1.0)
        target_loss = cfg.min_loss + (cfg.max_loss - cfg.min_loss) * severity * u
        ks = 1.0 - target_loss / (active if active > 0 else active_ky)
        ks = np.clip(ks, 1e-6, 1.0)
        field_id = f"F{f:03d}"
        for p in range(cfg.pixels_per_field):
            eta_true = ks[p] * etx_steps
            trace = yield_loss_trace(ky_steps, eta_true, etx_steps, cfg.y_x, clamp=True)
            cum_etx = np.cumsum(etx_steps)
            rel = np.divide(np.cumsum(eta_true), cum_etx, out=np.ones(n_steps), where=cum_etx > 0)
            vigour = np.clip(vigour_base * (1.0 - cfg.stress_gain * (1.0 - rel)), 0.0, 1.0)
            spectral = _SOIL + np.outer(vigour, _CANOPY - _SOIL)
            if cfg.noise_sd > 0:
                spectral = spectral + rng.normal(0.0, cfg.noise_sd, spectral.shape)
            spectral = np.clip(spectral, 0.0, 1.0)
            pid = f"{field_id}-{p:04d}"
            samples.append(PixelSample(pid, field_id, year, acquisitions,
                                       np.concatenate([spectral, weather_channels], axis=1),
                                       trace.y_hat, etx_steps.copy()))
            pixel_ids.append(pid)
            etas.append(eta_true)
            kys.append(ky_steps.copy())
            kss.append(ks[p])

    truth = SyntheticTruth(pixel_ids, np.array(etas), np.array(kys), np.array(kss), cfg.y_x)
    y_l = step_contributions(truth.ky_true, truth.eta_true,
                             np.array([s.etx_steps for s in samples])).sum(axis=1)
    if np.mean(y_l >= 1.0) > 0.05:
        raise ConfigError(f"degenerate config: {np.mean(y_l >= 1.0):.1%} of pixels lose all yield")
    return Dataset(samples, cfg.y_x, DEFAULT_FEATURES), truth
