"""Crop coefficient curves, seasonal ETx simulation and stress coefficient."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .meteo import STANDARD_PRESSURE, penman_monteith_et0_flagged, state_for

# mm; aggregated ETx at or below this is treated as "no crop water demand".
ETX_FLOOR = 1e-6


@dataclass(frozen=True)
class CropParameters:
    kcb_ini: float = 0.15
    kcb_mid: float = 1.10
    kcb_end: float = 0.25
    len_ini: int = 20
    len_dev: int = 30
    len_mid: int = 30
    len_late: int = 20
    ke_max: float = 1.20
    # vegetative, flowering, season average
    ky_stage: tuple = (0.5, 1.5, 1.05)

    def __post_init__(self):
        coeffs = (self.kcb_ini, self.kcb_mid, self.kcb_end, self.ke_max, *self.ky_stage)
        if any(c < 0 for c in coeffs):
            raise ConfigError("crop coefficients must be non-negative")
        if min(self.len_ini, self.len_dev, self.len_mid, self.len_late) < 1:
            raise ConfigError("stage lengths must be >= 1 day")
        if self.kcb_mid < self.kcb_ini:
            raise ConfigError("kcb_mid must be >= kcb_ini")
        if len(self.ky_stage) != 3:
            raise ConfigError("ky_stage needs three values: vegetative, flowering, average")

    @property
    def season_length(self) -> int:
        return self.len_ini + self.len_dev + self.len_mid + self.len_late

    def scaled_to(self, season_days: int) -> "CropParameters":
        """Same curve shape with stage lengths rescaled to ``season_days``."""
        total = self.season_length
        lens = [max(1, round(n * season_days / total))
                for n in (self.len_ini, self.len_dev, self.len_mid)]
        late = season_days - sum(lens)
        if late < 1:
            raise ConfigError(f"season of {season_days} days is too short")
        return CropParameters(self.kcb_ini, self.kcb_mid, self.kcb_end, *lens, late,
                              self.ke_max, self.ky_stage)


def read_crop_parameters(path) -> CropParameters:
    """Parse a flat ``key = value`` crop parameter file."""
    known = {f.name: f for f in fields(CropParameters)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown crop parameter {key!r}")
        try:
            if key == "ky_stage":
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif key.startswith("len_"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return CropParameters(**kwargs)


def basal_kcb(day_index: int, params: CropParameters) -> float:
    """Four-stage piecewise-linear basal crop coefficient."""
    if not 0 <= day_index < params.season_length:
        raise DataError(f"day {day_index} outside season of {params.season_length} days")
    d = day_index
    end_ini = params.len_ini
    end_dev = end_ini + params.len_dev
    end_mid = end_dev + params.len_mid
    if d < end_ini:
        return params.kcb_ini
    if d < end_dev:
        return params.kcb_ini + (d - end_ini) / params.len_dev * (params.kcb_mid - params.kcb_ini)
    if d < end_mid:
        return params.kcb_mid
    return params.kcb_mid + (d - end_mid) / params.len_late * (params.kcb_end - params.kcb_mid)


def kc_curve(day_index: int, params: CropParameters, mode: str = "single",
             wet_surface: bool = False, days_since_wet: int | None = None,
             drying_days: int = 4) -> float:
    """Crop coefficient for one day.

    In ``dual`` mode a surface-evaporation term ``Ke = ke_max - Kcb`` is added
    on wet days and fades linearly to zero over ``drying_days`` afterwards.
    """
    kcb = basal_kcb(day_index, params)
    if mode == "single":
        return kcb
    if mode != "dual":
        raise ConfigError(f"unknown Kc mode {mode!r}")
    ke_full = max(params.ke_max - kcb, 0.0)
    if wet_surface:
        return kcb + ke_full
    if days_since_wet is None or days_since_wet >= drying_days:
        return kcb
    return kcb + ke_full * (1.0 - days_since_wet / drying_days)


@dataclass
class SimulationTrace:
    dates: list
    et0: np.ndarray
    kc: np.ndarray
    etx: np.ndarray
    ks: np.ndarray | None = None
    eta: np.ndarray | None = None
    clamped_days: tuple = ()

    def write_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("date,et0,kc,etx\n")
            for d, a, b, c in zip(self.dates, self.et0, self.kc, self.etx):
                fh.write(f"{d.isoformat()},{a!r},{b!r},{c!r}\n")


def simulate_etx(weather, params: CropParameters, mode: str = "single",
                 pressure: float = STANDARD_PRESSURE, drying_days: int = 4,
                 wet_threshold: float = 1.0) -> SimulationTrace:
    """Daily ET0, Kc and ETx over a season that starts on ``weather[0].date``."""
    if not weather:
        raise DataError("empty weather series")
    dates = [w.date for w in weather]
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise DataError("weather dates must be strictly increasing")
    n = len(weather)
    et0 = np.empty(n)
    kc = np.empty(n)
    clamped = []
    last_wet = None
    for i, w in enumerate(weather):
        try:
            et0[i], was_clamped = penman_monteith_et0_flagged(w, state_for(w, pressure))
            day = (w.date - dates[0]).days
            wet = w.precip > wet_threshold
            if wet:
                last_wet = day
            since = None if last_wet is None else day - last_wet
            kc[i] = kc_curve(day, params, mode, wet, since, drying_days)
        except DataError as exc:
            raise DataError(f"weather day {i}: {exc}") from exc
        if was_clamped:
            clamped.append(i)
    return SimulationTrace(dates, et0, kc, kc * et0, clamped_days=tuple(clamped))


def stress_ks(depletion: float, taw: float, raw: float) -> float:
    """Root-zone water stress coefficient from depletion (mm)."""
    if not 0 <= raw < taw:
        raise DataError(f"need 0 <= raw < taw, got raw={raw}, taw={taw}")
    if depletion < 0:
        raise DataError("negative depletion")
    if depletion <= raw:
        return 1.0
    if depletion >= taw:
        return 0.0
    return (taw - depletion) / (taw - raw)


def acquisition_intervals(dates, acquisitions) -> list[tuple[int, int]]:
    """Index ranges ``[lo, hi)`` into ``dates`` covered by each acquisition step.

    Step ``t`` covers days in ``(acq[t-1], acq[t]]``; step 0 starts at the
    first day of the series.
    """
    if len(acquisitions) == 0:
        raise DataError("no acquisition dates")
    if any(b <= a for a, b in zip(acquisitions, acquisitions[1:])):
        raise DataError("acquisition dates must be strictly increasing")
    if acquisitions[0] < dates[0] or acquisitions[-1] > dates[-1]:
        raise DataError(
            f"acquisitions {acquisitions[0]}..{acquisitions[-1]} outside daily span "
            f"{dates[0]}..{dates[-1]}")
    ordinals = np.array([d.toordinal() for d in dates])
    bounds = np.searchsorted(ordinals, [a.toordinal() for a in acquisitions], side="right")
    lo = np.concatenate([[0], bounds[:-1]])
    return list(zip(lo.tolist(), bounds.tolist()))


def aggregate_to_acquisitions(values, dates, acquisitions) -> np.ndarray:
    """Sum daily ``values`` over the interval ending at each acquisition."""
    values = np.asarray(values, dtype=float)
    if len(values) != len(dates):
        raise DataError("values and dates differ in length")
    return np.array([values[lo:hi].sum() for lo, hi in acquisition_intervals(dates, acquisitions)])


def as_dates(items) -> list[dt.date]:
    return [d if isinstance(d, dt.date) else dt.date.fromisoformat(d) for d in items]
