"""Psychrometric helpers and daily FAO-56 Penman-Monteith reference ET."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

STANDARD_PRESSURE = 101.3  # kPa, sea level


def saturation_vapour_pressure(t: float) -> float:
    """e°(T) in kPa for air temperature ``t`` in °C (FAO-56)."""
    return 0.6108 * math.exp(17.27 * t / (t + 237.3))


def vapour_pressure_slope(t: float) -> float:
    """Slope of the saturation vapour pressure curve at ``t`` (FAO-56)."""
    return 4098.0 * saturation_vapour_pressure(t) / (t + 237.3) ** 2


def psychrometric_constant(pressure: float) -> float:
    return 0.665e-3 * pressure


@dataclass(frozen=True)
class PsychrometricState:
    delta: float
    gamma: float

    def __post_init__(self):
        if not (self.delta > 0 and self.gamma > 0):
            raise DataError(f"invalid psychrometric state delta={self.delta} gamma={self.gamma}")


def psychrometrics(t_min: float, t_max: float, pressure: float = STANDARD_PRESSURE):
    """Return ``(e_s, delta, gamma)`` for one day.

    ``e_s`` averages e° at both temperature extremes; ``delta`` is taken at the
    midpoint temperature.
    """
    if t_max < t_min:
        raise DataError(f"t_max ({t_max}) < t_min ({t_min})")
    if not pressure > 0:
        raise DataError(f"pressure must be positive, got {pressure}")
    e_s = 0.5 * (saturation_vapour_pressure(t_min) + saturation_vapour_pressure(t_max))
    delta = vapour_pressure_slope(0.5 * (t_min + t_max))
    return e_s, delta, psychrometric_constant(pressure)


@dataclass(frozen=True)
class DailyWeather:
    """One day of meteorological forcing.

    ``t_mean`` and ``e_s`` are derived from the temperature extremes when not
    given explicitly.
    """

    date: dt.date
    t_min: float
    t_max: float
    u2: float
    rn: float
    e_a: float
    g: float = 0.0
    precip: float = 0.0
    t_mean: float | None = field(default=None)
    e_s: float | None = field(default=None)

    def __post_init__(self):
        if self.t_mean is None:
            object.__setattr__(self, "t_mean", 0.5 * (self.t_min + self.t_max))
        if self.e_s is None:
            e_s = 0.5 * (saturation_vapour_pressure(self.t_min)
                         + saturation_vapour_pressure(self.t_max))
            object.__setattr__(self, "e_s", e_s)
        values = (self.t_min, self.t_max, self.t_mean, self.u2, self.rn, self.g,
                  self.e_s, self.e_a, self.precip)
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"{self.date}: non-finite weather value")
        if not self.t_min <= self.t_mean <= self.t_max:
            raise DataError(f"{self.date}: need t_min <= t_mean <= t_max")
        if self.e_a < 0 or self.e_a > self.e_s:
            raise DataError(f"{self.date}: need 0 <= e_a <= e_s (e_a={self.e_a}, e_s={self.e_s:.4f})")
        if self.u2 < 0:
            raise DataError(f"{self.date}: negative wind speed")
        if self.precip < 0:
            raise DataError(f"{self.date}: negative precipitation")


def penman_monteith_et0_flagged(w: DailyWeather, p: PsychrometricState) -> tuple[float, bool]:
    """Reference ET in mm/day and whether the raw value was clamped at zero."""
    denominator = p.delta + p.gamma * (1.0 + 0.34 * w.u2)
    if not denominator > 0:
        raise DataError(f"{w.date}: non-positive Penman-Monteith denominator")
    radiation = 0.408 * p.delta * (w.rn - w.g)
    aerodynamic = p.gamma * (900.0 / (w.t_mean + 273.0)) * w.u2 * (w.e_s - w.e_a)
    et0 = (radiation + aerodynamic) / denominator
    if et0 < 0:
        return 0.0, True
    return et0, False


def penman_monteith_et0(w: DailyWeather, p: PsychrometricState) -> float:
    return penman_monteith_et0_flagged(w, p)[0]


def state_for(w: DailyWeather, pressure: float = STANDARD_PRESSURE) -> PsychrometricState:
    """Psychrometric state for a weather record (slope at the record's mean temperature)."""
    if not pressure > 0:
        raise DataError(f"pressure must be positive, got {pressure}")
    return PsychrometricState(vapour_pressure_slope(w.t_mean), psychrometric_constant(pressure))


WEATHER_COLUMNS = ("date", "t_min", "t_max", "u2", "rn", "g", "e_a", "precip")


def read_weather_csv(path) -> list[DailyWeather]:
    """Parse a weather CSV; a missing ``g`` column means zero soil heat flux."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in WEATHER_COLUMNS if c != "g" and c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(DailyWeather(
                    date=dt.date.fromisoformat(row["date"].strip()),
                    t_min=float(row["t_min"]), t_max=float(row["t_max"]),
                    u2=float(row["u2"]), rn=float(row["rn"]),
                    g=float(row["g"]) if row.get("g") not in (None, "") else 0.0,
                    e_a=float(row["e_a"]), precip=float(row["precip"]),
                ))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not out:
        raise DataError(f"{path}: no weather records")
    return out


def write_weather_csv(path, weather) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WEATHER_COLUMNS)
        for w in weather:
            writer.writerow([w.date.isoformat(), repr(w.t_min), repr(w.t_max), repr(w.u2),
                             repr(w.rn), repr(w.g), repr(w.e_a), repr(w.precip)])
