"""Landsat cross-track coverage as a function of latitude (spherical Earth)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError

MAX_LATITUDE = 82.0


@dataclass(frozen=True)
class CrosstrackConfig:
    scene_width_km: float = 185.0
    inclination_offset_deg: float = 8.2
    tracks_per_cycle: int = 233
    equator_circumference_km: float = 40075.0

    def __post_init__(self):
        for name in ("scene_width_km", "inclination_offset_deg", "tracks_per_cycle", "equator_circumference_km"):
            if not getattr(self, name) > 0:
                raise ValidationError("bad_crosstrack_config", f"{name} must be positive")


def _check_lat(latitude_deg):
    lat = np.asarray(latitude_deg, dtype=np.float64)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) >= MAX_LATITUDE):
        raise ValidationError("latitude_out_of_domain", f"|latitude| must be < {MAX_LATITUDE} degrees")
    return lat


def crosstrack_ratio(latitude_deg, config: CrosstrackConfig = CrosstrackConfig()):
    """Summed horizontal scene width over one 16-day cycle divided by the parallel's length."""
    lat = _check_lat(latitude_deg)
    swath = config.scene_width_km * np.cos(np.radians(config.inclination_offset_deg)) * config.tracks_per_cycle
    ratio = swath / (config.equator_circumference_km * np.cos(np.radians(lat)))
    return float(ratio) if ratio.ndim == 0 else ratio


def overlap_fraction(latitude_deg, config: CrosstrackConfig = CrosstrackConfig()):
    """Fraction of the parallel seen at least twice per cycle: clamp(ratio - 1, 0, 1)."""
    r = np.clip(np.asarray(crosstrack_ratio(latitude_deg, config)) - 1.0, 0.0, 1.0)
    return float(r) if r.ndim == 0 else r


def parse_range(spec: str) -> np.ndarray:
    """'start:stop:step' (inclusive stop) -> array of latitudes."""
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError as exc:
        raise ValidationError("bad_range", f"expected start:stop:step, got {spec!r}") from exc
    if step <= 0:
        raise ValidationError("bad_range", "step must be positive")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(max(n, 0))


def crosstrack_table(latitudes, config: CrosstrackConfig = CrosstrackConfig()) -> list[tuple[float, float, float]]:
    lats = np.asarray(latitudes, dtype=np.float64)
    return [(float(l), crosstrack_ratio(l, config), overlap_fraction(l, config)) for l in lats]
