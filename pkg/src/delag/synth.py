"""Synthetic scene stacks with known ground truth.

Every generated artefact is a pure function of :class:`SynthConfig`. Per-day
random streams are derived from ``(seed, day, tag)`` so days can be produced
independently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .atc import OMEGA, AtcParams, atc_forward
from .core import DelagError, Era5Series, FeatureRaster, SceneStack, ValidationError

CYCLE = 16
CADENCES = {
    "4-per-16": (0, 4, 8, 12),
    "2-per-16": (0, 8),
    "1-per-16": (0,),
}

_TAGS = {"era5": 1, "features": 2, "params": 3, "residual": 4, "noise": 5, "cloud": 6,
         "daytype": 7, "stations": 8}


class SynthConfigError(DelagError):
    pass


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    seed: int = 0
    cadence: str = "4-per-16"
    c_range: tuple = (205.0, 220.0)
    a_range: tuple = (8.0, 15.0)
    phi_range: tuple = (180.0, 220.0)
    b_range: tuple = (0.25, 0.35)
    era5_mean: float = 285.0
    era5_amplitude: float = 12.0
    era5_phase: float = 200.0
    era5_ar1_rho: float = 0.7
    era5_daily_sd: float = 3.0
    era5_cell_px: int = 16
    residual_lengthscale: float = 0.35
    residual_sd: float = 1.5
    residual_nugget: float = 0.1     # iid part of the residual, as a fraction of residual_sd
    obs_noise_sd: float = 0.5
    cloud_fraction_target: float = 0.5
    cloud_blob_scale: float = 0.08   # smoothing sigma as a fraction of the shorter grid side
    p_clear: float = 0.0
    p_heavy: float = 0.0
    p_overcast: float = 0.0
    heavy_cloud_fraction: float = 0.85
    require_valid: bool = True

    def __post_init__(self):
        for name in ("c_range", "a_range", "phi_range", "b_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise SynthConfigError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("era5_daily_sd", "residual_sd", "obs_noise_sd", "residual_nugget"):
            if getattr(self, name) < 0:
                raise SynthConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.era5_ar1_rho < 1.0:
            raise SynthConfigError("era5_ar1_rho must lie in [0, 1)")
        if self.cadence not in CADENCES:
            raise SynthConfigError(f"unknown cadence {self.cadence!r}; choose from {sorted(CADENCES)}")
        for name in ("cloud_fraction_target", "heavy_cloud_fraction", "p_clear", "p_heavy", "p_overcast"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthConfigError(f"{name} must lie in [0, 1]")
        if self.p_clear + self.p_heavy + self.p_overcast > 1.0:
            raise SynthConfigError("p_clear + p_heavy + p_overcast exceeds 1")
        if self.require_valid and self.cloud_fraction_target >= 1.0:
            raise SynthConfigError("cloud_fraction_target = 1 leaves no valid pixel but require_valid is set")
        if self.height <= 0 or self.width <= 0:
            raise SynthConfigError("grid must be non-empty")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(f"unknown synth config keys: {sorted(unknown)}")
        for k in ("c_range", "a_range", "phi_range", "b_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class GroundTruth:
    true_params: AtcParams
    days: np.ndarray                 # 1..365
    true_residuals: np.ndarray       # (365, H, W)
    true_lst: np.ndarray             # (365, H, W), gap-free
    noisy_lst: np.ndarray            # true_lst + observation noise, gap-free, float32
    meta: dict = field(default_factory=dict)

    def on_days(self, days) -> np.ndarray:
        return self.true_lst[np.asarray(days) - 1]


def _rng(seed: int, tag: str, day: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _TAGS[tag], int(day)])


def schedule(cadence: str, first_day: int = 1, last_day: int = 365) -> np.ndarray:
    """Observation days of a repeating 16-day cadence."""
    if cadence not in CADENCES:
        raise SynthConfigError(f"unknown cadence {cadence!r}")
    offsets = CADENCES[cadence]
    days = [first_day + CYCLE * k + o for k in range(last_day // CYCLE + 2) for o in offsets]
    return np.array([d for d in days if first_day <= d <= last_day], dtype=np.int64)


def thin_cadence(stack: SceneStack, cadence: str, first_day: int = 1) -> SceneStack:
    """Keep only the days of ``stack`` that fall on the coarser ``cadence``."""
    if cadence not in CADENCES:
        raise SynthConfigError(f"unknown cadence {cadence!r}")
    target = set(CADENCES[cadence])
    phase = np.mod(stack.days - first_day, CYCLE)
    present = set(phase.tolist())
    if not target <= present:
        raise ValidationError(
            "impossible_thinning",
            f"stack phases {sorted(present)} do not contain target phases {sorted(target)}",
        )
    return stack.subset_days(np.isin(phase, sorted(target)))


def _smooth_field(rng, h, w, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="reflect")
    return (f - f.mean()) / (f.std() + 1e-12)


def cloud_mask(rng: np.random.Generator, h: int, w: int, fraction: float, blob_scale: float) -> np.ndarray:
    """Contiguous cloud blobs covering round(fraction * h * w) cells. True = cloudy."""
    n_cloud = int(round(fraction * h * w))
    mask = np.zeros(h * w, dtype=bool)
    if n_cloud == 0:
        return mask.reshape(h, w)
    f = _smooth_field(rng, h, w, max(blob_scale * min(h, w), 0.5)).ravel()
    # stable ordering with a tiny index tie-break keeps the count exact
    order = np.argsort(-f, kind="stable")
    mask[order[:n_cloud]] = True
    return mask.reshape(h, w)


def make_features(cfg: SynthConfig) -> FeatureRaster:
    rng = _rng(cfg.seed, "features")
    h, w = cfg.height, cfg.width
    sigma = max(0.1 * min(h, w), 1.0)
    bands = []
    for lo, hi in ((0.03, 0.25), (0.04, 0.22), (0.02, 0.18), (0.10, 0.45)):
        f = _smooth_field(rng, h, w, sigma) + 0.5 * rng.standard_normal((h, w))
        f = (f - f.min()) / (f.max() - f.min() + 1e-12)
        bands.append(lo + (hi - lo) * f)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    return FeatureRaster(np.stack(bands + [xx, yy]).astype(np.float32))


def make_era5(cfg: SynthConfig) -> Era5Series:
    rng = _rng(cfg.seed, "era5")
    h, w = cfg.height, cfg.width
    px = max(cfg.era5_cell_px, 1)
    ny, nx = -(-h // px), -(-w // px)
    n_cells = ny * nx
    rows = np.arange(h)[:, None] // px
    cols = np.arange(w)[None, :] // px
    cell_map = rows * nx + cols
    days = np.arange(1, 366)
    anomaly = np.zeros(len(days))
    innov_sd = cfg.era5_daily_sd * np.sqrt(1.0 - cfg.era5_ar1_rho ** 2)
    anomaly[0] = rng.normal(0.0, cfg.era5_daily_sd)
    for i in range(1, len(days)):
        anomaly[i] = cfg.era5_ar1_rho * anomaly[i - 1] + rng.normal(0.0, innov_sd)
    offsets = rng.normal(0.0, 0.5, n_cells)
    local = rng.normal(0.0, 0.3 * cfg.era5_daily_sd, (len(days), n_cells))
    seasonal = cfg.era5_mean + cfg.era5_amplitude * np.cos(OMEGA * (days - cfg.era5_phase))
    values = seasonal[:, None] + anomaly[:, None] + offsets[None, :] + local
    values = np.clip(values, 181.0, 359.0).astype(np.float32)
    return Era5Series(days, values, cell_map)


def _residual_surface(cfg: SynthConfig, day: int, X: np.ndarray, n_terms: int = 64) -> np.ndarray:
    """Random-Fourier-feature surface over the feature vectors plus an iid nugget."""
    rng = _rng(cfg.seed, "residual", day)
    F = X.shape[1]
    omega = rng.standard_normal((F, n_terms)) / cfg.residual_lengthscale
    phase = rng.uniform(0.0, 2.0 * np.pi, n_terms)
    weight = rng.standard_normal(n_terms)
    smooth = np.sqrt(2.0 / n_terms) * np.cos(X @ omega + phase) @ weight
    nugget = rng.standard_normal(X.shape[0]) * cfg.residual_nugget
    return cfg.residual_sd * (smooth + nugget)


def generate(cfg: SynthConfig) -> tuple[SceneStack, Era5Series, FeatureRaster, GroundTruth]:
    """Build an observed stack, its forcing and features, and the exact ground truth."""
    h, w = cfg.height, cfg.width
    era5 = make_era5(cfg)
    features = make_features(cfg)
    X = features.matrix()

    prng = _rng(cfg.seed, "params")
    true = AtcParams(
        prng.uniform(*cfg.c_range, (h, w)),
        prng.uniform(*cfg.a_range, (h, w)),
        prng.uniform(*cfg.phi_range, (h, w)),
        prng.uniform(*cfg.b_range, (h, w)),
    )

    all_days = np.arange(1, 366)
    e_pix = era5.pixel_values(all_days)
    atc_part = atc_forward(true, all_days[:, None, None], e_pix)
    residuals = np.stack([_residual_surface(cfg, int(d), X).reshape(h, w) for d in all_days])
    true_lst = atc_part + residuals
    noisy = np.empty_like(true_lst, dtype=np.float32)
    for i, d in enumerate(all_days):
        nrng = _rng(cfg.seed, "noise", int(d))
        noisy[i] = (true_lst[i] + nrng.normal(0.0, cfg.obs_noise_sd, (h, w))).astype(np.float32)

    obs_days = schedule(cfg.cadence)
    trng = _rng(cfg.seed, "daytype")
    u = trng.uniform(size=len(obs_days))
    fractions = np.full(len(obs_days), cfg.cloud_fraction_target)
    fractions[u < cfg.p_overcast] = 1.0
    fractions[(u >= cfg.p_overcast) & (u < cfg.p_overcast + cfg.p_heavy)] = cfg.heavy_cloud_fraction
    clear = (u >= cfg.p_overcast + cfg.p_heavy) & (u < cfg.p_overcast + cfg.p_heavy + cfg.p_clear)
    fractions[clear] = 0.0

    temps = np.empty((len(obs_days), h, w), dtype=np.float32)
    for i, d in enumerate(obs_days):
        cloudy = cloud_mask(_rng(cfg.seed, "cloud", int(d)), h, w, fractions[i], cfg.cloud_blob_scale)
        temps[i] = np.where(cloudy, np.float32(np.nan), noisy[d - 1])

    stack = SceneStack(obs_days, temps, {"cadence": cfg.cadence, "seed": int(cfg.seed)})
    truth = GroundTruth(true, all_days, residuals, true_lst, noisy,
                        meta={"cloud_fractions": fractions.tolist()})
    return stack, era5, features, truth


def truth_params_doc(cfg: SynthConfig, truth: GroundTruth) -> dict:
    """JSON-serialisable ground-truth sidecar."""
    p = truth.true_params
    return {
        "config": cfg.to_dict(),
        "grid": list(p.shape),
        "params": {n: getattr(p, n).ravel().tolist() for n in ("C", "A", "phi", "b")},
        "cloud_fractions": truth.meta.get("cloud_fractions"),
    }


def load_truth_params(path) -> AtcParams:
    doc = json.loads(Path(path).read_text())
    shape = tuple(doc["grid"])
    return AtcParams(*(np.asarray(doc["params"][n]).reshape(shape) for n in ("C", "A", "phi", "b")))


def solar_zenith_noon(day, latitude_deg: float) -> np.ndarray:
    """Noon solar zenith angle in degrees from a simple declination formula."""
    decl = 23.44 * np.sin(2.0 * np.pi * (284 + np.asarray(day, dtype=np.float64)) / 365.0)
    return np.clip(np.abs(latitude_deg - decl), 0.0, 90.0)


@dataclass
class StationConfig:
    n_stations: int = 7
    latitude_deg: float = 40.7
    coef: tuple = (0.7, -3.0, -0.0065, 2.0, -0.05)   # lst, ndvi, elev, sol, sza
    intercept: float = 82.0
    air_noise_sd: float = 1.5


def make_stations(cfg: SynthConfig, truth: GroundTruth, stack: SceneStack, features: FeatureRaster,
                  scfg: StationConfig | None = None):
    """Station-day rows for every day of the year with air temperature planted from the true LST."""
    from .validation import StationTable

    scfg = scfg or StationConfig()
    rng = _rng(cfg.seed, "stations")
    h, w = cfg.height, cfg.width
    pix = rng.choice(h * w, size=min(scfg.n_stations, h * w), replace=False)
    rows, cols = np.divmod(pix, w)
    red, nir = features.values[0].astype(np.float64), features.values[3].astype(np.float64)
    ndvi_grid = (nir - red) / (nir + red)
    elev = rng.uniform(0.0, 200.0, len(pix))
    shade = rng.uniform(0.8, 1.0, len(pix))
    out = {k: [] for k in ("sid", "r", "c", "d", "air", "ndvi", "elev", "sol", "sza", "src")}
    days = truth.days
    sza = solar_zenith_noon(days, scfg.latitude_deg)
    sol_season = 0.5 + 0.5 * np.cos(2.0 * np.pi * (days - 172) / 365.0)
    a1, a2, a3, a4, a5 = scfg.coef
    for k, (r, c) in enumerate(zip(rows, cols)):
        lst = truth.true_lst[:, r, c]
        sol = sol_season * shade[k]
        air = (a1 * lst + a2 * ndvi_grid[r, c] + a3 * elev[k] + a4 * sol + a5 * sza + scfg.intercept
               + rng.normal(0.0, scfg.air_noise_sd, len(days)))
        for i, d in enumerate(days):
            j = stack.day_index(int(d))
            observed = j is not None and np.isfinite(stack.temps[j, r, c])
            out["sid"].append(f"S{k:02d}")
            out["r"].append(int(r))
            out["c"].append(int(c))
            out["d"].append(int(d))
            out["air"].append(float(air[i]))
            out["ndvi"].append(float(ndvi_grid[r, c]))
            out["elev"].append(float(elev[k]))
            out["sol"].append(float(sol[i]))
            out["sza"].append(float(sza[i]))
            out["src"].append("observed" if observed else "reconstructed")
    return StationTable(out["sid"], out["r"], out["c"], out["d"], out["air"], out["ndvi"], out["elev"],
                        out["sol"], out["sza"], out["src"])
