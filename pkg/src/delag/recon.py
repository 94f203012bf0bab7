"""Daily gap-free reconstruction: eATC ensemble mean plus per-day GP residual."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .atc import AtcEnsemble, FitConfig, fit_atc, snapshot_moments
from .core import Era5Series, FeatureRaster, SceneStack, ValidationError, read_container, write_container
from .gp import GpConfig, GpModel, compute_residuals, fit_gp_days, gp_predict

logger = logging.getLogger(__name__)

OBSERVED, WITH_GP, ATC_ONLY = 0, 1, 2
SOURCE_NAMES = {OBSERVED: "observed", WITH_GP: "reconstructed-with-gp", ATC_ONLY: "reconstructed-atc-only"}


class MissingGpWarning(UserWarning):
    pass


@dataclass
class ReconstructionResult:
    day: int
    mean: np.ndarray          # model mean, every pixel
    observed: np.ndarray      # observation or NaN
    lower95: np.ndarray
    upper95: np.ndarray
    var_atc: np.ndarray
    var_gp: np.ndarray
    source: np.ndarray        # int8 codes, see SOURCE_NAMES

    @property
    def seamless(self) -> np.ndarray:
        """Observations where present, model mean elsewhere."""
        return np.where(np.isfinite(self.observed), self.observed, self.mean)

    @property
    def variance(self) -> np.ndarray:
        return combine_uncertainty(self.var_atc, self.var_gp)


def combine_uncertainty(var_atc, var_gp) -> np.ndarray:
    """Total variance as the sum of the cross-day (eATC) and within-day (GP) parts."""
    a = np.asarray(var_atc, dtype=np.float64)
    b = np.asarray(var_gp, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("shape_mismatch", f"{a.shape} vs {b.shape}")
    for name, v in (("var_atc", a), ("var_gp", b)):
        bad = np.flatnonzero(v.ravel() < 0)
        if bad.size:
            raise ValidationError("negative_variance", f"{name} has a negative entry", int(bad[0]))
    return a + b


def total_interval(atc_lower, atc_upper, gp_lower, gp_upper) -> tuple[np.ndarray, np.ndarray]:
    """Add the lower and upper bounds of the two stages."""
    al, au, gl, gu = (np.asarray(x, dtype=np.float64) for x in (atc_lower, atc_upper, gp_lower, gp_upper))
    for name, lo, hi in (("atc", al, au), ("gp", gl, gu)):
        bad = np.flatnonzero((lo > hi).ravel())
        if bad.size:
            raise ValidationError("crossed_interval", f"{name} lower bound exceeds upper bound", int(bad[0]))
    return al + gl, au + gu


def reconstruct_day(ens: AtcEnsemble, gp_model: GpModel | None, era5: Era5Series, features: FeatureRaster,
                    stack: SceneStack, d: int, level: float = 0.95, include_noise: bool = True) -> ReconstructionResult:
    h, w = ens.grid_shape
    preds = ens.snapshot_predictions(d, era5)
    atc_mean, atc_sd = snapshot_moments(preds)
    var_atc = atc_sd ** 2
    tail = 100.0 * (1.0 - level) / 2.0
    atc_lo, atc_hi = np.percentile(preds, [tail, 100.0 - tail], axis=0, method="linear")

    i = stack.day_index(d)
    observed = np.full((h, w), np.nan) if i is None else stack.temps[i].astype(np.float64)
    valid = np.isfinite(observed)
    zeros = np.zeros((h, w))

    if valid.any() and gp_model is None:
        msg = f"day {d} has {int(valid.sum())} valid observations but no GP model; using eATC only"
        warnings.warn(msg, MissingGpWarning, stacklevel=2)
        logger.warning(msg)

    if not valid.any() or gp_model is None:
        source = np.where(valid, OBSERVED, ATC_ONLY).astype(np.int8)
        lower, upper = np.minimum(atc_lo, atc_mean), np.maximum(atc_hi, atc_mean)
        return ReconstructionResult(d, atc_mean, observed, lower, upper, var_atc, zeros, source)

    pred = gp_predict(gp_model, features.matrix(), include_noise=include_noise)
    gp_mean = pred.mean.reshape(h, w)
    var_gp = pred.variance.reshape(h, w)
    z = norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(var_gp)
    lower, upper = total_interval(atc_lo, atc_hi, gp_mean - half, gp_mean + half)
    mean = atc_mean + gp_mean
    source = np.where(valid, OBSERVED, WITH_GP).astype(np.int8)
    return ReconstructionResult(d, mean, observed, np.minimum(lower, mean), np.maximum(upper, mean),
                                var_atc, var_gp, source)


def day_residuals(stack: SceneStack, ens: AtcEnsemble, era5: Era5Series) -> dict:
    """Observed minus eATC ensemble mean for every stack day with at least one valid cell."""
    out = {}
    for i, d in enumerate(stack.days):
        plane = stack.temps[i]
        if not np.isfinite(plane).any():
            continue
        mean, _ = snapshot_moments(ens.snapshot_predictions(int(d), era5))
        out[int(d)] = compute_residuals(plane, mean)
    return out


@dataclass
class ReconstructionCube:
    days: np.ndarray
    mean: np.ndarray
    seamless: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    var_atc: np.ndarray
    var_gp: np.ndarray
    source: np.ndarray

    COMPANIONS = ("model", "lower", "upper", "var_atc", "var_gp", "source")

    @classmethod
    def from_results(cls, results: list) -> "ReconstructionCube":
        results = sorted(results, key=lambda r: r.day)
        st = lambda f: np.stack([f(r) for r in results])  # noqa: E731
        return cls(
            days=np.array([r.day for r in results]),
            mean=st(lambda r: r.mean), seamless=st(lambda r: r.seamless),
            lower95=st(lambda r: r.lower95), upper95=st(lambda r: r.upper95),
            var_atc=st(lambda r: r.var_atc), var_gp=st(lambda r: r.var_gp),
            source=st(lambda r: r.source),
        )

    def index(self, day: int) -> int:
        i = int(np.searchsorted(self.days, day))
        if i >= len(self.days) or self.days[i] != day:
            raise KeyError(f"day {day} not reconstructed")
        return i

    @staticmethod
    def paths(path) -> dict:
        p = Path(path)
        stem = str(p.with_suffix("")) if p.suffix == ".lstc" else str(p)
        out = {"seamless": Path(stem + ".lstc")}
        out.update({c: Path(f"{stem}.{c}.lstc") for c in ReconstructionCube.COMPANIONS})
        return out

    def save(self, path) -> dict:
        paths = self.paths(path)
        days = self.days.tolist()
        fields = {"seamless": self.seamless, "model": self.mean, "lower": self.lower95, "upper": self.upper95,
                  "var_atc": self.var_atc, "var_gp": self.var_gp, "source": self.source.astype(np.float32)}
        for key, arr in fields.items():
            meta = {"kind": f"recon_{key}"}
            if key == "source":
                meta["codes"] = {str(k): v for k, v in SOURCE_NAMES.items()}
            write_container(paths[key], arr, days, meta)
        return paths

    @classmethod
    def load(cls, path) -> "ReconstructionCube":
        paths = cls.paths(path)
        arrays = {}
        days = None
        for key, p in paths.items():
            header, arr = read_container(p)
            arrays[key] = arr.astype(np.float64)
            days = np.asarray(header["days"], dtype=np.int64)
        return cls(days=days, mean=arrays["model"], seamless=arrays["seamless"], lower95=arrays["lower"],
                   upper95=arrays["upper"], var_atc=arrays["var_atc"], var_gp=arrays["var_gp"],
                   source=arrays["source"].astype(np.int8))


def reconstruct(ens: AtcEnsemble, models: dict, era5: Era5Series, features: FeatureRaster, stack: SceneStack,
                days=None, level: float = 0.95, include_noise: bool = True, workers: int = 1) -> ReconstructionCube:
    """Reconstruct every requested day (default 1..365)."""
    days = np.arange(1, 366) if days is None else np.asarray(days, dtype=np.int64)

    def one(d):
        return reconstruct_day(ens, models.get(int(d)), era5, features, stack, int(d), level, include_noise)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, days))
    else:
        results = [one(d) for d in days]
    return ReconstructionCube.from_results(results)


def run_pipeline(stack: SceneStack, era5: Era5Series, features: FeatureRaster, fit_config: FitConfig | None = None,
                 gp_config: GpConfig | None = None, days=None, seed: int = 0, workers: int = 1,
                 use_gp: bool = True):
    """eATC fit, per-day GP fits and reconstruction in one call.

    ``use_gp=False`` gives the eATC-only ablation. Returns (ensemble, models, skipped, cube).
    """
    ens = fit_atc(stack, era5, fit_config, seed=seed, workers=workers)
    models, skipped = {}, {}
    if use_gp:
        gp_cfg = gp_config or GpConfig(seed=seed)
        models, skipped = fit_gp_days(day_residuals(stack, ens, era5), features, gp_cfg, workers=workers)
    with warnings.catch_warnings():
        if not use_gp:
            warnings.simplefilter("ignore", MissingGpWarning)
        cube = reconstruct(ens, models, era5, features, stack, days, workers=workers)
    return ens, models, skipped, cube
