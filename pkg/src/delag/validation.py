"""Validation strategies, metrics and the station air-temperature regression.

Three strategies are supported:

1. clear-sky days masked with a cloud pattern taken from another day;
2. heavily clouded days (valid fraction below 0.2) with 20% of the valid
   cells held out;
3. indirect validation through a linear air-temperature model fitted
   separately on observed-LST and reconstructed-LST station rows.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DelagError, Metrics, SceneStack, ValidationError, valid_fraction

logger = logging.getLogger(__name__)

CLEAR_MIN_VALID = 0.99
HEAVY_MAX_VALID = 0.2
COVARIATES = ("lst", "ndvi", "elev", "sol", "sza")
CSV_HEADER = ("station_id", "pixel_row", "pixel_col", "day", "air_temp_k", "ndvi", "elev_m", "sol", "sza_deg",
              "lst_source")
REPORT_VERSION = 1


class RankDeficiencyError(DelagError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


# -- metrics ---------------------------------------------------------------------

def compute_metrics(pred, truth, lower=None, upper=None) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValidationError("length_mismatch", f"{pred.size} predictions vs {truth.size} truth values")
    if pred.size < 2:
        raise ValidationError("too_few_samples", "at least two samples are required")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValidationError("non_finite", "predictions and truth must be finite")
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    bias = float(np.mean(err))
    sst = float(np.sum((truth - truth.mean()) ** 2))
    if sst == 0.0:
        r2, note = None, "undefined: truth has zero variance"
    else:
        r2, note = float(1.0 - np.sum(err ** 2) / sst), None
    cov = None
    if lower is not None or upper is not None:
        if lower is None or upper is None:
            raise ValidationError("bad_interval", "both lower and upper bounds are required")
        lo = np.asarray(lower, dtype=np.float64).ravel()
        hi = np.asarray(upper, dtype=np.float64).ravel()
        if lo.shape != truth.shape or hi.shape != truth.shape:
            raise ValidationError("length_mismatch", "interval bounds must match truth length")
        cov = float(np.mean((truth >= lo) & (truth <= hi)))
    return Metrics(mae=mae, rmse=rmse, r2=r2, bias=bias, n=int(pred.size), cov95=cov, r2_note=note)


# -- strategy 1 and 2 splits ---------------------------------------------------------

@dataclass
class MaskSplit:
    train: np.ndarray        # target grid with test cells set to NaN
    test_index: np.ndarray   # flat indices of held-out cells
    test_truth: np.ndarray   # their observed values


def hypothetical_mask(target: np.ndarray, pattern_cloud: np.ndarray, min_train_fraction: float = 0.01,
                      min_target_valid: float = CLEAR_MIN_VALID) -> MaskSplit:
    """Hide the cells of a near-clear day that are cloudy in another day's pattern.

    ``pattern_cloud`` is True where the pattern day is cloudy.
    """
    target = np.asarray(target, dtype=np.float64)
    pattern = np.asarray(pattern_cloud, dtype=bool)
    if target.shape != pattern.shape:
        raise ValidationError("shape_mismatch", f"{target.shape} vs {pattern.shape}")
    valid = np.isfinite(target)
    if valid.mean() < min_target_valid:
        raise ValidationError("target_not_clear", f"target day only {valid.mean():.3f} valid")
    test = (valid & pattern).ravel()
    train_valid = valid.ravel() & ~test
    if train_valid.sum() < min_train_fraction * target.size:
        raise ValidationError("too_few_training_pixels",
                              f"only {int(train_valid.sum())} training pixels remain after masking")
    idx = np.flatnonzero(test)
    train = target.copy().ravel()
    train[idx] = np.nan
    return MaskSplit(train.reshape(target.shape), idx, target.ravel()[idx])


def holdout_split(grid: np.ndarray, fraction: float = 0.2, seed: int = 0,
                  max_valid_fraction: float | None = HEAVY_MAX_VALID) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, test) split of the valid cells of one day; returns sorted flat indices."""
    grid = np.asarray(grid, dtype=np.float64)
    valid_idx = np.flatnonzero(np.isfinite(grid.ravel()))
    n = valid_idx.size
    if max_valid_fraction is not None and n / grid.size >= max_valid_fraction:
        raise ValidationError("not_heavy_cloud", f"valid fraction {n / grid.size:.3f} >= {max_valid_fraction}")
    if n < 10:
        raise ValidationError("too_few_valid", f"{n} valid cells; at least 10 required")
    k = int(np.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    test = np.sort(rng.choice(valid_idx, size=k, replace=False))
    train = np.setdiff1d(valid_idx, test, assume_unique=True)
    return train, test


def make_validation_split(stack: SceneStack, seed: int = 0, n_clear_days: int = 3,
                          holdout_fraction: float = 0.2) -> tuple[SceneStack, dict]:
    """Apply strategies 1 and 2 to a stack.

    Returns the training stack (test cells removed) and a manifest recording
    which cells were held out.
    """
    rng = np.random.default_rng([seed, 11])
    n_days = len(stack.days)
    fracs = np.array([valid_fraction(stack, i) for i in range(n_days)])
    clear = np.flatnonzero(fracs >= CLEAR_MIN_VALID)
    patterns = np.flatnonzero((fracs > 0.1) & (fracs < 0.9))
    heavy = np.flatnonzero((fracs > 0.0) & (fracs < HEAVY_MAX_VALID))
    temps = stack.temps.astype(np.float64).copy()
    manifest = {"version": 1, "seed": int(seed), "strategy1": [], "strategy2": []}

    if clear.size and patterns.size:
        chosen = np.sort(rng.choice(clear, size=min(n_clear_days, clear.size), replace=False))
        for i in chosen:
            p = int(rng.choice(patterns[patterns != i]))
            split = hypothetical_mask(temps[i], ~np.isfinite(stack.temps[p]))
            temps[i] = split.train
            manifest["strategy1"].append({"day": int(stack.days[i]), "pattern_day": int(stack.days[p]),
                                          "test_index": split.test_index.tolist()})
    for i in heavy:
        try:
            _, test = holdout_split(temps[i], holdout_fraction, seed=int(rng.integers(2 ** 31)))
        except ValidationError as exc:
            logger.info("day %d not used for strategy 2: %s", stack.days[i], exc)
            continue
        temps[i].ravel()[test] = np.nan
        manifest["strategy2"].append({"day": int(stack.days[i]), "test_index": test.tolist()})
    train = SceneStack(stack.days, temps.astype(np.float32), dict(stack.meta))
    return train, manifest


# -- stations and air temperature ----------------------------------------------------------

@dataclass
class StationTable:
    station_id: np.ndarray
    pixel_row: np.ndarray
    pixel_col: np.ndarray
    day: np.ndarray
    air_temp: np.ndarray
    ndvi: np.ndarray
    elev: np.ndarray
    sol: np.ndarray
    sza: np.ndarray
    lst_source: np.ndarray   # "observed" | "reconstructed"

    def __post_init__(self):
        self.station_id = np.asarray(self.station_id).astype(str)
        for name in ("pixel_row", "pixel_col", "day"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("air_temp", "ndvi", "elev", "sol", "sza"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.lst_source = np.asarray(self.lst_source).astype(str)
        n = len(self.station_id)
        for name in CSV_FIELDS:
            if len(getattr(self, name)) != n:
                raise ValidationError("length_mismatch", f"column {name} has the wrong length")
        for name in ("ndvi", "elev", "sol", "sza", "air_temp"):
            bad = np.flatnonzero(~np.isfinite(getattr(self, name)))
            if bad.size:
                raise ValidationError("nan_covariate", f"{name} is not finite", int(bad[0]))
        bad = np.flatnonzero((self.air_temp < 200) | (self.air_temp > 340))
        if bad.size:
            raise ValidationError("air_temp_out_of_range", "air temperature outside [200, 340] K", int(bad[0]))
        bad = np.flatnonzero((self.sza < 0) | (self.sza > 90))
        if bad.size:
            raise ValidationError("sza_out_of_range", "solar zenith angle outside [0, 90]", int(bad[0]))
        bad = np.flatnonzero(~np.isin(self.lst_source, ("observed", "reconstructed")))
        if bad.size:
            raise ValidationError("bad_lst_source", f"unknown lst_source {self.lst_source[bad[0]]!r}", int(bad[0]))

    def __len__(self):
        return len(self.station_id)

    def subset(self, keep) -> "StationTable":
        return StationTable(**{k: getattr(self, k)[keep] for k in CSV_FIELDS})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i in range(len(self)):
                w.writerow([self.station_id[i], int(self.pixel_row[i]), int(self.pixel_col[i]), int(self.day[i]),
                            repr(float(self.air_temp[i])), repr(float(self.ndvi[i])), repr(float(self.elev[i])),
                            repr(float(self.sol[i])), repr(float(self.sza[i])), self.lst_source[i]])

    @classmethod
    def read_csv(cls, path) -> "StationTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValidationError("bad_csv_header", f"expected {','.join(CSV_HEADER)}")
            rows = list(reader)
        cols = list(zip(*rows)) if rows else [()] * len(CSV_HEADER)
        return cls(*[np.asarray(c) for c in cols[:4]],
                   *[np.asarray(c, dtype=np.float64) for c in cols[4:9]], np.asarray(cols[9]))


CSV_FIELDS = ("station_id", "pixel_row", "pixel_col", "day", "air_temp", "ndvi", "elev", "sol", "sza", "lst_source")


@dataclass
class AirTempModel:
    coef: np.ndarray            # lst, ndvi, elev, sol, sza
    intercept: float
    dropped: tuple = ()
    fitted: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"coef": dict(zip(COVARIATES, map(float, self.coef))), "intercept": float(self.intercept),
                "dropped": list(self.dropped)}


def design_matrix(table: StationTable, lst) -> np.ndarray:
    lst = np.asarray(lst, dtype=np.float64)
    if lst.shape != (len(table),):
        raise ValidationError("length_mismatch", f"{lst.shape[0]} LST values for {len(table)} rows")
    if not np.all(np.isfinite(lst)):
        raise ValidationError("non_finite", "LST values must be finite",
                              int(np.flatnonzero(~np.isfinite(lst))[0]))
    return np.column_stack([lst, table.ndvi, table.elev, table.sol, table.sza])


def fit_airtemp(table: StationTable, lst, min_rows: int = 20) -> AirTempModel:
    """Ordinary least squares of air temperature on [lst, ndvi, elev, sol, sza, 1].

    Covariate columns that are constant carry no information beyond the
    intercept; they are dropped (coefficient 0) before the rank check.
    """
    X = design_matrix(table, lst)
    y = table.air_temp
    if X.shape[0] < min_rows:
        raise ValidationError("too_few_rows", f"{X.shape[0]} rows; at least {min_rows} required")
    keep = np.array([np.ptp(X[:, j]) > 0 for j in range(X.shape[1])])
    dropped = tuple(c for c, k in zip(COVARIATES, keep) if not k)
    D = np.column_stack([X[:, keep], np.ones(X.shape[0])])
    names = [c for c, k in zip(COVARIATES, keep) if k] + ["intercept"]
    # rank check on centred, scaled columns so units do not matter
    Dc = D[:, :-1] - D[:, :-1].mean(0)
    Dc = Dc / np.linalg.norm(Dc, axis=0)
    if Dc.shape[1]:
        _, s, vt = np.linalg.svd(Dc, full_matrices=False)
        tol = s.max() * max(Dc.shape) * np.finfo(float).eps * 1e3
        if s.min() <= tol:
            null = vt[-1]
            raise RankDeficiencyError([names[j] for j in np.flatnonzero(np.abs(null) > 1e-6)])
    beta, *_ = np.linalg.lstsq(D, y, rcond=None)
    coef = np.zeros(len(COVARIATES))
    coef[keep] = beta[:-1]
    return AirTempModel(coef=coef, intercept=float(beta[-1]), dropped=dropped, fitted=D @ beta)


def predict_airtemp(model: AirTempModel, lst, ndvi=0.0, elev=0.0, sol=0.0, sza=0.0):
    """Linear evaluation; arguments broadcast."""
    return (model.coef[0] * np.asarray(lst, dtype=np.float64) + model.coef[1] * ndvi + model.coef[2] * elev
            + model.coef[3] * sol + model.coef[4] * sza + model.intercept)


def station_lst(table: StationTable, stack: SceneStack, recon) -> np.ndarray:
    """LST for each station row: the observation for observed rows, the reconstruction otherwise."""
    out = np.empty(len(table))
    for k in range(len(table)):
        r, c, d = table.pixel_row[k], table.pixel_col[k], int(table.day[k])
        if table.lst_source[k] == "observed":
            i = stack.day_index(d)
            v = np.nan if i is None else float(stack.temps[i, r, c])
            if not np.isfinite(v):
                raise ValidationError("missing_observation",
                                      f"row marked observed but stack has no value (day {d}, pixel {r},{c})", k)
        else:
            v = float(recon.mean[recon.index(d), r, c])
        out[k] = v
    return out


def airtemp_comparison(table: StationTable, stack: SceneStack, recon) -> dict:
    """Fit the observed-LST and reconstructed-LST air-temperature models and compare their fit."""
    lst = station_lst(table, stack, recon)
    out = {}
    for source in ("observed", "reconstructed"):
        keep = table.lst_source == source
        sub = table.subset(keep)
        try:
            model = fit_airtemp(sub, lst[keep])
        except DelagError as exc:
            out[source] = {"skipped": str(exc)}
            continue
        m = compute_metrics(model.fitted, sub.air_temp)
        out[source] = {"metrics": m.to_dict(), "model": model.to_dict()}
    if "metrics" in out.get("observed", {}) and "metrics" in out.get("reconstructed", {}):
        out["rmse_gap"] = out["reconstructed"]["metrics"]["RMSE"] - out["observed"]["metrics"]["RMSE"]
    return out


# -- orchestration ----------------------------------------------------------------------------

def _pooled(entries, stack: SceneStack, recon):
    preds, truths, los, his = [], [], [], []
    for e in entries:
        d = e["day"]
        idx = np.asarray(e["test_index"], dtype=np.int64)
        i = stack.day_index(d)
        if i is None:
            raise ValidationError("day_missing", f"day {d} not in stack")
        j = recon.index(d)
        truths.append(stack.temps[i].ravel()[idx].astype(np.float64))
        preds.append(recon.mean[j].ravel()[idx])
        los.append(recon.lower95[j].ravel()[idx])
        his.append(recon.upper95[j].ravel()[idx])
    cat = np.concatenate
    return cat(preds), cat(truths), cat(los), cat(his)


def validate_all(recon, stack: SceneStack, manifest: dict, stations: StationTable | None = None,
                 dataset: str = "synthetic") -> dict:
    """Run the three strategies and return a JSON-serialisable report.

    ``recon`` is the reconstruction trained on the split stack; ``stack`` the
    full observed stack holding the withheld truth.
    """
    strategies = {}
    for key, name in (("strategy1", "clear_sky"), ("strategy2", "heavy_cloud")):
        entries = [e for e in manifest.get(key, []) if len(e["test_index"]) > 0]
        if not entries:
            strategies[name] = {"skipped": "no eligible days"}
            continue
        pred, truth, lo, hi = _pooled(entries, stack, recon)
        if pred.size < 2:
            strategies[name] = {"skipped": "fewer than two test cells"}
            continue
        m = compute_metrics(pred, truth, lo, hi)
        strategies[name] = {"days": [e["day"] for e in entries], "metrics": m.to_dict()}
    if stations is None or len(stations) == 0:
        strategies["air_temperature"] = {"skipped": "no station table"}
    else:
        strategies["air_temperature"] = airtemp_comparison(stations, stack, recon)
    return {"version": REPORT_VERSION, "dataset": dataset, "strategies": strategies}


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != REPORT_VERSION or "strategies" not in doc:
        raise ValidationError("bad_report", f"{path} is not a version-{REPORT_VERSION} report")
    return doc
