"""Per-pixel enhanced annual temperature cycle (eATC) fitting.

The model for pixel ``s`` on day-of-year ``d`` is::

    C + A * cos(2*pi/365 * (d - phi)) + b * era5(d)

Parameters are fitted with full-batch Adam on the mean absolute error over
the pixel's valid observations. Snapshots of the parameters taken along the
tail of the optimisation trajectory form an ensemble whose spread is used as
the first-stage uncertainty.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import DelagError, Era5Series, SceneStack, ValidationError, read_container, write_container

logger = logging.getLogger(__name__)

PERIOD = 365.0
OMEGA = 2.0 * np.pi / PERIOD
PARAM_NAMES = ("C", "A", "phi", "b")

# Internal coupling scale: the optimiser works on u = COUPLING_SCALE * sd(z) * b,
# where z is the ERA5 series with its annual harmonic removed. Larger values
# give finer control over b at fixed learning rate.
COUPLING_SCALE = 10.0


class AtcDivergenceError(DelagError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite training loss at epoch {epoch}")


@dataclass
class AtcParams:
    """eATC coefficients; every field is an array of the same (grid) shape."""

    C: np.ndarray
    A: np.ndarray
    phi: np.ndarray
    b: np.ndarray
    deficient: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shapes = {getattr(self, n).shape for n in PARAM_NAMES}
        if len(shapes) != 1:
            raise ValidationError("shape_mismatch", f"parameter shapes differ: {shapes}")

    @property
    def shape(self):
        return self.C.shape

    def stacked(self) -> np.ndarray:
        return np.stack([getattr(self, n) for n in PARAM_NAMES])


@dataclass
class FitConfig:
    learning_rate: float = 0.1
    epochs: int = 1200
    snapshot_stride: int = 4
    snapshot_window: int = 800
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_valid_obs: int = 8
    laplace_scale_beta: float = 1.0
    chunk_size: int = 1024

    def __post_init__(self):
        if self.snapshot_window % self.snapshot_stride:
            raise ValidationError("bad_fit_config", "snapshot_window must be a multiple of snapshot_stride")
        if self.epochs < self.snapshot_window:
            raise ValidationError("bad_fit_config", "epochs must be >= snapshot_window")
        if self.n_snapshots < 2:
            raise ValidationError("bad_fit_config", "at least two snapshots are required")
        if self.learning_rate <= 0 or self.laplace_scale_beta <= 0:
            raise ValidationError("bad_fit_config", "learning_rate and laplace_scale_beta must be positive")

    @property
    def n_snapshots(self) -> int:
        return self.snapshot_window // self.snapshot_stride

    @classmethod
    def from_dict(cls, d: dict | None) -> "FitConfig":
        return cls(**(d or {}))


@dataclass
class AtcEnsemble:
    """J snapshot copies of the parameter grid, each array shaped (J, height, width)."""

    C: np.ndarray
    A: np.ndarray
    phi: np.ndarray
    b: np.ndarray
    snapshot_epochs: np.ndarray
    deficient: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    loss_history: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.snapshot_epochs = np.asarray(self.snapshot_epochs, dtype=np.int64)
        shapes = {getattr(self, n).shape for n in PARAM_NAMES}
        if len(shapes) != 1:
            raise ValidationError("shape_mismatch", f"snapshot grids differ: {shapes}")
        if self.C.ndim != 3 or self.C.shape[0] < 2:
            raise ValidationError("too_few_snapshots", "ensemble needs J >= 2 snapshots of a 2-D grid")
        if self.snapshot_epochs.shape[0] != self.C.shape[0]:
            raise ValidationError("length_mismatch", "one epoch index per snapshot required")

    @property
    def n_snapshots(self) -> int:
        return self.C.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.C.shape[1:]

    def snapshot(self, j: int) -> AtcParams:
        return AtcParams(self.C[j], self.A[j], self.phi[j], self.b[j])

    def median_params(self) -> AtcParams:
        # phase is circular; take the median of the offsets from snapshot 0
        ref = self.phi[0]
        dphi = np.mod(self.phi - ref + PERIOD / 2, PERIOD) - PERIOD / 2
        return AtcParams(
            np.median(self.C, axis=0),
            np.median(self.A, axis=0),
            np.mod(ref + np.median(dphi, axis=0), PERIOD),
            np.median(self.b, axis=0),
        )

    def snapshot_predictions(self, d: int, era5: Era5Series) -> np.ndarray:
        """(J, height, width) eATC predictions of every snapshot on day ``d``."""
        _check_day(d)
        e = era5.pixel_values([d])[0]
        return self.C + self.A * np.cos(OMEGA * (d - self.phi)) + self.b * e


def _check_day(d) -> None:
    if not 1 <= d <= 366:
        raise ValidationError("day_out_of_range", f"day {d} not in [1, 366]")


def atc_forward(params: AtcParams, d, era5_value):
    """eATC temperature for the given parameters, day(s) and ERA5 value(s)."""
    return params.C + params.A * np.cos(OMEGA * (np.asarray(d, dtype=np.float64) - params.phi)) + params.b * era5_value


# -- objective ---------------------------------------------------------------

def l1_loss(theta: np.ndarray, days: np.ndarray, era5: np.ndarray, obs: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Mean absolute error per pixel.

    ``theta`` is (4, P) raw parameters (C, A, phi, b); ``obs`` and ``era5`` are
    (P, n) with NaN marking invalid observations.
    """
    C, A, phi, b = (t[:, None] for t in theta)
    pred = C + A * np.cos(OMEGA * (days[None, :] - phi)) + b * era5
    valid = np.isfinite(obs)
    r = np.where(valid, obs - pred, 0.0)
    return np.abs(r).sum(axis=1) / np.maximum(valid.sum(axis=1), 1) / beta


def l1_gradient(theta: np.ndarray, days: np.ndarray, era5: np.ndarray, obs: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Analytic (sub)gradient of :func:`l1_loss` w.r.t. (C, A, phi, b), shape (4, P).

    The subgradient at an exactly zero residual is taken as 0.
    """
    C, A, phi, b = (t[:, None] for t in theta)
    arg = OMEGA * (days[None, :] - phi)
    pred = C + A * np.cos(arg) + b * era5
    valid = np.isfinite(obs)
    r = np.where(valid, obs - pred, 0.0)
    n = np.maximum(valid.sum(axis=1), 1)[:, None]
    s = -np.sign(r) / n / beta
    return np.stack([
        s.sum(axis=1),
        (s * np.cos(arg)).sum(axis=1),
        (s * A * OMEGA * np.sin(arg)).sum(axis=1),
        (s * np.where(valid, era5, 0.0)).sum(axis=1),
    ])


# -- initialisation ----------------------------------------------------------

def init_params(stack: SceneStack, era5: Era5Series | None = None, min_valid_obs: int = 8) -> AtcParams:
    """Data-driven starting point for every pixel.

    C is the mean of the valid observations, A half their range, phi the day of
    the warmest observation and b zero. Pixels with fewer than ``min_valid_obs``
    observations get the area-wide medians and are listed in ``deficient``.
    """
    obs = stack.temps.astype(np.float64)
    n_days, h, w = obs.shape
    flat = obs.reshape(n_days, -1)
    valid = np.isfinite(flat)
    count = valid.sum(axis=0)
    ok = count >= max(min_valid_obs, 1)
    deficient = np.flatnonzero(~ok)
    if not ok.any():
        raise ValidationError("no_valid_pixels", f"no pixel has {min_valid_obs} valid observations")
    hi = np.where(valid, flat, -np.inf)
    lo = np.where(valid, flat, np.inf)
    C = np.zeros(h * w)
    A = np.zeros(h * w)
    phi = np.zeros(h * w)
    mean = np.where(valid, flat, 0.0).sum(axis=0) / np.maximum(count, 1)
    C[ok] = mean[ok]
    A[ok] = 0.5 * (hi.max(axis=0) - lo.min(axis=0))[ok]
    phi[ok] = stack.days[np.argmax(hi, axis=0)][ok]
    if deficient.size:
        logger.warning("%d pixel(s) below min_valid_obs=%d; using area medians", deficient.size, min_valid_obs)
        C[~ok] = np.median(C[ok])
        A[~ok] = np.median(A[ok])
        phi[~ok] = np.median(phi[ok])
    shape = (h, w)
    return AtcParams(C.reshape(shape), A.reshape(shape), np.mod(phi, PERIOD).reshape(shape),
                     np.zeros(shape), deficient=deficient)


# -- preconditioned coordinates -------------------------------------------------

@dataclass
class _Coupling:
    """Per-pixel decomposition era5(d) = p0 + p1 cos(wd) + p2 sin(wd) + z(d)."""

    p: np.ndarray       # (3, P)
    scale: np.ndarray   # (P,) = COUPLING_SCALE * sd(z)

    @classmethod
    def from_era5(cls, era5: Era5Series) -> "_Coupling":
        d = era5.days.astype(np.float64)
        basis = np.stack([np.ones_like(d), np.cos(OMEGA * d), np.sin(OMEGA * d)], axis=1)
        vals = era5.values.astype(np.float64)
        coef, *_ = np.linalg.lstsq(basis, vals, rcond=None)       # (3, n_cells)
        sd = (vals - basis @ coef).std(axis=0)
        sd = np.maximum(sd, 1e-6)
        cm = era5.cell_map.ravel()
        return cls(coef[:, cm], COUPLING_SCALE * sd[cm])

    def covariate(self, days: np.ndarray, era5_pix: np.ndarray) -> np.ndarray:
        """Scaled anomaly z(d)/scale, shape (P, n); ``era5_pix`` is (P, n)."""
        d = days.astype(np.float64)[None, :]
        harm = self.p[0][:, None] + self.p[1][:, None] * np.cos(OMEGA * d) + self.p[2][:, None] * np.sin(OMEGA * d)
        return (era5_pix - harm) / self.scale[:, None]

    def to_internal(self, raw: np.ndarray) -> np.ndarray:
        C, A, phi, b = raw
        u = b * self.scale
        c = C + b * self.p[0]
        ac = A * np.cos(OMEGA * phi) + b * self.p[1]
        as_ = A * np.sin(OMEGA * phi) + b * self.p[2]
        return np.stack([c, np.hypot(ac, as_), np.mod(np.arctan2(as_, ac) / OMEGA, PERIOD), u])

    def to_raw(self, internal: np.ndarray) -> np.ndarray:
        c, a, ph, u = internal
        b = u / self.scale
        C = c - b * self.p[0]
        ac = a * np.cos(OMEGA * ph) - b * self.p[1]
        as_ = a * np.sin(OMEGA * ph) - b * self.p[2]
        return np.stack([C, np.hypot(ac, as_), np.mod(np.arctan2(as_, ac) / OMEGA, PERIOD), b])


def _fit_chunk(obs, days, cov, theta0, cfg: FitConfig, snap_epochs):
    """Adam on one block of pixels in internal coordinates.

    obs, cov: (P, n). theta0: (4, P). Returns (snapshots (J, 4, P), loss per epoch (epochs+1, P)).
    """
    valid = np.isfinite(obs)
    n = np.maximum(valid.sum(axis=1), 1)[:, None]
    obs0 = np.where(valid, obs, 0.0)
    cov = np.where(valid, cov, 0.0)
    d = days.astype(np.float64)[None, :]
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    beta = cfg.laplace_scale_beta
    snaps = np.empty((len(snap_epochs), 4, theta.shape[1]))
    losses = np.empty((cfg.epochs + 1, theta.shape[1]))
    want = {e: i for i, e in enumerate(snap_epochs)}
    grad = np.empty_like(theta)
    for epoch in range(cfg.epochs + 1):
        c, a, ph, u = theta
        arg = OMEGA * (d - ph[:, None])
        cosv = np.cos(arg)
        pred = c[:, None] + a[:, None] * cosv + u[:, None] * cov
        r = np.where(valid, obs0 - pred, 0.0)
        losses[epoch] = np.abs(r).sum(axis=1) / n[:, 0] / beta
        if epoch == cfg.epochs:
            break
        s = -np.sign(r) / n / beta
        grad[0] = s.sum(axis=1)
        grad[1] = (s * cosv).sum(axis=1)
        grad[2] = (s * (a[:, None] * OMEGA) * np.sin(arg)).sum(axis=1)
        grad[3] = (s * cov).sum(axis=1)
        t = epoch + 1
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        theta -= (lr / (1 - b1 ** t)) * m / (np.sqrt(v / (1 - b2 ** t)) + eps)
        if t in want:
            snaps[want[t]] = theta
    return snaps, losses


def fit_atc(stack: SceneStack, era5: Era5Series, config: FitConfig | None = None, seed: int = 0,
            workers: int = 1) -> AtcEnsemble:
    """Fit the eATC model to every pixel and collect the snapshot ensemble.

    Full-batch Adam is deterministic, so ``seed`` only labels the run; results
    do not depend on ``workers``.
    """
    cfg = config or FitConfig()
    n_days, h, w = stack.temps.shape
    if era5.cell_map.shape != (h, w):
        raise ValidationError("shape_mismatch", f"era5 grid {era5.cell_map.shape} vs stack {(h, w)}")
    era5.rows_for(stack.days)  # raises on day-axis mismatch
    init = init_params(stack, era5, cfg.min_valid_obs)
    coupling = _Coupling.from_era5(era5)
    P = h * w
    obs = stack.temps.reshape(n_days, P).T.astype(np.float64)
    e_pix = era5.pixel_values(stack.days).reshape(n_days, P).T
    cov = coupling.covariate(stack.days, e_pix)
    theta0 = coupling.to_internal(np.stack([init.C.ravel(), init.A.ravel(), init.phi.ravel(), init.b.ravel()]))
    first = cfg.epochs - cfg.snapshot_window + cfg.snapshot_stride
    snap_epochs = np.arange(first, cfg.epochs + 1, cfg.snapshot_stride)

    chunks = [slice(i, min(i + cfg.chunk_size, P)) for i in range(0, P, cfg.chunk_size)]

    def run(sl):
        return _fit_chunk(obs[sl], stack.days, cov[sl], theta0[:, sl], cfg, snap_epochs)

    logger.info("fitting eATC on %d pixels x %d days (%d chunks, seed=%d)", P, n_days, len(chunks), seed)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, chunks))
    else:
        results = [run(sl) for sl in chunks]
    snaps = np.concatenate([r[0] for r in results], axis=2)      # (J, 4, P)
    losses = np.concatenate([r[1] for r in results], axis=1)     # (E+1, P)

    ok = np.ones(P, dtype=bool)
    ok[init.deficient] = False
    history = losses[:, ok].mean(axis=1)
    bad = np.flatnonzero(~np.isfinite(history))
    if bad.size:
        raise AtcDivergenceError(int(bad[0]))

    raw = np.stack([coupling.to_raw(s) for s in snaps])          # (J, 4, P)
    if init.deficient.size:
        med = np.median(raw[:, :, ok], axis=2)
        raw[:, :, ~ok] = med[:, :, None]
    J = raw.shape[0]
    grids = raw.reshape(J, 4, h, w)
    return AtcEnsemble(
        grids[:, 0], grids[:, 1], grids[:, 2], grids[:, 3],
        snapshot_epochs=snap_epochs, deficient=init.deficient, loss_history=history,
        info={"seed": int(seed), "config": asdict(cfg)},
    )


# -- ensemble prediction ---------------------------------------------------------

def ensemble_predict(ens: AtcEnsemble, d: int, era5: Era5Series) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean and across-snapshot sample standard deviation on day ``d``."""
    return snapshot_moments(ens.snapshot_predictions(d, era5))


def snapshot_moments(preds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample sd over axis 0, shifted by the first snapshot so identical snapshots give sd 0 exactly."""
    dev = preds - preds[0]
    mean = preds[0] + dev.mean(axis=0)
    return mean, dev.std(axis=0, ddof=1)


def atc_interval(ens: AtcEnsemble, d: int, era5: Era5Series, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Empirical percentile interval of the snapshot predictions."""
    if not 0.0 < level < 1.0:
        raise ValidationError("bad_level", f"level {level} must lie in (0, 1)")
    need = int(np.ceil(2.0 / (1.0 - level) - 1e-9))
    if ens.n_snapshots < need:
        raise ValidationError("too_few_snapshots", f"{ens.n_snapshots} snapshots; {need} needed for level {level}")
    preds = ens.snapshot_predictions(d, era5)
    tail = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(preds, [tail, 100.0 - tail], axis=0, method="linear")
    return lower, upper


# -- persistence ---------------------------------------------------------------------

def _paths(path) -> tuple[Path, dict]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".lstc", ".json") else p
    manifest = stem.with_suffix(".json") if stem.suffix == "" else Path(str(stem) + ".json")
    planes = {n: Path(f"{stem}.{n}.lstc") for n in PARAM_NAMES}
    return manifest, planes


def save_ensemble(ens: AtcEnsemble, path) -> Path:
    """Write one J-plane LSTC container per parameter plus a JSON manifest; returns the manifest path."""
    manifest, planes = _paths(path)
    epochs = ens.snapshot_epochs.tolist()
    for name, p in planes.items():
        write_container(p, getattr(ens, name), epochs, {"kind": "atc_snapshots", "param": name})
    doc = {
        "kind": "atc_ensemble",
        "n_snapshots": ens.n_snapshots,
        "grid": list(ens.grid_shape),
        "snapshot_epochs": epochs,
        "planes": {n: p.name for n, p in planes.items()},
        "deficient": ens.deficient.tolist(),
        "loss_history": None if ens.loss_history is None else [float(x) for x in ens.loss_history],
        "info": ens.info,
    }
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return manifest


def load_ensemble(path) -> AtcEnsemble:
    manifest, _ = _paths(path)
    doc = json.loads(manifest.read_text())
    arrays = {}
    for name in PARAM_NAMES:
        _, arr = read_container(manifest.parent / doc["planes"][name])
        arrays[name] = arr.astype(np.float64)
    hist = doc.get("loss_history")
    return AtcEnsemble(
        snapshot_epochs=np.asarray(doc["snapshot_epochs"]),
        deficient=np.asarray(doc.get("deficient", []), dtype=np.int64),
        loss_history=None if hist is None else np.asarray(hist),
        info=doc.get("info", {}),
        **arrays,
    )
