"""Per-day Gaussian-process regression of eATC residual surfaces.

Two inference modes share one model type:

* ``exact`` -- dense Cholesky of ``K + noise*I``; hyperparameters maximise the
  exact log marginal likelihood.
* ``inducing`` -- M inducing points with a whitened Gaussian variational
  posterior; hyperparameters and inducing locations maximise the minibatch
  evidence lower bound (see :mod:`delag._svgp`).

Features are standardised per dimension using the training cells of the day;
residual targets are centred by their training mean. The kernel is an
isotropic RBF over the standardised features.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular

from .core import DelagError, ValidationError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class GpSkipped(DelagError):
    """Raised when a day has too few residuals to train a GP."""

    def __init__(self, n: int, min_train: int):
        self.n = n
        self.min_train = min_train
        super().__init__(f"only {n} valid residuals (< min_train={min_train}); day is GP-skipped")


class GpNumericError(DelagError):
    pass


@dataclass(frozen=True)
class KernelHyper:
    lengthscale: float
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        for name in ("lengthscale", "signal_variance", "noise_variance"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError("bad_hyper", f"{name}={v} must be finite and > 0")

    @property
    def log(self) -> np.ndarray:
        return np.log([self.lengthscale, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, theta) -> "KernelHyper":
        ls, sv, nv = np.exp(np.asarray(theta, dtype=np.float64))
        return cls(float(ls), float(sv), float(nv))


@dataclass
class GpConfig:
    min_train: int = 30
    exact_threshold: int = 4096
    n_inducing: int = 512
    batch_size: int = 1024
    schedule: tuple = ((0.05, 50), (0.005, 10))
    hyper_subset: int = 256
    include_noise: bool = True
    jitter: float = 1e-6
    max_jitter: float = 1e-2
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "GpConfig":
        d = dict(d or {})
        if "schedule" in d:
            d["schedule"] = tuple(tuple(s) for s in d["schedule"])
        return cls(**d)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def rbf_kernel(x, x2, hyper: KernelHyper):
    """signal_variance * exp(-|x - x2|^2 / (2 lengthscale^2)).

    1-D inputs give a scalar; (n, F) and (m, F) inputs give an (n, m) matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape[-1] != x2.shape[-1]:
        raise ValidationError("dim_mismatch", f"feature dims {x.shape[-1]} and {x2.shape[-1]} differ")
    if x.ndim == 1 and x2.ndim == 1:
        d2 = float(np.sum((x - x2) ** 2))
        return hyper.signal_variance * np.exp(-0.5 * d2 / hyper.lengthscale ** 2)
    d2 = _sqdist(np.atleast_2d(x), np.atleast_2d(x2))
    return hyper.signal_variance * np.exp(-0.5 * d2 / hyper.lengthscale ** 2)


def safe_cholesky(K: np.ndarray, scale: float, jitter: float = 1e-6, max_jitter: float = 1e-2):
    """Cholesky with escalating diagonal jitter (``jitter * scale``, x10 per retry).

    Returns (L, jitter_used). Raises :class:`GpNumericError` with condition
    diagnostics when even ``max_jitter`` fails.
    """
    j = jitter
    eye = np.eye(K.shape[0])
    while j <= max_jitter * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + (j * scale) * eye), j
        except np.linalg.LinAlgError:
            j *= 10.0
    eig = np.linalg.eigvalsh(K)
    raise GpNumericError(
        f"Cholesky failed with jitter up to {max_jitter}*{scale:.3g}; "
        f"min eigenvalue {eig[0]:.3e}, max {eig[-1]:.3e}, condition {eig[-1] / max(abs(eig[0]), 1e-300):.3e}"
    )


def log_marginal_likelihood(theta, X: np.ndarray, y: np.ndarray, jitter: float = 1e-6, grad: bool = False):
    """Exact GP log marginal likelihood (zero mean) at log-hyperparameters ``theta``.

    ``theta`` = (log lengthscale, log signal_variance, log noise_variance). The
    covariance is ``sv * (R + jitter*I) + noise*I`` with R the unit RBF matrix.
    With ``grad=True`` also returns d/d theta.
    """
    ls, sv, nv = np.exp(np.asarray(theta, dtype=np.float64))
    n = X.shape[0]
    D = _sqdist(X, X)
    R = np.exp(-0.5 * D / ls ** 2)
    Ky = sv * R + (sv * jitter + nv) * np.eye(n)
    try:
        L = np.linalg.cholesky(Ky)
    except np.linalg.LinAlgError as exc:
        raise GpNumericError(f"covariance not positive definite at theta={theta}") from exc
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    if not grad:
        return lml
    Kinv, info = lapack.dpotri(L, lower=1)
    if info:
        raise GpNumericError(f"dpotri failed with info={info}")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    W = np.outer(alpha, alpha) - Kinv
    dK_ls = sv * R * D / ls ** 2
    dK_sv = sv * R + sv * jitter * np.eye(n)
    g = np.array([
        0.5 * np.sum(W * dK_ls),
        0.5 * np.sum(W * dK_sv),
        0.5 * nv * np.trace(W),
    ])
    return lml, g


@dataclass
class GpModel:
    hyper: KernelHyper
    mode: str
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    # exact mode: standardised training inputs and centred targets
    train_x: np.ndarray | None = None
    train_y: np.ndarray | None = None
    # inducing mode: standardised inducing inputs and whitened q(v) = N(q_mu, q_cov)
    inducing_x: np.ndarray | None = None
    q_mu: np.ndarray | None = None
    q_cov: np.ndarray | None = None
    jitter: float = 1e-6
    objective_trace: list = field(default_factory=list)
    day: int | None = None
    n_train: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.x_mean.shape[0]:
            raise ValidationError(
                "dim_mismatch", f"query features have shape {X.shape}; model expects {self.x_mean.shape[0]} dims"
            )
        return (X - self.x_mean) / self.x_sd

    def _factor(self):
        if "L" not in self._cache:
            h = self.hyper
            if self.mode == "exact":
                K = rbf_kernel(self.train_x, self.train_x, h)
                K[np.diag_indices_from(K)] += h.noise_variance
                L, j = safe_cholesky(K, h.signal_variance, self.jitter)
                self._cache["L"] = L
                self._cache["alpha"] = cho_solve((L, True), self.train_y)
            else:
                Kuu = rbf_kernel(self.inducing_x, self.inducing_x, h)
                L, j = safe_cholesky(Kuu, h.signal_variance, self.jitter)
                self._cache["L"] = L
        return self._cache["L"]


@dataclass
class GpPrediction:
    mean: np.ndarray
    variance: np.ndarray
    latent_variance: np.ndarray


def gp_predict(model: GpModel, query_x: np.ndarray, include_noise: bool = True) -> GpPrediction:
    """Posterior mean and variance of the residual at query feature vectors (n, F)."""
    Xs = model.standardize(query_x)
    h = model.hyper
    L = model._factor()
    if model.mode == "exact":
        Ks = rbf_kernel(model.train_x, Xs, h)
        mean = Ks.T @ model._cache["alpha"]
        V = solve_triangular(L, Ks, lower=True)
        latent = h.signal_variance - (V * V).sum(0)
    elif model.mode == "inducing":
        Ku = rbf_kernel(model.inducing_x, Xs, h)
        Aw = solve_triangular(L, Ku, lower=True)
        mean = Aw.T @ model.q_mu
        latent = h.signal_variance - (Aw * Aw).sum(0) + np.einsum("in,ij,jn->n", Aw, model.q_cov, Aw)
    else:
        raise ValidationError("bad_mode", f"unknown GP mode {model.mode!r}")
    latent = np.maximum(latent, 0.0)
    var = latent + h.noise_variance if include_noise else latent
    return GpPrediction(mean + model.y_mean, var, latent)


def compute_residuals(observed: np.ndarray, atc_mean: np.ndarray) -> np.ndarray:
    """observed - atc_mean where observed is finite, NaN elsewhere."""
    observed = np.asarray(observed, dtype=np.float64)
    atc_mean = np.asarray(atc_mean, dtype=np.float64)
    if observed.shape != atc_mean.shape:
        raise ValidationError("shape_mismatch", f"{observed.shape} vs {atc_mean.shape}")
    return np.where(np.isfinite(observed), observed - atc_mean, np.nan)


def _adam_log_hyper(theta, objective, schedule, b1=0.9, b2=0.999, eps=1e-8):
    """Maximise ``objective(theta) -> (value, grad)`` with Adam; returns best theta and trace."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    best_val, best = -np.inf, theta.copy()
    trace = []
    for lr, steps in schedule:
        for _ in range(int(steps)):
            val, g = objective(theta)
            trace.append(float(val))
            if val > best_val:
                best_val, best = val, theta.copy()
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta + lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            theta = np.clip(theta, [-6.0, -12.0, -12.0], [6.0, 6.0, 6.0])
    val, _ = objective(theta)
    trace.append(float(val))
    if val > best_val:
        best = theta.copy()
    return best, trace


def fit_gp_day(residuals: np.ndarray, features: np.ndarray, config: GpConfig | None = None,
               day: int | None = None) -> GpModel:
    """Train a GP on one day's valid residuals.

    ``residuals`` (n,) and ``features`` (n, F) are the valid cells only. Raises
    :class:`GpSkipped` when n < ``config.min_train``.
    """
    cfg = config or GpConfig()
    y = np.asarray(residuals, dtype=np.float64)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("shape_mismatch", f"features {X.shape} vs residuals {y.shape}")
    keep = np.isfinite(y)
    y, X = y[keep], X[keep]
    n = y.shape[0]
    if n < cfg.min_train:
        raise GpSkipped(n, cfg.min_train)

    x_mean = X.mean(0)
    x_sd = X.std(0)
    x_sd = np.where(x_sd > 1e-12, x_sd, 1.0)
    Xs = (X - x_mean) / x_sd
    y_mean = float(y.mean())
    yc = y - y_mean
    y_sd = float(yc.std())
    seed = cfg.seed if day is None else cfg.seed * 1000003 + int(day)
    rng = np.random.default_rng(seed)

    if y_sd < 1e-9:
        # constant field: no signal to learn
        hyper = KernelHyper(1.0, 1e-10, 1e-10)
        mode = "exact" if n <= cfg.exact_threshold else "inducing"
        base = dict(hyper=hyper, x_mean=x_mean, x_sd=x_sd, y_mean=y_mean, jitter=cfg.jitter,
                    objective_trace=[], day=day, n_train=n)
        if mode == "exact":
            return GpModel(mode="exact", train_x=Xs, train_y=yc, **base)
        Z = Xs[np.sort(rng.choice(n, min(cfg.n_inducing, n), replace=False))]
        M = Z.shape[0]
        return GpModel(mode="inducing", inducing_x=Z, q_mu=np.zeros(M), q_cov=np.eye(M), **base)

    scale2 = y_sd ** 2
    ys = yc / y_sd
    theta0 = np.log([1.0, 1.0, 0.1])

    if n <= cfg.exact_threshold:
        if n > cfg.hyper_subset:
            sub = np.sort(rng.choice(n, cfg.hyper_subset, replace=False))
        else:
            sub = np.arange(n)
        Xh, yh = Xs[sub], ys[sub]

        def objective(theta):
            val, g = log_marginal_likelihood(theta, Xh, yh, cfg.jitter, grad=True)
            return val, g

        theta, trace = _adam_log_hyper(theta0, objective, cfg.schedule)
        ls, sv, nv = np.exp(theta)
        hyper = KernelHyper(float(ls), float(sv * scale2), float(nv * scale2))
        model = GpModel(hyper=hyper, mode="exact", x_mean=x_mean, x_sd=x_sd, y_mean=y_mean,
                        train_x=Xs, train_y=yc, jitter=cfg.jitter, objective_trace=trace, day=day, n_train=n)
        model._factor()
        return model

    from . import _svgp

    M = min(cfg.n_inducing, n)
    Z0 = Xs[np.sort(rng.choice(n, M, replace=False))]
    theta, Z, trace = _svgp.train(Xs, ys, Z0, theta0, cfg, seed)
    ls, sv, nv = np.exp(theta)
    hyper = KernelHyper(float(ls), float(sv * scale2), float(nv * scale2))
    q_mu, q_cov = optimal_whitened_q(Xs, yc, Z, hyper, cfg.jitter)
    model = GpModel(hyper=hyper, mode="inducing", x_mean=x_mean, x_sd=x_sd, y_mean=y_mean,
                    inducing_x=Z, q_mu=q_mu, q_cov=q_cov, jitter=cfg.jitter,
                    objective_trace=trace, day=day, n_train=n)
    model._factor()
    return model


def optimal_whitened_q(X: np.ndarray, y: np.ndarray, Z: np.ndarray, hyper: KernelHyper,
                       jitter: float = 1e-6, block: int = 4096):
    """Closed-form optimal q(v) for a Gaussian likelihood, in whitened coordinates.

    With Kuu = L L^T and A = L^-1 Kuf / sigma, the optimum is
    q_mu = B^-1 A y / sigma and q_cov = B^-1 where B = I + A A^T.
    """
    Kuu = rbf_kernel(Z, Z, hyper)
    L, _ = safe_cholesky(Kuu, hyper.signal_variance, jitter)
    M = Z.shape[0]
    sigma = np.sqrt(hyper.noise_variance)
    B = np.eye(M)
    Ay = np.zeros(M)
    for i in range(0, X.shape[0], block):
        A = solve_triangular(L, rbf_kernel(Z, X[i:i + block], hyper), lower=True) / sigma
        B += A @ A.T
        Ay += A @ y[i:i + block]
    LB = np.linalg.cholesky(B)
    q_mu = cho_solve((LB, True), Ay / sigma)
    q_cov = cho_solve((LB, True), np.eye(M))
    return q_mu, 0.5 * (q_cov + q_cov.T)


def build_exact_model(X: np.ndarray, y: np.ndarray, hyper: KernelHyper, jitter: float = 1e-6) -> GpModel:
    """Exact model with fixed hyperparameters (no training)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_mean, x_sd = X.mean(0), X.std(0)
    x_sd = np.where(x_sd > 1e-12, x_sd, 1.0)
    y_mean = float(y.mean())
    model = GpModel(hyper=hyper, mode="exact", x_mean=x_mean, x_sd=x_sd, y_mean=y_mean,
                    train_x=(X - x_mean) / x_sd, train_y=y - y_mean, jitter=jitter, n_train=len(y))
    model._factor()
    return model


def build_inducing_model(X: np.ndarray, y: np.ndarray, Z: np.ndarray, hyper: KernelHyper,
                         jitter: float = 1e-6) -> GpModel:
    """Inducing model with fixed hyperparameters and inducing inputs ``Z`` (raw feature units)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_mean, x_sd = X.mean(0), X.std(0)
    x_sd = np.where(x_sd > 1e-12, x_sd, 1.0)
    y_mean = float(y.mean())
    Xs = (X - x_mean) / x_sd
    Zs = (np.asarray(Z, dtype=np.float64) - x_mean) / x_sd
    q_mu, q_cov = optimal_whitened_q(Xs, y - y_mean, Zs, hyper, jitter)
    model = GpModel(hyper=hyper, mode="inducing", x_mean=x_mean, x_sd=x_sd, y_mean=y_mean,
                    inducing_x=Zs, q_mu=q_mu, q_cov=q_cov, jitter=jitter, n_train=len(y))
    model._factor()
    return model


# -- multi-day driver -----------------------------------------------------------

def fit_gp_days(residual_grids: dict, features, config: GpConfig | None = None, workers: int = 1):
    """Fit one GP per day.

    ``residual_grids`` maps day -> (height, width) residual grid with NaN at
    unobserved cells. Returns (models: day -> GpModel, skipped: day -> reason).
    """
    cfg = config or GpConfig()
    Xall = features.matrix()

    def one(item):
        day, grid = item
        r = np.asarray(grid, dtype=np.float64).ravel()
        valid = np.isfinite(r)
        try:
            return day, fit_gp_day(r[valid], Xall[valid], cfg, day=day), None
        except GpSkipped as exc:
            return day, None, str(exc)

    items = sorted(residual_grids.items())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, items))
    else:
        results = [one(it) for it in items]
    models = {d: m for d, m, _ in results if m is not None}
    skipped = {d: why for d, m, why in results if m is None}
    for d, why in skipped.items():
        logger.info("day %d: %s", d, why)
    return models, skipped


def save_gp_model(model: GpModel, directory, day: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"day_{day:03d}"
    doc = {
        "day": day,
        "mode": model.mode,
        "hyper": asdict(model.hyper),
        "y_mean": model.y_mean,
        "x_mean": model.x_mean.tolist(),
        "x_sd": model.x_sd.tolist(),
        "jitter": model.jitter,
        "n_train": model.n_train,
        "objective_trace": model.objective_trace,
        "arrays": stem.name + ".npz",
    }
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    if model.mode == "exact":
        arrays = {"train_x": model.train_x, "train_y": model.train_y}
    else:
        arrays = {"inducing_x": model.inducing_x, "q_mu": model.q_mu, "q_cov": model.q_cov}
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **arrays)


def load_gp_model(json_path) -> GpModel:
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    with np.load(json_path.parent / doc["arrays"]) as z:
        arrays = {k: z[k] for k in z.files}
    return GpModel(
        hyper=KernelHyper(**doc["hyper"]), mode=doc["mode"], x_mean=np.asarray(doc["x_mean"]),
        x_sd=np.asarray(doc["x_sd"]), y_mean=doc["y_mean"], jitter=doc["jitter"],
        objective_trace=doc.get("objective_trace", []), day=doc["day"], n_train=doc.get("n_train", 0),
        **arrays,
    )


def save_gp_dir(models: dict, skipped: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for day, model in sorted(models.items()):
        save_gp_model(model, directory, day)
    (directory / "skipped.json").write_text(
        json.dumps({str(d): why for d, why in sorted(skipped.items())}, indent=1, sort_keys=True)
    )


def load_gp_dir(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    models = {}
    for p in sorted(directory.glob("day_*.json")):
        m = load_gp_model(p)
        models[m.day] = m
    skip_file = directory / "skipped.json"
    skipped = {}
    if skip_file.exists():
        skipped = {int(k): v for k, v in json.loads(skip_file.read_text()).items()}
    return models, skipped
