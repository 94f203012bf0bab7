"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python3 tests/test_acceptance.py``. The end-to-end criterion (5) takes a few
minutes on one core.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from delag.atc import OMEGA, FitConfig, fit_atc, l1_gradient, l1_loss
from delag.core import SceneStack
from delag.geo import crosstrack_ratio, overlap_fraction
from delag.gp import GpConfig, KernelHyper, build_exact_model, gp_predict, log_marginal_likelihood
from delag.recon import combine_uncertainty, reconstruct, reconstruct_day, run_pipeline, total_interval
from delag.synth import StationConfig, SynthConfig, generate, make_stations, thin_cadence
from delag.validation import airtemp_comparison, fit_airtemp, make_validation_split, station_lst


def record(n, title, ok, detail):
    ACCEPTANCE_RESULTS[n] = (bool(ok), title, detail)
    print(f"\n[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
    assert ok, detail


def test_1_crosstrack_anchors():
    t = time.perf_counter()
    r0, r45, f0 = crosstrack_ratio(0.0), crosstrack_ratio(45.0), overlap_fraction(0.0)
    ms = 1e3 * (time.perf_counter() - t)
    checks = {
        "ratio(0)=1.07+-0.01": abs(r0 - 1.07) <= 0.01,
        "ratio(45)=1.50+-0.01": abs(r45 - 1.50) <= 0.01,
        "overlap(0)=0.07+-0.005": abs(f0 - 0.07) <= 0.005,
    }
    failed = [k for k, v in checks.items() if not v]
    record(1, "cross-track anchors", not failed,
           f"ratio(0)={r0:.4f} ratio(45)={r45:.4f} overlap(0)={f0:.4f} ({ms:.2f} ms)"
           + (f"; failed: {', '.join(failed)}" if failed else ""))


def _oracle(X, y, Xq, h, jitter):
    mu, sd = X.mean(0), X.std(0)
    Xs, Qs = (X - mu) / sd, (Xq - mu) / sd
    def k(a, b):
        return h.signal_variance * np.exp(-((a[:, None] - b[None]) ** 2).sum(-1) / (2 * h.lengthscale ** 2))
    A = k(Xs, Xs) + (h.noise_variance + jitter * h.signal_variance) * np.eye(len(y))
    Ks = k(Xs, Qs)
    mean = Ks.T @ np.linalg.solve(A, y - y.mean()) + y.mean()
    var = h.signal_variance - np.sum(Ks * np.linalg.solve(A, Ks), axis=0)
    return mean, var


def test_2_gp_oracle_equivalence():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_m = worst_v = 0.0
    for _ in range(50):
        n = int(rng.integers(10, 201))
        X = rng.uniform(size=(n, 6))
        y = rng.normal(0, 1.5, n)
        h = KernelHyper(*np.exp(rng.uniform([-1.0, -1.0, -3.0], [1.0, 1.5, 0.0])))
        Xq = rng.uniform(size=(40, 6))
        model = build_exact_model(X, y, h)
        p = gp_predict(model, Xq, include_noise=False)
        mean, var = _oracle(X, y, Xq, h, model.jitter)
        worst_m = max(worst_m, np.max(np.abs(p.mean - mean)))
        worst_v = max(worst_v, np.max(np.abs(p.variance - var)))
    dt = time.perf_counter() - t
    record(2, "GP oracle equivalence", worst_m <= 1e-6 and worst_v <= 1e-6 and dt < 10,
           f"max |dmean|={worst_m:.2e} K, max |dvar|={worst_v:.2e} K^2 over 50 problems ({dt:.1f} s)")


def test_3_atc_recovery():
    cfg = SynthConfig(height=32, width=32, seed=0, obs_noise_sd=0.0, residual_sd=0.0)
    stack, era5, _, truth = generate(cfg)
    t = time.perf_counter()
    ens = fit_atc(stack, era5, FitConfig(), seed=0)
    dt = time.perf_counter() - t
    med = ens.median_params()
    tp = truth.true_params
    dC = np.median(np.abs(med.C - tp.C))
    dA = np.median(np.abs(med.A - tp.A))
    dphi = np.median(np.abs((med.phi - tp.phi + 182.5) % 365 - 182.5))
    db = np.median(np.abs(med.b - tp.b))
    ok = dC <= 0.1 and dA <= 0.1 and dphi <= 1.0 and db <= 0.02 and dt < 60
    record(3, "eATC parameter recovery", ok,
           f"{stack.temps.shape} |dC|={dC:.4f} K |dA|={dA:.4f} K |dphi|={dphi:.4f} d |db|={db:.2e} ({dt:.1f} s)")


def test_4_gradient_checks():
    rng = np.random.default_rng(4)
    # L1 eATC objective: 100 random points away from kinks, step 1e-4, rtol 1e-4
    n = 60
    days = np.sort(rng.choice(np.arange(1, 366), n, replace=False)).astype(float)
    P = 100
    era5 = rng.uniform(270, 300, (P, n))
    theta = np.stack([rng.uniform(200, 230, P), rng.uniform(5, 15, P), rng.uniform(0, 365, P),
                      rng.uniform(0, 0.5, P)])
    obs = rng.uniform(270, 310, (P, n))
    g = l1_gradient(theta, days, era5, obs)
    h = 1e-4
    worst_atc = 0.0
    n_checked = 0
    for k in range(4):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fd = (l1_loss(tp, days, era5, obs) - l1_loss(tm, days, era5, obs)) / (2 * h)

        def sign(t):
            C, A, phi, b = (x[:, None] for x in t)
            return np.sign(obs - (C + A * np.cos(OMEGA * (days - phi)) + b * era5))
        smooth = np.all(sign(tp) == sign(tm), axis=1)
        rel = np.abs(g[k] - fd) / np.maximum(np.abs(fd), 1e-12)
        worst_atc = max(worst_atc, rel[smooth].max())
        n_checked += smooth.sum()
    # GP log marginal likelihood w.r.t. log-hyperparameters, rtol 1e-3
    worst_gp = 0.0
    for _ in range(20):
        m = int(rng.integers(10, 80))
        X = rng.normal(size=(m, 6))
        y = rng.normal(size=m)
        th = rng.uniform([-0.5, -1, -3], [1, 1, 0])
        _, gg = log_marginal_likelihood(th, X, y, grad=True)
        e = 1e-5
        fd = np.array([(log_marginal_likelihood(th + e * u, X, y) - log_marginal_likelihood(th - e * u, X, y)) / (2 * e)
                       for u in np.eye(3)])
        worst_gp = max(worst_gp, np.max(np.abs(gg - fd) / np.maximum(np.abs(fd), 1e-3)))
    ok = worst_atc <= 1e-4 and worst_gp <= 1e-3 and n_checked >= 100
    record(4, "analytic gradients", ok,
           f"L1-eATC max rel err {worst_atc:.1e} on {n_checked} smooth points; GP LML max rel err {worst_gp:.1e}")


@pytest.fixture(scope="module")
def e2e():
    cfg = SynthConfig(height=64, width=64, seed=3, cadence="4-per-16", cloud_fraction_target=0.5, obs_noise_sd=0.5)
    stack, era5, feats, truth = generate(cfg)
    t = time.perf_counter()
    ens, models, skipped, cube = run_pipeline(stack, era5, feats, days=stack.days, seed=cfg.seed)
    dt = time.perf_counter() - t
    return cfg, stack, era5, feats, truth, ens, models, cube, dt


def test_5_end_to_end(e2e):
    cfg, stack, era5, feats, truth, ens, models, cube, dt = e2e
    masked = ~np.isfinite(stack.temps)
    tl = truth.on_days(stack.days)
    rmse = float(np.sqrt(np.mean((cube.mean - tl)[masked] ** 2)))
    cov = float(np.mean(((tl >= cube.lower95) & (tl <= cube.upper95))[masked]))
    ok = rmse <= 0.75 and 0.90 <= cov <= 0.99 and dt < 300
    record(5, "end-to-end synthetic reconstruction", ok,
           f"64x64x{len(stack.days)} masked RMSE={rmse:.3f} K, Cov@95={cov:.3f} ({dt:.0f} s)")


def test_6_variance_and_interval_rules(e2e):
    _, stack, era5, feats, _, ens, models, _, _ = e2e
    d = int(stack.days[20])
    r = reconstruct_day(ens, models[d], era5, feats, stack, d)
    additive = np.array_equal(combine_uncertainty(r.var_atc, r.var_gp), r.var_atc + r.var_gp)
    preds = ens.snapshot_predictions(d, era5)
    lo_a, hi_a = np.percentile(preds, [2.5, 97.5], axis=0)
    p = gp_predict(models[d], feats.matrix())
    half = 1.959963984540054 * np.sqrt(p.variance.reshape(r.mean.shape))
    gl, gu = p.mean.reshape(r.mean.shape) - half, p.mean.reshape(r.mean.shape) + half
    lo, hi = total_interval(lo_a, hi_a, gl, gu)
    sum_rule = np.allclose(lo, lo_a + gl, rtol=0, atol=1e-12) and np.allclose(hi, hi_a + gu, rtol=0, atol=1e-12)
    width_rule = np.allclose(hi - lo, (hi_a - lo_a) + (gu - gl), rtol=0, atol=1e-9)
    # Monte-Carlo: uniform snapshot draw plus Gaussian GP draw
    rng = np.random.default_rng(6)
    rows = rng.choice(r.mean.size, 25, replace=False)
    worst = 0.0
    flat_preds = preds.reshape(preds.shape[0], -1)
    for k in rows:
        j = rng.integers(0, preds.shape[0], 100_000)
        s = flat_preds[j, k] + rng.normal(0, np.sqrt(r.var_gp.ravel()[k]), j.size)
        worst = max(worst, abs(s.var() / r.variance.ravel()[k] - 1))
    ok = additive and sum_rule and width_rule and worst <= 0.05
    record(6, "variance additivity and interval sum", ok,
           f"additive={additive} sum_rule={sum_rule} width_rule={width_rule} MC max rel dev={worst:.3f}")


def test_7_data_frequency_monotonicity():
    rmse = {c: [] for c in ("4-per-16", "2-per-16", "1-per-16")}
    t = time.perf_counter()
    for seed in range(5):
        cfg = SynthConfig(height=16, width=16, seed=100 + seed, era5_cell_px=8)
        stack, era5, feats, truth = generate(cfg)
        for cad in rmse:
            s = thin_cadence(stack, cad)
            *_, cube = run_pipeline(s, era5, feats, days=np.arange(1, 366), seed=cfg.seed)
            rmse[cad].append(float(np.sqrt(np.mean((cube.mean - truth.true_lst) ** 2))))
    m = {c: float(np.mean(v)) for c, v in rmse.items()}
    ok = m["4-per-16"] <= m["2-per-16"] <= m["1-per-16"]
    record(7, "data-frequency monotonicity", ok,
           "mean RMSE over 5 seeds: " + ", ".join(f"{c}={v:.3f} K" for c, v in m.items())
           + f" ({time.perf_counter() - t:.0f} s)")


def test_8_air_temperature(e2e):
    cfg, stack, era5, feats, truth, ens, models, _, _ = e2e
    cube = reconstruct(ens, models, era5, feats, stack, days=np.arange(1, 366))
    stations = make_stations(cfg, truth, stack, feats, StationConfig())
    res = airtemp_comparison(stations, stack, cube)
    gap = abs(res["rmse_gap"])
    lst = station_lst(stations, stack, cube)
    worst = 0.0
    for src in ("observed", "reconstructed"):
        keep = stations.lst_source == src
        sub = stations.subset(keep)
        model = fit_airtemp(sub, lst[keep])
        X = np.column_stack([lst[keep], sub.ndvi, sub.elev, sub.sol, sub.sza, np.ones(keep.sum())])
        beta = np.linalg.solve(X.T @ X, X.T @ sub.air_temp)
        est = np.r_[model.coef, model.intercept]
        worst = max(worst, np.max(np.abs(est - beta) / np.maximum(np.abs(beta), 1.0)))
    ok = gap <= 0.5 and worst <= 1e-8
    record(8, "air-temperature comparability", ok,
           f"RMSE observed={res['observed']['metrics']['RMSE']:.3f} K, reconstructed="
           f"{res['reconstructed']['metrics']['RMSE']:.3f} K (gap {gap:.3f}); OLS vs normal equations {worst:.1e}")


def test_9_determinism():
    cfg = SynthConfig(height=16, width=16, seed=9, era5_cell_px=8, p_clear=0.1, p_heavy=0.15)
    stack, era5, feats, _ = generate(cfg)
    stack2, *_ = generate(cfg)
    split_a = make_validation_split(stack, seed=9)
    split_b = make_validation_split(stack2, seed=9)
    same_split = split_a[0] == split_b[0] and split_a[1] == split_b[1]
    train = split_a[0]
    fit = FitConfig(chunk_size=64)
    ea, ma, _, ca = run_pipeline(train, era5, feats, fit, GpConfig(seed=9), days=np.arange(1, 366), workers=1)
    eb, mb, _, cb = run_pipeline(train, era5, feats, fit, GpConfig(seed=9), days=np.arange(1, 366), workers=4)
    same_ens = all(np.array_equal(getattr(ea, n), getattr(eb, n)) for n in ("C", "A", "phi", "b"))
    same_rec = all(np.array_equal(getattr(ca, n), getattr(cb, n))
                   for n in ("mean", "lower95", "upper95", "var_atc", "var_gp", "source"))
    ok = same_split and same_ens and same_rec and stack == stack2
    record(9, "determinism across worker counts", ok,
           f"stack={stack == stack2} split={same_split} ensemble={same_ens} reconstruction={same_rec} (workers 1 vs 4)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
