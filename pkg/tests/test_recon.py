import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delag.atc import AtcEnsemble, atc_interval, ensemble_predict, fit_atc
from delag.core import SceneStack, ValidationError
from delag.gp import KernelHyper, build_exact_model, fit_gp_days
from delag.recon import (
    ATC_ONLY,
    OBSERVED,
    WITH_GP,
    MissingGpWarning,
    ReconstructionCube,
    combine_uncertainty,
    day_residuals,
    reconstruct,
    reconstruct_day,
    run_pipeline,
    total_interval,
)
from delag.synth import SynthConfig, generate


def test_combine_examples():
    assert combine_uncertainty(1.0, 2.0) == 3.0
    a = np.array([0.5, 1.5])
    np.testing.assert_array_equal(combine_uncertainty(a, np.zeros(2)), a)
    with pytest.raises(ValidationError):
        combine_uncertainty(np.array([-1.0]), np.array([1.0]))
    with pytest.raises(ValidationError):
        combine_uncertainty(np.ones(2), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20), st.lists(st.floats(0, 1e6), min_size=1, max_size=20))
def test_combine_is_exact_sum(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    assert np.array_equal(combine_uncertainty(a, b), a + b)


def test_total_interval_examples():
    lo, hi = total_interval(289.0, 291.0, -0.5, 0.5)
    assert (lo, hi) == (288.5, 291.5)
    lo, hi = total_interval(np.array([289.0]), np.array([291.0]), np.zeros(1), np.zeros(1))
    assert lo[0] == 289.0 and hi[0] == 291.0
    with pytest.raises(ValidationError):
        total_interval(291.0, 289.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        total_interval(289.0, 291.0, 1.0, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 10), st.floats(-5, 5), st.floats(0, 5))
def test_interval_width_additivity(al, aw, gl, gw):
    lo, hi = total_interval(al, al + aw, gl, gl + gw)
    assert (hi - lo) == pytest.approx(aw + gw, abs=1e-9)


@pytest.fixture(scope="module")
def pipeline(small_synth, small_fit):
    _, (stack, era5, feats, truth) = small_synth
    models, skipped = fit_gp_days(day_residuals(stack, small_fit, era5), feats)
    return stack, era5, feats, truth, small_fit, models


def test_empty_day_uses_atc_only(pipeline):
    stack, era5, feats, _, ens, models = pipeline
    d = 2  # not an observation day
    assert stack.day_index(d) is None
    r = reconstruct_day(ens, None, era5, feats, stack, d)
    mean, _ = ensemble_predict(ens, d, era5)
    np.testing.assert_array_equal(r.mean, mean)
    assert np.all(r.var_gp == 0)
    assert np.all(r.source == ATC_ONLY)
    lo, hi = atc_interval(ens, d, era5)
    np.testing.assert_allclose(r.lower95, np.minimum(lo, mean))


def test_zero_gp_mean_equals_atc(pipeline):
    stack, era5, feats, _, ens, _ = pipeline
    d = int(stack.days[5])
    X = feats.matrix()
    m = build_exact_model(X[:40], np.zeros(40), KernelHyper(1.0, 1e-3, 1e-3))
    r = reconstruct_day(ens, m, era5, feats, stack, d)
    mean, _ = ensemble_predict(ens, d, era5)
    np.testing.assert_allclose(r.mean, mean, atol=1e-12)


def test_missing_gp_warns(pipeline):
    stack, era5, feats, _, ens, _ = pipeline
    d = int(stack.days[0])
    with pytest.warns(MissingGpWarning):
        r = reconstruct_day(ens, None, era5, feats, stack, d)
    assert np.all(r.var_gp == 0)
    valid = np.isfinite(stack.temps[0])
    assert np.all(r.source[valid] == OBSERVED) and np.all(r.source[~valid] == ATC_ONLY)


def test_result_invariants(pipeline):
    stack, era5, feats, truth, ens, models = pipeline
    cube = reconstruct(ens, models, era5, feats, stack, days=np.arange(1, 366))
    assert cube.mean.shape == (365, 12, 12)
    assert np.all(cube.lower95 <= cube.mean) and np.all(cube.mean <= cube.upper95)
    assert np.all(cube.var_atc >= 0) and np.all(cube.var_gp >= 0)
    obs_days = set(stack.days.tolist())
    for j, d in enumerate(cube.days):
        if d not in obs_days:
            assert np.all(cube.var_gp[j] == 0) and np.all(cube.source[j] == ATC_ONLY)
    i = 3
    j = cube.index(int(stack.days[i]))
    valid = np.isfinite(stack.temps[i])
    assert np.all(cube.source[j][valid] == OBSERVED) and np.all(cube.source[j][~valid] == WITH_GP)
    np.testing.assert_array_equal(cube.seamless[j][valid], stack.temps[i][valid])
    np.testing.assert_array_equal(cube.seamless[j][~valid], cube.mean[j][~valid])


def test_monte_carlo_variance(pipeline):
    stack, era5, feats, _, ens, models = pipeline
    d = int(stack.days[10])
    r = reconstruct_day(ens, models[d], era5, feats, stack, d)
    preds = ens.snapshot_predictions(d, era5)
    from delag.gp import gp_predict

    gp = gp_predict(models[d], feats.matrix())
    gp_mean = gp.mean.reshape(12, 12)
    rng = np.random.default_rng(0)
    n = 200_000
    px = (4, 7)
    j = rng.integers(0, ens.n_snapshots, n)
    samples = preds[j, px[0], px[1]] + gp_mean[px] + rng.normal(0, np.sqrt(r.var_gp[px]), n)
    expected = r.variance[px]
    # ddof=1 snapshot variance vs uniform-draw (ddof=0) variance differ by J/(J-1)
    assert samples.var() == pytest.approx(expected, rel=0.05)


def test_noiseless_full_day_reproduced():
    cfg = SynthConfig(height=10, width=10, seed=8, obs_noise_sd=0.0, residual_sd=0.0, p_clear=0.2, era5_cell_px=5)
    stack, era5, feats, _ = generate(cfg)
    _, _, _, cube = run_pipeline(stack, era5, feats, days=stack.days)
    full = [i for i in range(len(stack.days)) if np.isfinite(stack.temps[i]).all()]
    assert full
    for i in full:
        err = np.abs(cube.mean[i] - stack.temps[i])
        assert np.mean(err <= 0.2) >= 0.99


def test_cube_save_load(tmp_path, pipeline):
    stack, era5, feats, _, ens, models = pipeline
    cube = reconstruct(ens, models, era5, feats, stack, days=np.arange(1, 20))
    paths = cube.save(tmp_path / "recon.lstc")
    assert paths["seamless"].name == "recon.lstc"
    back = ReconstructionCube.load(tmp_path / "recon.lstc")
    np.testing.assert_array_equal(back.days, cube.days)
    np.testing.assert_allclose(back.mean, cube.mean, rtol=1e-6)
    np.testing.assert_array_equal(back.source, cube.source)


def test_reconstruct_worker_independent(pipeline):
    stack, era5, feats, _, ens, models = pipeline
    days = stack.days[:6]
    a = reconstruct(ens, models, era5, feats, stack, days, workers=1)
    b = reconstruct(ens, models, era5, feats, stack, days, workers=4)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.upper95, b.upper95)


def test_eatc_only_ablation(small_synth):
    _, (stack, era5, feats, _) = small_synth
    with warnings.catch_warnings():
        warnings.simplefilter("error", MissingGpWarning)
        ens, models, skipped, cube = run_pipeline(stack, era5, feats, days=stack.days[:3], use_gp=False)
    assert models == {} and np.all(cube.var_gp == 0)
