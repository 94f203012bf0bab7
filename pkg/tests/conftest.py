import numpy as np
import pytest

from delag.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_synth():
    """12x12 synthetic dataset shared by the slower module tests."""
    cfg = SynthConfig(height=12, width=12, seed=5, era5_cell_px=6)
    return cfg, generate(cfg)


@pytest.fixture(scope="session")
def small_fit(small_synth):
    from delag.atc import FitConfig, fit_atc

    _, (stack, era5, _, _) = small_synth
    return fit_atc(stack, era5, FitConfig(), seed=0)


def random_stack(rng, n_days=3, h=2, w=3, nan_frac=0.2):
    from delag.core import SceneStack

    days = np.sort(rng.choice(np.arange(1, 367), n_days, replace=False))
    temps = rng.uniform(250, 320, (n_days, h, w)).astype(np.float32)
    temps[rng.uniform(size=temps.shape) < nan_frac] = np.nan
    return SceneStack(days, temps)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {title}: {detail}")
