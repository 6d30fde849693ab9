import numpy as np
import pandas as pd
import pytest

from jensen_effect.basis import make_fourier_basis
from jensen_effect.fsim import FsimBases
from jensen_effect.schemas import LinkSpec
from jensen_effect.simgen import gen_fsim_data


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte Carlo acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _console_logging_only(monkeypatch):
    monkeypatch.setenv("JENSEN_LOG_FILE", "")


@pytest.fixture
def small_bases():
    """7 Fourier functions for β and 10 order-6 B-splines for g: enough for the generated designs."""
    return FsimBases(beta=make_fourier_basis((0.0, 1.0), 7), g_n_basis=10, g_order=6)


@pytest.fixture
def linear_fsim():
    return gen_fsim_data(80, LinkSpec(name="linear"), 0.1, seed=11)


@pytest.fixture
def convex_fsim():
    return gen_fsim_data(80, LinkSpec(name="exp_pos"), 0.1, seed=5)


def seasonal_temperature(t):
    return 15.0 + 10.0 * np.sin(2.0 * np.pi * np.asarray(t, dtype=float) / 365.0)


def make_site_frames(site_id="A", years=3, visit_every=20, env_every=3, response=None, seed=0,
                     noise_sd=0.1, window=60.0):
    """Environment and density CSV frames for one synthetic site.

    ``response`` maps the mean window temperature to the per-day density change;
    the default is a convex function.
    """
    rng = np.random.default_rng(seed)
    response = response or (lambda m: np.exp((m - 15.0) / 5.0))
    env_t = np.arange(0.0, 365.0 * years, env_every)
    env = pd.DataFrame({
        "site_id": site_id,
        "time_days": env_t,
        "temperature": seasonal_temperature(env_t) + 0.2 * rng.standard_normal(len(env_t)),
    })
    visits = np.arange(0.0, 365.0 * years - visit_every, visit_every)
    density = [10.0]
    for s in visits[:-1]:
        days = np.arange(s - window, s + 1.0)
        mean_temp = float(seasonal_temperature(days).mean())
        density.append(density[-1] + visit_every * (response(mean_temp) + noise_sd * rng.standard_normal()))
    dens = pd.DataFrame({"site_id": site_id, "time_days": visits, "density": density})
    return dens, env


@pytest.fixture
def site_csvs(tmp_path):
    dens_a, env_a = make_site_frames("A", seed=1)
    dens_b, env_b = make_site_frames("B", seed=2)
    density_path = tmp_path / "density.csv"
    env_path = tmp_path / "environment.csv"
    pd.concat([dens_a, dens_b]).to_csv(density_path, index=False)
    pd.concat([env_a, env_b]).to_csv(env_path, index=False)
    return density_path, env_path
