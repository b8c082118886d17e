import numpy as np
import pytest

import wagepath as wp

CAL_SY10 = "calibrations/illustrative_sy10.toml"
CAL_SY06 = "calibrations/illustrative_sy06.toml"


def make_config(r=0.02, mu=(0.06,), sigma=((0.20,),), delta=0.01,
                mu_y=0.01, sigma_y=(0.06,), d=5.0, tau_R=40.0, phi=None,
                gamma=3.0, rho=0.02, k=1.0, K=1.2):
    phi = phi if phi is not None else wp.DelayKernel.constant(0.0075)
    return wp.ModelConfig(
        market=wp.MarketParams(r=r, mu=np.asarray(mu), sigma=np.asarray(sigma), delta=delta),
        income=wp.IncomeParams(mu_y=mu_y, sigma_y=np.asarray(sigma_y), d=d, tau_R=tau_R, phi=phi),
        prefs=wp.PreferenceParams(gamma=gamma, rho=rho, k=k, K=K),
    )


def small_config(**kw):
    """Short-horizon config for fast structural tests."""
    kw.setdefault("d", 0.5)
    kw.setdefault("tau_R", 2.0)
    kw.setdefault("phi", wp.DelayKernel.constant(0.05))
    return make_config(**kw)


@pytest.fixture(scope="session")
def cal06():
    return wp.ModelConfig.from_file(CAL_SY06)


@pytest.fixture(scope="session")
def cal10():
    return wp.ModelConfig.from_file(CAL_SY10)


@pytest.fixture(scope="session")
def table06(cal06):
    tg, lg = wp.grids_for(cal06, 100)
    return wp.solve_weights(cal06, tg, lg)


@pytest.fixture(scope="session")
def small_table():
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 50)
    return cfg, wp.solve_weights(cfg, tg, lg)


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    """Compile the numba kernels once so timed tests measure the algorithms."""
    cfg = small_config()
    tg, lg = wp.grids_for(cfg, 20)
    tbl = wp.solve_weights(cfg, tg, lg)
    hist = wp.HistoryBuffer.flat(1.0, lg)
    init = wp.StateSnapshot(t=0.0, w=1.0, y_now=1.0, hist=hist)
    pc = wp.PathConfig(dt=tg.dt, horizon=cfg.income.tau_R, n_paths=4, seed=0)
    wp.simulate_lifecycle(cfg, tbl, wp.FeedbackPolicy(cfg, tbl), pc, init, record=True)
    wp.simulate_deflated_income_integral(cfg, lg, hist, pc)
    wp.simulate_gamma_exact(cfg, pc, 1.0)
