import warnings

import numpy as np
import pytest

from gpccopf.dataset import SamplingConfig, build_dataset
from gpccopf.gp import FitOptions, fit_multi
from gpccopf.grid import Bus, Generator, GridCase, Line, Load, load_case

ACCEPTANCE_LINES = []


def two_bus(load_p=0.5, load_q=0.0, g=0.0, b=-10.0, c2=1.0, c1=0.0, p_max=5.0, s_max=float("inf"),
            v_set=1.0, res_p=None, b_sh=0.0):
    """Slack generator at bus 1 feeding a load at bus 2 over one line."""
    buses = [Bus(1, "slack", 0.8, 1.2, v_set), Bus(2, "pq", 0.8, 1.2)]
    lines = [Line(1, 2, g, b, s_max=s_max, b_sh=b_sh)]
    gens = [Generator(1, 0.0, p_max, -5.0, 5.0, c2=c2, c1=c1, p_ref=load_p)]
    loads = [Load(2, load_p, load_q, sigma=0.1 * load_p)] if load_p or load_q else []
    res = [Load(2, res_p, 0.0, gamma=0.0, sigma=0.2 * res_p)] if res_p else []
    return GridCase(buses, lines, gens, loads, res, loss_factor=1.0, name="two-bus")


def three_bus():
    """Slack plus one PV generator feeding a PQ load; both units controllable."""
    buses = [Bus(1, "slack", 0.9, 1.1, 1.02), Bus(2, "pv", 0.9, 1.1, 1.01), Bus(3, "pq", 0.9, 1.1)]
    lines = [Line(1, 2, 2.0, -20.0, s_max=3.0), Line(2, 3, 2.0, -20.0, s_max=3.0),
             Line(1, 3, 2.0, -20.0, s_max=3.0)]
    gens = [Generator(1, 0.0, 3.0, -3.0, 3.0, c2=10.0, c1=5.0, p_ref=0.6),
            Generator(2, 0.0, 3.0, -3.0, 3.0, c2=20.0, c1=2.0, p_ref=0.6)]
    loads = [Load(3, 1.2, 0.3, sigma=0.1)]
    return GridCase(buses, lines, gens, loads, name="three-bus")


@pytest.fixture
def two_bus_case():
    return two_bus()


@pytest.fixture(scope="session")
def ieee9():
    return load_case("ieee9")


@pytest.fixture(scope="session")
def ieee39():
    return load_case("ieee39")


@pytest.fixture(scope="session")
def ieee9_data(ieee9):
    """100 labelled rows with the default sampler, split 75 / 25."""
    data = build_dataset(ieee9, SamplingConfig(seed=0), 100)
    return data.split(75)


@pytest.fixture(scope="session")
def ieee9_model(ieee9_data):
    train, _ = ieee9_data
    return fit_multi(train.X, train.Y, FitOptions(seed=0), train.x_labels, train.y_labels)


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Values in x were outside bounds")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
