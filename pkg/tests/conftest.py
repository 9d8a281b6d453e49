"""Session fixtures shared by the acceptance tests.

Training and kernel computation are expensive (minutes), so anything a
test needs from the shipped desk-scale configs is built once per pytest
session.  Unit-test modules never request these fixtures; only
test_acceptance.py pays for them.
"""

import time
from dataclasses import replace
from pathlib import Path

import pytest

from pcbf.config import resolve_config
from pcbf.hjgrid import compute_kernel
from pcbf.systems import make_pendulum, make_quadrotor
from pcbf.training import train

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = REPO_ROOT / "configs"


def _train_pair(config_path):
    """Train the configured PCBF run plus an equal-budget LCCBF baseline.

    Budget = gradient steps the PCBF run actually consumed (pretraining
    included), so the baseline sees exactly as many updates, with the
    same learning rate, batch size, seed and loss weights.
    """
    cfg = resolve_config(config_path)
    tcfg = cfg.trainer()
    system = make_pendulum() if cfg.scenario == "pendulum" else make_quadrotor()

    t0 = time.perf_counter()
    pcbf_net, pcbf_hist = train(tcfg, system)
    pcbf_wall = time.perf_counter() - t0

    budget = len(pcbf_hist)
    lcfg = replace(tcfg, mode="lccbf", iters=budget)
    t0 = time.perf_counter()
    lccbf_net, lccbf_hist = train(lcfg, system)
    lccbf_wall = time.perf_counter() - t0

    return {
        "system": system,
        "config": cfg,
        "trainer_config": tcfg,
        "pcbf": pcbf_net,
        "pcbf_history": pcbf_hist,
        "pcbf_wall_s": pcbf_wall,
        "lccbf": lccbf_net,
        "lccbf_history": lccbf_hist,
        "lccbf_wall_s": lccbf_wall,
        "budget": budget,
    }


@pytest.fixture(scope="session")
def pendulum_run():
    return _train_pair(CONFIG_DIR / "pendulum.ini")


@pytest.fixture(scope="session")
def quadrotor_run():
    return _train_pair(CONFIG_DIR / "quadrotor.ini")


@pytest.fixture(scope="session")
def pendulum_kernel():
    """Converged 201x201 viability kernel for the default pendulum."""
    cfg = resolve_config(CONFIG_DIR / "pendulum.ini")
    return compute_kernel(
        make_pendulum(),
        shape=tuple(cfg["grid.shape"]),
        dt=cfg["grid.dt"],
        tol=cfg["grid.tol"],
        max_sweeps=cfg["grid.max_sweeps"],
    )
