"""Shared fixtures: small and reference datasets with derived pipeline stages."""

import numpy as np
import pytest

from romforge.galerkin import assemble_operators
from romforge.grid import GridSpec
from romforge.minifom import FomConfig, run_fom
from romforge.pod import RankDeficiencyError, pod


def _capped_pod(snaps, kind, cap):
    try:
        return pod(snaps, kind, cap)
    except RankDeficiencyError as exc:
        return pod(snaps, kind, exc.usable_rank)


@pytest.fixture(scope="session")
def tiny_grid():
    return GridSpec(nx=12, ny=6, lx=3.0, ly=1.5,
                    obstacle_center=(0.9, 0.75), obstacle_radius=0.28)


@pytest.fixture(scope="session")
def small_data():
    """32x16 dataset with the full derived pipeline (bases, fine operators)."""
    grid = GridSpec(nx=32, ny=16, lx=3.0, ly=1.5,
                    obstacle_center=(0.75, 0.75), obstacle_radius=0.15)
    cfg = FomConfig(nu=0.003, u_in=1.0, dt_fom=0.006, sample_every=5,
                    n_samples=60, spin_up_fraction=0.5)
    snaps = run_fom(grid, cfg)
    vel = _capped_pod(snaps, "velocity", 20)
    pres = _capped_pod(snaps, "pressure", 20)
    nut = _capped_pod(snaps, "eddy_viscosity", 3)
    ops = assemble_operators(vel, pres, nut, grid, snaps.weights, tau=1000.0)
    return {"grid": grid, "cfg": cfg, "snaps": snaps, "vel": vel,
            "pres": pres, "nut": nut, "ops": ops}


@pytest.fixture(scope="session")
def reference_data():
    """The shipped reference dataset (64x32, desk Re ~ 150) and fine operators."""
    grid = GridSpec(nx=64, ny=32, lx=3.0, ly=1.5,
                    obstacle_center=(0.75, 0.75), obstacle_radius=0.15)
    cfg = FomConfig(nu=0.002, u_in=1.0, dt_fom=0.006, sample_every=5,
                    n_samples=400, spin_up_fraction=0.5)
    snaps = run_fom(grid, cfg)
    vel = _capped_pod(snaps, "velocity", 50)
    pres = _capped_pod(snaps, "pressure", 50)
    nut = _capped_pod(snaps, "eddy_viscosity", 5)
    ops = assemble_operators(vel, pres, nut, grid, snaps.weights, tau=1000.0)
    return {"grid": grid, "cfg": cfg, "snaps": snaps, "vel": vel,
            "pres": pres, "nut": nut, "ops": ops}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
