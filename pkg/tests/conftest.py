"""Shared fixture runs, cached for the whole session.

The main fixture is the shipped flat-target config (compact bump on the
axis, alpha E_0 / 2 pi = 0.3); the ingoing fixture drives a narrow pulse
into the axis.  Levels are counted in cells.
"""
from pathlib import Path

import pytest

from sgwavemap.config import load_config
from sgwavemap.evolution import run
from sgwavemap.nullgeom import integrate_frame
from sgwavemap.target import flat

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _cached_runs(name):
    cache = {}

    def get(n=1024):
        if n not in cache:
            cfg = load_config(str(CONFIGS / name)).with_cells(n)
            cache[n] = run(cfg.evolution_config(), cfg.initial_data())
        return cache[n]

    return get


@pytest.fixture(scope="session")
def config_dir():
    return CONFIGS


@pytest.fixture(scope="session")
def flat_target():
    return flat()


@pytest.fixture(scope="session")
def main_run():
    """main_run(n) -> (History, BlowupStatus) for the flat bump fixture."""
    return _cached_runs("flat_bump.ini")


@pytest.fixture(scope="session")
def ingoing_run():
    """ingoing_run(n) -> (History, BlowupStatus) for the ingoing pulse fixture."""
    return _cached_runs("ingoing_pulse.ini")


@pytest.fixture(scope="session")
def main_frame(main_run, flat_target):
    """main_frame(n) -> NullFrame of the main fixture with apex at its last slice."""
    cache = {}

    def get(n=1024):
        if n not in cache:
            cache[n] = integrate_frame(main_run(n)[0], flat_target)
        return cache[n]

    return get
