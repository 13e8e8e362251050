import os
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, settings

from lanewatch.discretize import Corridor, discretize_trajectories
from lanewatch.geom import LocalFrame, local_to_latlon, straight_corridor
from lanewatch.model import estimate_intention
from lanewatch.sim import ScenarioConfig, simulate

settings.register_profile(
    "default", max_examples=100, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

LAT0, LON0 = 43.05, -87.95


@pytest.fixture(scope="session")
def north_corridor():
    """Straight, due-north, 400 m, three-lane one-way corridor."""
    return straight_corridor("north", length=400.0, lanes=3, lat0=LAT0, lon0=LON0, bearing_deg=0.0)


@pytest.fixture(scope="session")
def frame():
    return LocalFrame.at(LAT0, LON0)


def latlon(frame, east, north):
    return local_to_latlon((east, north), frame)


@pytest.fixture(scope="session")
def base_cfg():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def history_model(base_cfg):
    """Intention model from one hour of full-penetration normal traffic.

    One hour at penetration 1.0 carries as many CV fixes as roughly 17 hours
    at the default 6 %.
    """
    corridor = Corridor(base_cfg.corridor)
    records, _ = simulate(replace(base_cfg, seed=999, duration=3600.0, penetration=1.0))
    seqs = discretize_trajectories(records, corridor)
    return estimate_intention(
        seqs, corridor_id=corridor.corridor_id, lane_count=corridor.lane_count
    )


@pytest.fixture(scope="session")
def demo_corridor(base_cfg):
    return Corridor(base_cfg.corridor)
