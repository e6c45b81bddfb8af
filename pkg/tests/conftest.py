import sys
from pathlib import Path

import pytest


REPO_ROOT = Path(__file__).resolve().parents[1]
SCENARIO_DIR = REPO_ROOT / "scenarios"

path_str = str(REPO_ROOT)
if path_str not in sys.path:
    sys.path.insert(0, path_str)

from intersection_core import VehicleParams  # noqa: E402


KMH = 1.0 / 3.6

# Q, R, v_desired (km/h), p0 (m); every vehicle starts at its desired speed.
TABLE_VEHICLES = {
    1: (1.0, 1.0, 80.0, -55.0),
    2: (1.0, 1.0, 80.0, -60.0),
    3: (10.0, 1.0, 65.0, -55.0),
    4: (10.0, 1.0, 70.0, -70.0),
    5: (1.0, 1.0, 70.0, -70.0),
    6: (1.0, 1.0, 60.0, -60.0),
}


def table_vehicle(vehicle: int, **overrides) -> VehicleParams:
    q, r, v_desired, p0 = TABLE_VEHICLES[vehicle]
    fields = dict(
        sampling_time=0.1,
        horizon=60,
        u_lb=-2.0,
        u_ub=2.0,
        q_weight=q,
        r_weight=r,
        v_desired=v_desired * KMH,
        p0=p0,
        v0=v_desired * KMH,
        name=str(vehicle),
    )
    fields.update(overrides)
    return VehicleParams(**fields)


def toy_vehicle(vehicle: int, **overrides) -> VehicleParams:
    fields = dict(
        sampling_time=0.1,
        horizon=60,
        u_lb=-2.0,
        u_ub=2.0,
        q_weight=1.0,
        r_weight=1.0,
        v_desired=10.0,
        p0={1: -30.0, 2: -32.0}[vehicle],
        v0=10.0,
        name=str(vehicle),
    )
    fields.update(overrides)
    return VehicleParams(**fields)


@pytest.fixture
def vehicle_one():
    return table_vehicle(1)


@pytest.fixture
def table_vehicles():
    return {v: table_vehicle(v) for v in TABLE_VEHICLES}


@pytest.fixture
def toy_vehicles():
    return {1: toy_vehicle(1), 2: toy_vehicle(2)}


@pytest.fixture
def scenario_dir():
    return SCENARIO_DIR
