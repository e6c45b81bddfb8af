"""Scenario files and CSV outputs.

Scenario files are INI documents with a [scenario] section, optional [sqp]
and [channel] overrides and one [vehicle.<id>] section per vehicle.
"""

import configparser
import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .agent import free_flow_times, time_bounds_in
from .config import CHANNEL_ENV, SQP_ENV, load_channel_config, load_sqp_config
from .dynamics import VehicleParams
from .errors import IntersectionError, ScenarioError
from .simulation import ScenarioConfig, SimulationResult
from .sqp import CoordinationResult


logger = logging.getLogger(__name__)

VELOCITY_UNITS = {"m/s": 1.0, "km/h": 1.0 / 3.6}
VEHICLE_SECTION_PREFIX = "vehicle."
VEHICLE_HEADER = ["t", "p", "v", "u", "p_dev"]
SUMMARY_HEADER = ["scenario", "n_sqp", "n_ls", "mode", "regularizations", "converged"]
TABLE_SCENARIOS = tuple(f"scenario_{i}" for i in range(1, 8))


@dataclass(frozen=True)
class VehicleCheck:
    vehicle: int
    t_in_min: float
    t_in_max: float
    free_in: float
    free_out: float


def load_scenario(path: str | Path, env: Mapping[str, str] | None = None) -> ScenarioConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with path.open(encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ScenarioError(f"{path}: {exc}") from exc

    try:
        return _build(parser, path, env)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: incomplete or invalid entry: {exc}") from exc


def check_scenario(config: ScenarioConfig) -> list[VehicleCheck]:
    """Every vehicle must reach the intersection and clear it in free flow."""
    checks = []
    for vehicle, params in sorted(config.coordination_params().items()):
        try:
            t_in_min, t_in_max = time_bounds_in(params)
            free = free_flow_times(params)
        except IntersectionError as exc:
            raise ScenarioError(f"vehicle {vehicle}: {exc}") from exc
        checks.append(VehicleCheck(vehicle, t_in_min, t_in_max, free.t_in, free.t_out))
    return checks


def vehicle_rows(result: SimulationResult, vehicle: int) -> list[dict[str, str]]:
    outcome = result.vehicles[vehicle]
    traj = outcome.trajectory
    rows = []
    for k, t in enumerate(outcome.times):
        rows.append(
            {
                "t": _fmt(t),
                "p": _fmt(traj.positions[k]),
                "v": _fmt(traj.velocities[k]),
                "u": _fmt(traj.controls[k]) if k < traj.controls.size else "",
                "p_dev": _fmt(outcome.p_dev[k]),
            }
        )
    return rows


def write_vehicle_csvs(result: SimulationResult, output_dir: str | Path) -> list[Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for vehicle in sorted(result.vehicles):
        path = output_dir / f"{result.name}_vehicle_{vehicle}.csv"
        write_csv(path, vehicle_rows(result, vehicle), VEHICLE_HEADER)
        paths.append(path)
    return paths


def summary_row(name: str, coordination: CoordinationResult) -> dict[str, Any]:
    return {
        "scenario": name,
        "n_sqp": coordination.n_sqp,
        "n_ls": coordination.n_ls,
        "mode": coordination.mode.value,
        "regularizations": coordination.regularizations,
        "converged": str(coordination.converged).lower(),
    }


def failed_row(name: str, mode: str) -> dict[str, Any]:
    """Row for a run that raised before producing a coordination result."""
    return {"scenario": name, "n_sqp": 0, "n_ls": 0, "mode": mode, "regularizations": 0, "converged": "false"}


def write_summary_csv(rows: Iterable[Mapping[str, Any]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(path, rows, SUMMARY_HEADER)
    return path


def write_csv(path: Path, rows: Iterable[Mapping[str, Any]], header: list[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=header, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in header})


def format_table(rows: Iterable[Mapping[str, Any]]) -> str:
    """Iteration counts per scenario, one column pair per mode."""
    table: dict[str, dict[str, Mapping[str, Any]]] = {}
    for row in rows:
        table.setdefault(row["scenario"], {})[row["mode"]] = row

    modes = ("projection", "relaxation")
    lines = [f"{'scenario':<12}" + "".join(f"{m + ' n_sqp':>18}{m + ' n_ls':>17}" for m in modes)]
    for name in sorted(table):
        cells = []
        for mode in modes:
            row = table[name].get(mode)
            if row is None:
                cells.append(f"{'-':>18}{'-':>17}")
            else:
                mark = "" if row["converged"] == "true" else "*"
                cells.append(f"{str(row['n_sqp']) + mark:>18}{row['n_ls']:>17}")
        lines.append(f"{name:<12}" + "".join(cells))
    return "\n".join(lines)


def _build(parser: configparser.ConfigParser, path: Path, env: Mapping[str, str] | None) -> ScenarioConfig:
    if not parser.has_section("scenario"):
        raise ScenarioError(f"{path}: missing [scenario] section")
    scenario = parser["scenario"]

    unit = scenario.get("velocity_unit", "m/s").strip()
    if unit not in VELOCITY_UNITS:
        raise ScenarioError(f"{path}: unknown velocity_unit {unit!r}; use one of {sorted(VELOCITY_UNITS)}")
    speed = VELOCITY_UNITS[unit]

    common = {
        "sampling_time": scenario.getfloat("sampling_time"),
        "horizon": scenario.getint("horizon"),
        "u_lb": scenario.getfloat("u_lb", -2.0),
        "u_ub": scenario.getfloat("u_ub", 2.0),
        "p_in": scenario.getfloat("p_in", 0.0),
        "p_out": scenario.getfloat("p_out", 8.0),
    }
    if common["sampling_time"] is None or common["horizon"] is None:
        raise ScenarioError(f"{path}: [scenario] needs sampling_time and horizon")

    vehicles = {}
    for section in parser.sections():
        if not section.startswith(VEHICLE_SECTION_PREFIX):
            continue
        vehicle = int(section[len(VEHICLE_SECTION_PREFIX) :])
        values = parser[section]
        fields = {key: values.getfloat(key, common[key]) for key in ("sampling_time", "u_lb", "u_ub", "p_in", "p_out")}
        vehicles[vehicle] = VehicleParams(
            horizon=values.getint("horizon", common["horizon"]),
            q_weight=values.getfloat("q"),
            r_weight=values.getfloat("r"),
            v_desired=values.getfloat("v_desired") * speed,
            p0=values.getfloat("p0"),
            v0=values.getfloat("v0") * speed,
            name=str(vehicle),
            **fields,
        )
    if not vehicles:
        raise ScenarioError(f"{path}: no [vehicle.<id>] sections")

    order = tuple(int(v) for v in scenario["order"].replace(",", " ").split())
    sqp = _override(load_sqp_config(env), parser, "sqp", SQP_ENV)
    channel = _override(load_channel_config(env), parser, "channel", CHANNEL_ENV)
    penalty = scenario.get("penalty")

    return ScenarioConfig(
        name=scenario.get("name", path.stem),
        vehicles=vehicles,
        order=order,
        sqp=sqp,
        channel=channel,
        sim_steps=scenario.getint("sim_steps", None),
        noise_std=(
            scenario.getfloat("noise_std_position", 0.0),
            scenario.getfloat("noise_std_velocity", 0.0) * speed,
        ),
        noise_seed=scenario.getint("noise_seed", 0),
        penalty=float(penalty) if penalty else None,
        intersection_margin=scenario.getfloat("intersection_margin", 0.0),
        distributed=scenario.getboolean("distributed", True),
        description=scenario.get("description", ""),
    )


def _override(base, parser: configparser.ConfigParser, section: str, table: Mapping[str, tuple[str, Any]]):
    if not parser.has_section(section):
        return base
    parsers = dict(table.values())
    values = {}
    for key, raw in parser[section].items():
        if key not in parsers:
            raise ScenarioError(f"unknown key {key!r} in [{section}]")
        values[key] = parsers[key](raw.strip())
    return replace(base, **values)


def _fmt(value: float) -> str:
    return f"{value:.6f}"
