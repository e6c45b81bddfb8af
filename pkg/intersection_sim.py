#!/usr/bin/env python3
"""
Intersection Crossing Coordinator

Coordinates the intersection entry/exit times of a set of vehicles with a
fixed crossing order, then validates the assigned times in closed loop.

Usage:
    python3 intersection_sim.py <command> [scenario files] [options]

Commands:
    solve       Run the SQP coordination only and print the assigned times
    simulate    Coordinate, then run the closed-loop simulation and write CSVs
    table3      Run the seven table scenarios in both modes, print iteration counts
    check       Validate scenario files and print per-vehicle time windows

Options:
    --mode MODE              projection or relaxation (default: SQP_MODE env var or scenario)
    --seed N                 Channel and measurement-noise seed
    --output-dir DIR         Directory for CSV output (default: OUTPUT_DIR env var)
    --tolerance EPS          KKT stopping tolerance of the coordinator
    --drop-probability P     Packet drop probability of the simulated channel
    --local                  Call the agents in-process instead of over the channel
    --verbose                Log every SQP iteration and runtime round

Examples:
    # Coordinate scenario 1 in relaxation mode
    python3 intersection_sim.py solve scenarios/scenario_1.ini --mode relaxation

    # Closed loop with a lossy channel, CSVs into out/
    python3 intersection_sim.py simulate scenarios/scenario_3.ini --drop-probability 0.2 --output-dir out

    # Iteration table for both globalization modes
    python3 intersection_sim.py table3 --output-dir out
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

from intersection_core import (
    TABLE_SCENARIOS,
    IntersectionError,
    SQPMode,
    ScenarioConfig,
    check_scenario,
    coordinate_scenario,
    failed_row,
    format_table,
    load_scenario,
    run_scenario,
    summary_row,
    write_summary_csv,
    write_vehicle_csvs,
)


COMMANDS = ("solve", "simulate", "table3", "check")


def get_scenario_dir():
    """Get the scenario directory from environment or the bundled fixtures."""
    return os.environ.get('SCENARIO_DIR', str(Path(__file__).resolve().parent / 'scenarios'))


def get_output_dir():
    """Get the CSV output directory from environment variable."""
    return os.environ.get('OUTPUT_DIR', '')


def apply_overrides(config: ScenarioConfig, args) -> ScenarioConfig:
    """Command-line flags win over the scenario file and the environment."""
    sqp, channel = config.sqp, config.channel
    if args.mode:
        sqp = replace(sqp, mode=SQPMode(args.mode))
    if args.tolerance is not None:
        sqp = replace(sqp, tolerance=args.tolerance)
    if args.drop_probability is not None:
        channel = replace(channel, drop_probability=args.drop_probability)

    overrides = {"sqp": sqp, "channel": channel}
    if args.seed is not None:
        overrides["channel"] = replace(channel, seed=args.seed)
        overrides["noise_seed"] = args.seed
    if args.local:
        overrides["distributed"] = False
    return replace(config, **overrides)


def load_all(paths, args):
    return [apply_overrides(load_scenario(path), args) for path in paths]


def describe_coordination(name, coordination):
    lines = [
        f"{name}: {coordination.status} in {coordination.n_sqp} SQP iterations "
        f"({coordination.n_ls} linesearch trials, mode {coordination.mode.value}, "
        f"residual {coordination.residual:.3e})"
    ]
    for vehicle, pair in zip(coordination.times.order, coordination.times.pairs):
        lines.append(f"  vehicle {vehicle}: t_in={pair.t_in:.4f} s  t_out={pair.t_out:.4f} s")
    return "\n".join(lines)


def run_solve(configs, output_dir):
    rows = []
    ok = True
    for config in configs:
        coordination, _ = coordinate_scenario(config)
        print(describe_coordination(config.name, coordination))
        rows.append(summary_row(config.name, coordination))
        ok = ok and coordination.converged

    if output_dir:
        path = write_summary_csv(rows, Path(output_dir) / 'summary.csv')
        print(f"Summary written to {path}")
    return ok


def run_simulate(configs, output_dir):
    rows = []
    ok = True
    for config in configs:
        result = run_scenario(config)
        print(describe_coordination(config.name, result.coordination))
        for vehicle, outcome in sorted(result.vehicles.items()):
            realized = "never" if outcome.realized_in is None else f"{outcome.realized_in:.4f} s"
            print(f"  vehicle {vehicle}: entered at {realized}, MPC failures {outcome.mpc_failures}")
        if result.occupancy_violations:
            print(f"  ✗ occupancy violated at {len(result.occupancy_violations)} samples", file=sys.stderr)
        if result.mpc_failures:
            print(f"  ✗ tracking MPC fell back to braking at {result.mpc_failures} samples", file=sys.stderr)
        if not result.order_preserved:
            print(f"  ✗ realized order {result.realized_order} differs from {config.order}", file=sys.stderr)

        rows.append(summary_row(config.name, result.coordination))
        ok = ok and result.success
        if output_dir:
            for path in write_vehicle_csvs(result, output_dir):
                print(f"  wrote {path}")

    if output_dir:
        path = write_summary_csv(rows, Path(output_dir) / 'summary.csv')
        print(f"Summary written to {path}")
    return ok


def run_table3(scenario_dir, args, output_dir):
    rows = []
    ok = True
    modes = [args.mode] if args.mode else [mode.value for mode in SQPMode]
    for name in TABLE_SCENARIOS:
        base = load_scenario(Path(scenario_dir) / f'{name}.ini')
        for mode in modes:
            config = apply_overrides(base, argparse.Namespace(**{**vars(args), 'mode': mode}))
            try:
                coordination, _ = coordinate_scenario(config)
            except IntersectionError as e:
                print(f"Error: {name} ({mode}): {e}", file=sys.stderr)
                rows.append(failed_row(name, mode))
                ok = False
                continue
            rows.append(summary_row(name, coordination))
            ok = ok and coordination.converged

    print(format_table(rows))
    if output_dir:
        path = write_summary_csv(rows, Path(output_dir) / 'table3_summary.csv')
        print(f"Summary written to {path}")
    return ok


def run_check(configs):
    for config in configs:
        print(f"{config.name}: {len(config.vehicles)} vehicles, order {config.order}")
        for check in check_scenario(config):
            print(
                f"  vehicle {check.vehicle}: t_in in [{check.t_in_min:.4f}, {check.t_in_max:.4f}] s, "
                f"free flow ({check.free_in:.4f}, {check.free_out:.4f}) s"
            )
    return True


def build_parser():
    parser = argparse.ArgumentParser(
        description='Coordinate vehicles through an intersection with distributed SQP',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )

    parser.add_argument(
        'command',
        choices=COMMANDS,
        help='What to run'
    )

    parser.add_argument(
        'scenarios',
        nargs='*',
        help='Scenario files (INI); table3 reads the table scenarios from --scenario-dir'
    )

    parser.add_argument(
        '--mode',
        choices=[mode.value for mode in SQPMode],
        help='Globalization mode (default: SQP_MODE env var or scenario file)'
    )

    parser.add_argument(
        '--seed',
        type=int,
        help='Channel and measurement-noise seed'
    )

    parser.add_argument(
        '--output-dir',
        type=str,
        default=get_output_dir(),
        help='Directory for CSV output (default: OUTPUT_DIR env var)'
    )

    parser.add_argument(
        '--scenario-dir',
        type=str,
        default=get_scenario_dir(),
        help='Directory holding scenario_1.ini .. scenario_7.ini (default: SCENARIO_DIR env var)'
    )

    parser.add_argument(
        '--tolerance',
        type=float,
        help='KKT stopping tolerance of the coordinator'
    )

    parser.add_argument(
        '--drop-probability',
        type=float,
        help='Packet drop probability of the simulated channel'
    )

    parser.add_argument(
        '--local',
        action='store_true',
        help='Call the agents in-process instead of over the simulated channel'
    )

    parser.add_argument(
        '--verbose',
        action='store_true',
        help='Enable verbose logging'
    )

    return parser


def main():
    """Main entry point."""
    load_dotenv()
    args = build_parser().parse_args()

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format='%(message)s',
        stream=sys.stderr,
    )

    if args.command != 'table3' and not args.scenarios:
        print(f"Error: '{args.command}' needs at least one scenario file.", file=sys.stderr)
        sys.exit(1)

    if args.tolerance is not None and not args.tolerance > 0:
        print("Error: --tolerance must be positive", file=sys.stderr)
        sys.exit(1)

    if args.drop_probability is not None and not 0.0 <= args.drop_probability < 1.0:
        print("Error: --drop-probability must lie in [0, 1)", file=sys.stderr)
        sys.exit(1)

    try:
        if args.command == 'table3':
            success = run_table3(args.scenario_dir, args, args.output_dir)
        else:
            configs = load_all(args.scenarios, args)
            if args.command == 'check':
                success = run_check(configs)
            elif args.command == 'solve':
                success = run_solve(configs, args.output_dir)
            else:
                success = run_simulate(configs, args.output_dir)
    except IntersectionError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)

    sys.exit(0 if success else 1)


if __name__ == '__main__':
    main()
