import csv
import os
import sys
import tempfile
import unittest
from io import StringIO
from pathlib import Path
from types import SimpleNamespace
from unittest.mock import patch

from conftest import SCENARIO_DIR

import intersection_sim
from intersection_core import NoFeasibleCrossingError, SQPMode, TimePair, TimesVector


TOY = str(SCENARIO_DIR / "toy_two_vehicle.ini")


def fake_coordination(converged=True, mode=SQPMode.PROJECTION):
    return SimpleNamespace(
        converged=converged,
        status="converged" if converged else "max-iterations",
        mode=mode,
        n_sqp=4,
        n_ls=6,
        regularizations=1,
        residual=1e-3,
        times=TimesVector((1, 2), (TimePair(3.0, 3.8), TimePair(3.8, 4.6))),
    )


@patch('intersection_sim.load_dotenv')
class TestIntersectionSimCli(unittest.TestCase):

    def setUp(self):
        self.original_env = os.environ.copy()
        for name in ('SCENARIO_DIR', 'OUTPUT_DIR', 'SQP_MODE', 'CHANNEL_SEED'):
            os.environ.pop(name, None)

    def tearDown(self):
        os.environ.clear()
        os.environ.update(self.original_env)

    def run_main(self, *argv):
        with patch.object(sys, 'argv', ['intersection_sim.py', *argv]):
            with self.assertRaises(SystemExit) as cm:
                intersection_sim.main()
        return cm.exception.code

    @patch('sys.stderr', new_callable=StringIO)
    def test_missing_scenario_error(self, mock_stderr, _dotenv):
        """Test that commands other than table3 need a scenario file."""
        self.assertEqual(self.run_main('solve'), 1)
        self.assertIn("Error: 'solve' needs at least one scenario file.", mock_stderr.getvalue())

    @patch('sys.stderr', new_callable=StringIO)
    def test_invalid_tolerance(self, mock_stderr, _dotenv):
        self.assertEqual(self.run_main('solve', TOY, '--tolerance', '0'), 1)
        self.assertIn("Error: --tolerance must be positive", mock_stderr.getvalue())

    @patch('sys.stderr', new_callable=StringIO)
    def test_invalid_drop_probability(self, mock_stderr, _dotenv):
        self.assertEqual(self.run_main('solve', TOY, '--drop-probability', '1.5'), 1)
        self.assertIn("Error: --drop-probability must lie in [0, 1)", mock_stderr.getvalue())

    @patch('sys.stderr', new_callable=StringIO)
    def test_unreadable_scenario(self, mock_stderr, _dotenv):
        self.assertEqual(self.run_main('check', 'does/not/exist.ini'), 1)
        self.assertIn("Error: cannot read scenario file", mock_stderr.getvalue())

    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_solve_prints_assigned_times(self, mock_coordinate, mock_stdout, _dotenv):
        mock_coordinate.return_value = (fake_coordination(), ())

        self.assertEqual(self.run_main('solve', TOY), 0)

        output = mock_stdout.getvalue()
        self.assertIn("toy_two_vehicle: converged in 4 SQP iterations", output)
        self.assertIn("vehicle 2: t_in=3.8000 s", output)

    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_flags_override_scenario(self, mock_coordinate, mock_stdout, _dotenv):
        """Test CLI flags win over the scenario file."""
        mock_coordinate.return_value = (fake_coordination(), ())

        self.run_main('solve', TOY, '--mode', 'relaxation', '--seed', '7', '--local', '--tolerance', '1e-3')

        config = mock_coordinate.call_args[0][0]
        self.assertIs(config.sqp.mode, SQPMode.RELAXATION)
        self.assertEqual(config.sqp.tolerance, 1e-3)
        self.assertEqual(config.channel.seed, 7)
        self.assertEqual(config.noise_seed, 7)
        self.assertFalse(config.distributed)

    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_mode_from_env(self, mock_coordinate, mock_stdout, _dotenv):
        """Test SQP_MODE applies when neither the file nor a flag sets it."""
        os.environ['SQP_MODE'] = 'relaxation'
        mock_coordinate.return_value = (fake_coordination(), ())

        self.run_main('solve', str(SCENARIO_DIR / 'scenario_1.ini'))

        config = mock_coordinate.call_args[0][0]
        self.assertIs(config.sqp.mode, SQPMode.RELAXATION)

    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_unconverged_run_exits_nonzero(self, mock_coordinate, mock_stdout, _dotenv):
        mock_coordinate.return_value = (fake_coordination(converged=False), ())
        self.assertEqual(self.run_main('solve', TOY), 1)
        self.assertIn("max-iterations", mock_stdout.getvalue())

    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_summary_csv_written(self, mock_coordinate, mock_stdout, _dotenv):
        mock_coordinate.return_value = (fake_coordination(), ())
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(self.run_main('solve', TOY, '--output-dir', tmp), 0)

            with open(Path(tmp) / 'summary.csv', newline='') as handle:
                rows = list(csv.DictReader(handle))

        self.assertEqual(rows[0]['scenario'], 'toy_two_vehicle')
        self.assertEqual(rows[0]['n_sqp'], '4')
        self.assertEqual(rows[0]['converged'], 'true')

    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_table3_runs_every_scenario_in_both_modes(self, mock_coordinate, mock_stdout, _dotenv):
        mock_coordinate.side_effect = lambda config: (fake_coordination(mode=config.sqp.mode), ())

        self.assertEqual(self.run_main('table3', '--scenario-dir', str(SCENARIO_DIR)), 0)

        self.assertEqual(mock_coordinate.call_count, 14)
        modes = {call[0][0].sqp.mode for call in mock_coordinate.call_args_list}
        self.assertEqual(modes, {SQPMode.PROJECTION, SQPMode.RELAXATION})
        output = mock_stdout.getvalue()
        self.assertIn("scenario_7", output)
        self.assertIn("relaxation n_sqp", output)

    @patch('sys.stderr', new_callable=StringIO)
    @patch('sys.stdout', new_callable=StringIO)
    @patch('intersection_sim.coordinate_scenario')
    def test_table3_records_a_raising_scenario_and_continues(self, mock_coordinate, mock_stdout, mock_stderr, _dotenv):
        """Test that one failing scenario becomes a failed row instead of aborting the table."""
        def coordinate(config):
            if config.name == 'scenario_3' and config.sqp.mode is SQPMode.PROJECTION:
                raise NoFeasibleCrossingError("t_in=3.878888 is not reachable")
            return fake_coordination(mode=config.sqp.mode), ()

        mock_coordinate.side_effect = coordinate
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(self.run_main('table3', '--scenario-dir', str(SCENARIO_DIR), '--output-dir', tmp), 1)

            with open(Path(tmp) / 'table3_summary.csv', newline='') as handle:
                rows = list(csv.DictReader(handle))

        self.assertEqual(mock_coordinate.call_count, 14)
        self.assertEqual(len(rows), 14)
        failed = [row for row in rows if row['converged'] == 'false']
        self.assertEqual([(row['scenario'], row['mode']) for row in failed], [('scenario_3', 'projection')])
        self.assertIn("Error: scenario_3 (projection)", mock_stderr.getvalue())
        self.assertIn("0*", mock_stdout.getvalue())

    @patch('sys.stdout', new_callable=StringIO)
    def test_check_prints_windows(self, mock_stdout, _dotenv):
        self.assertEqual(self.run_main('check', TOY), 0)
        output = mock_stdout.getvalue()
        self.assertIn("toy_two_vehicle: 2 vehicles, order (1, 2)", output)
        self.assertIn("vehicle 2: t_in in [", output)

    def test_scenario_dir_from_env(self, _dotenv):
        os.environ['SCENARIO_DIR'] = '/tmp/scenarios'
        self.assertEqual(intersection_sim.get_scenario_dir(), '/tmp/scenarios')

    def test_default_scenario_dir_is_bundled(self, _dotenv):
        self.assertEqual(Path(intersection_sim.get_scenario_dir()), SCENARIO_DIR)

    def test_output_dir_from_env(self, _dotenv):
        os.environ['OUTPUT_DIR'] = 'out'
        self.assertEqual(intersection_sim.get_output_dir(), 'out')


if __name__ == '__main__':
    unittest.main()
