import csv
import io
import json
import math
import shutil
import tempfile
from pathlib import Path
from types import SimpleNamespace
from unittest import mock

from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, tag

from mixtures.exceptions import ConvergenceError, InvariantViolation
from parisi.measures import AtomicMeasure

from .exporters import format_cell, write_csv
from .forms import ModelBlockForm, PhaseScanForm, build_run_config, read_document
from .models import ExperimentRun
from .services import PhaseScanRow, _phase_row

SK_MODEL = '[model]\nxi0_terms = [[2, 1.0]]\nbeta = 1.0\n'
PURE_FOUR_SPHERICAL = '[model]\nxi0_terms = [[4, 1.0]]\nbeta = 2.0\nspherical = true\n'


def read_rows(path):
    with open(path, newline='') as handle:
        return list(csv.DictReader(handle))


def scripted_row(barrier_from):
    """Row builder with a single-atom flag that flips at beta = 1.2"""
    def build(config, beta, refined=False):
        row = PhaseScanRow(beta=float(beta), refined=refined, free_energy=-beta, k_eff=1 if beta < 1.2 else 2)
        row.is_atom = beta < 1.2
        row.grsb = not row.is_atom
        if beta >= barrier_from:
            row.barrier_gap, row.barrier_q = 0.01, 0.05
        if beta == 2.0:
            row.status, row.message = 'not_converged', 'optimizer did not converge; best value reported'
        return row
    return build


class CommandTestCase(TestCase):
    """Temporary config files and output directories"""

    def setUp(self):
        self.workdir = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.workdir, ignore_errors=True)

    def write_config(self, text, name='run.toml'):
        path = self.workdir / name
        path.write_text(text)
        return str(path)

    def run_command(self, command, text, out='out', **flags):
        out_dir = self.workdir / out
        call_command(command, config=self.write_config(text), out=str(out_dir), stdout=io.StringIO(), **flags)
        return out_dir

    def assertExitCode(self, code, command, text, **flags):
        with self.assertRaises(CommandError) as raised:
            self.run_command(command, text, **flags)
        self.assertEqual(raised.exception.returncode, code)
        return raised.exception


class ExactGapCommandTests(CommandTestCase):
    config = SK_MODEL + '[exact_gap]\nn_spins = 4\nbetas = [0.0, 0.5]\nseeds = 2\n'

    def test_rows_and_aggregate(self):
        out_dir = self.run_command('exact_gap', self.config, seed=0)
        rows = read_rows(out_dir / 'exact_gap.csv')
        self.assertEqual(len(rows), 4)
        self.assertEqual([row['seed'] for row in rows], ['0', '1', '0', '1'])
        for row in rows[:2]:
            self.assertAlmostEqual(float(row['lambda1']), 0.5, places=10)
            self.assertEqual(row['barrier_flagged'], 'false')
        for row in rows:
            self.assertLess(float(row['identity_error']), 1e-8)
            self.assertLessEqual(float(row['coercive_lower']), float(row['lambda1']) * (1 + 1e-9))

        summary = read_rows(out_dir / 'exact_gap_summary.csv')
        self.assertEqual(len(summary), 2)
        reference = math.log(0.5) / 4
        self.assertAlmostEqual(float(summary[0]['srw_reference']), reference)
        self.assertAlmostEqual(float(summary[0]['mean_log_lambda1_per_n']), reference, places=10)

        manifest = json.loads((out_dir / 'manifest.json').read_text())
        self.assertEqual(manifest['status'], 'success')
        self.assertEqual(manifest['config']['exact_gap']['n_spins'], 4)
        self.assertIn('exact_gap.csv', manifest['files'])

    def test_ledger_entry(self):
        self.run_command('exact_gap', self.config)
        run = ExperimentRun.objects.get()
        self.assertEqual(run.command, 'exact_gap')
        self.assertEqual(run.status, 'success')
        self.assertEqual(run.exit_code, 0)
        self.assertIsNotNone(run.duration)

    def test_outputs_are_deterministic(self):
        first = self.run_command('exact_gap', self.config, out='first', seed=1)
        second = self.run_command('exact_gap', self.config, out='second', seed=1)
        for name in ('exact_gap.csv', 'exact_gap_summary.csv'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_recording_can_be_disabled(self):
        with self.settings(SPINGLASS_SETTINGS={'RECORD_RUNS': False}):
            self.run_command('exact_gap', self.config)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_size_limit(self):
        text = SK_MODEL + '[exact_gap]\nn_spins = 30\nbetas = [0.5]\n'
        self.assertExitCode(2, 'exact_gap', text)
        self.assertEqual(ExperimentRun.objects.get().status, 'config_error')

    def test_invariant_violation_exit_code(self):
        error = InvariantViolation('bound below the exact gap', {'gap': 0.25})
        with mock.patch('experiments.management.commands.exact_gap.exact_gap', side_effect=error):
            self.assertExitCode(4, 'exact_gap', self.config)
        violation = json.loads((self.workdir / 'out' / 'violation.json').read_text())
        self.assertEqual(violation['details'], {'gap': 0.25})
        self.assertEqual(ExperimentRun.objects.get().status, 'invariant_violation')

    def test_non_convergence_exit_code(self):
        error = ConvergenceError('eigensolver stalled')
        with mock.patch('experiments.management.commands.exact_gap.exact_gap', side_effect=error):
            self.assertExitCode(3, 'exact_gap', self.config)
        run = ExperimentRun.objects.get()
        self.assertEqual((run.status, run.exit_code), ('not_converged', 3))


class ConfigErrorTests(CommandTestCase):

    def test_unknown_key(self):
        text = SK_MODEL + '[exact_gap]\nn_spins = 4\nbetas = [0.5]\ncolour = "red"\n'
        error = self.assertExitCode(2, 'exact_gap', text)
        self.assertIn('colour', str(error))
        self.assertFalse(ExperimentRun.objects.exists())

    def test_unknown_block(self):
        text = SK_MODEL + '[exact_gap]\nn_spins = 4\nbetas = [0.5]\n[mcmc]\nn_spins = 4\n'
        self.assertExitCode(2, 'exact_gap', text)

    def test_missing_file(self):
        with self.assertRaises(CommandError) as raised:
            call_command('exact_gap', config=str(self.workdir / 'absent.toml'), stdout=io.StringIO())
        self.assertEqual(raised.exception.returncode, 2)

    def test_non_convex_rate_curve(self):
        text = '[model]\nterms = [[2, 1.0], [3, 1.0]]\n[rate_curve]\natoms = [0.5]\nmasses = [1.0]\n'
        error = self.assertExitCode(2, 'rate_curve', text)
        self.assertIn('convex', str(error))

    def test_scan_needs_beta_decomposition(self):
        text = '[model]\nterms = [[2, 1.0]]\n[phase_scan]\nbetas = [0.5]\n'
        self.assertExitCode(2, 'phase_scan', text)


class PhaseScanCommandTests(CommandTestCase):

    def test_empty_grid(self):
        out_dir = self.run_command('phase_scan', SK_MODEL + '[phase_scan]\nbetas = []\n')
        with open(out_dir / 'phase_scan.csv') as handle:
            self.assertEqual(handle.read().splitlines(), [
                'beta,status,free_energy,k_eff,is_atom,grsb,gprev,gprev_witness,beta_derivative,'
                'atom_criterion,barrier_gap,barrier_q,refined,message',
            ])
        summary = json.loads((out_dir / 'phase_scan_summary.json').read_text())
        self.assertIsNone(summary['beta_s'])

    def test_spherical_high_temperature_rows(self):
        text = PURE_FOUR_SPHERICAL + '[phase_scan]\nbetas = [0.5, 1.0]\nk = 1\nmulti_starts = 2\n'
        out_dir = self.run_command('phase_scan', text)
        rows = read_rows(out_dir / 'phase_scan.csv')
        self.assertEqual([float(row['beta']) for row in rows], [0.5, 1.0])
        for row in rows:
            self.assertEqual(row['is_atom'], 'true')
            self.assertEqual(row['atom_criterion'], 'true')
            self.assertEqual(row['k_eff'], '1')
        summary = json.loads((out_dir / 'phase_scan_summary.json').read_text())
        self.assertEqual(summary['beta_s'], 1.0)
        self.assertIsNone(summary['beta_gfeb'])


class PhaseScanBisectionTests(CommandTestCase):
    config = SK_MODEL + '[phase_scan]\nbetas = [0.5, 1.0, 1.5, 2.0]\nbisect = 2\nbarrier = true\n'

    def test_refined_rows_and_barrier_columns(self):
        with mock.patch('experiments.services._phase_row', side_effect=scripted_row(1.0)):
            out_dir = self.run_command('phase_scan', self.config)
        rows = read_rows(out_dir / 'phase_scan.csv')
        self.assertEqual([float(row['beta']) for row in rows], [0.5, 1.0, 1.125, 1.25, 1.5, 2.0])
        self.assertEqual([row['refined'] for row in rows], ['false', 'false', 'true', 'true', 'false', 'false'])
        self.assertEqual([row['is_atom'] for row in rows], ['true', 'true', 'true', 'false', 'false', 'false'])
        self.assertEqual(rows[0]['barrier_gap'], '')
        self.assertEqual({row['barrier_gap'] for row in rows[1:]}, {'0.01'})
        self.assertEqual([row['status'] for row in rows].count('not_converged'), 1)
        self.assertEqual(rows[-1]['status'], 'not_converged')

        summary = json.loads((out_dir / 'phase_scan_summary.json').read_text())
        self.assertEqual(summary['beta_s'], 1.125)
        self.assertEqual(summary['beta_gfeb'], 1.0)
        self.assertEqual(summary['failed_rows'], [2.0])
        self.assertEqual(summary['notes'], [])

    def test_barrier_above_the_single_atom_range_is_noted(self):
        with mock.patch('experiments.services._phase_row', side_effect=scripted_row(1.5)):
            out_dir = self.run_command('phase_scan', self.config)
        summary = json.loads((out_dir / 'phase_scan_summary.json').read_text())
        self.assertEqual(summary['beta_gfeb'], 1.5)
        self.assertEqual(
            summary['notes'], ['barrier first found at beta=1.5 above the last single-atom beta=1.125'],
        )

    def test_no_bisection_without_a_flip(self):
        text = SK_MODEL + '[phase_scan]\nbetas = [0.5, 1.0]\nbisect = 3\n'
        with mock.patch('experiments.services._phase_row', side_effect=scripted_row(5.0)) as build:
            out_dir = self.run_command('phase_scan', text)
        self.assertEqual(build.call_count, 2)
        self.assertEqual([row['refined'] for row in read_rows(out_dir / 'phase_scan.csv')], ['false', 'false'])


class PhaseRowTests(SimpleTestCase):

    def setUp(self):
        document = {
            'model': {'xi0_terms': [[2, 1.0]], 'beta': 1.0},
            'phase_scan': {'betas': [1.5], 'barrier': True, 'grid_points': 64},
        }
        self.config = build_run_config('phase_scan', document)
        self.report = SimpleNamespace(
            gprev=True, gprev_witness=0.0, beta_derivative=-0.1, atom_replicons=[(0.0, 0.5)],
            free_energy=0.7, k_eff=1, is_atom=True, converged=False, minimizer=AtomicMeasure.delta(0.0),
        )

    def test_barrier_columns_from_the_search(self):
        found = SimpleNamespace(found=True, gap=0.02, q=0.01)
        with mock.patch('experiments.services.minimize_krsb', return_value=self.report), \
                mock.patch('experiments.services.barrier_search', return_value=found) as search:
            row = _phase_row(self.config, 1.5)
        self.assertEqual((row.barrier_gap, row.barrier_q), (0.02, 0.01))
        self.assertEqual((row.is_atom, row.grsb, row.gprev, row.k_eff), (True, False, True, 1))
        self.assertEqual(row.status, 'not_converged')
        spec, measure, q_star, search_opts = search.call_args.args
        self.assertEqual(spec.beta, 1.5)
        self.assertEqual(q_star, 0.0)
        self.assertEqual(search_opts['grid'].n_points, 64)

    def test_failed_optimizer_empties_the_row(self):
        with mock.patch('experiments.services.minimize_krsb', side_effect=ConvergenceError('stalled')):
            row = _phase_row(self.config, 1.5, refined=True)
        self.assertEqual((row.status, row.message), ('not_converged', 'stalled'))
        self.assertIsNone(row.is_atom)
        self.assertIsNone(row.barrier_gap)
        self.assertTrue(row.refined)


@tag('slow')
class IsingPhaseScanTests(CommandTestCase):

    def test_sk_scan_refines_the_transition(self):
        text = SK_MODEL + '[phase_scan]\nbetas = [0.1, 2.0]\nk = 2\nbisect = 1\nmulti_starts = 2\ngrid_points = 256\n'
        out_dir = self.run_command('phase_scan', text, seed=0)
        rows = read_rows(out_dir / 'phase_scan.csv')
        self.assertEqual([float(row['beta']) for row in rows], [0.1, 1.05, 2.0])
        self.assertEqual([row['refined'] for row in rows], ['false', 'true', 'false'])
        self.assertEqual((rows[0]['is_atom'], rows[-1]['is_atom']), ('true', 'false'))
        self.assertEqual(rows[-1]['grsb'], 'true')
        for row in rows:
            self.assertIn(row['status'], ('success', 'not_converged'))
            self.assertNotEqual(row['free_energy'], '')
        summary = json.loads((out_dir / 'phase_scan_summary.json').read_text())
        self.assertIn(summary['beta_s'], (0.1, 1.05))
        self.assertIsNone(summary['beta_gfeb'])


class CrossCommandTests(CommandTestCase):

    def test_no_certified_gfeb_where_the_scan_is_single_atom(self):
        scan = self.run_command(
            'phase_scan', PURE_FOUR_SPHERICAL + '[phase_scan]\nbetas = [0.5, 1.0]\nk = 1\nmulti_starts = 2\n',
            out='scan',
        )
        beta_s = json.loads((scan / 'phase_scan_summary.json').read_text())['beta_s']
        self.assertEqual(beta_s, 1.0)

        model = PURE_FOUR_SPHERICAL.replace('beta = 2.0', f'beta = {beta_s}')
        text = model + '[rate_curve]\nk = 1\nq_grid = [-0.6, -0.3, 0.3, 0.6]\n'
        curve = self.run_command('rate_curve', text, out='curve')
        summary = json.loads((curve / 'rate_curve_summary.json').read_text())
        self.assertFalse(summary['gfeb'])
        self.assertEqual(summary['h_cal'], 0.0)


class SphericalCertificateCommandTests(CommandTestCase):
    measure = 'atoms = [0.0, 0.9]\nmasses = [0.6, 0.4]\n'

    def test_rate_curve_certificate(self):
        text = PURE_FOUR_SPHERICAL + '[rate_curve]\n' + self.measure + 'q_grid = [-0.9, -0.45, 0.0, 0.45, 0.9]\n'
        out_dir = self.run_command('rate_curve', text)
        rows = read_rows(out_dir / 'rate_curve.csv')
        self.assertEqual([row['is_zero'] for row in rows], ['true', 'false', 'true', 'false', 'true'])
        certificate = json.loads((out_dir / 'certificate.json').read_text())
        self.assertEqual(certificate['q2'], -0.45)
        summary = json.loads((out_dir / 'rate_curve_summary.json').read_text())
        self.assertTrue(summary['gfeb'])
        self.assertEqual(summary['predicted_gap_rate'], -summary['h_cal'])
        self.assertGreater(summary['h_cal'], 0.0)

    def test_barrier(self):
        text = PURE_FOUR_SPHERICAL + '[barrier]\n' + self.measure + 'q_star = 0.0\nn_spins = 100\n'
        out_dir = self.run_command('barrier', text)
        payload = json.loads((out_dir / 'barrier.json').read_text())
        self.assertTrue(payload['barrier']['found'])
        self.assertAlmostEqual(payload['barrier']['q'], 0.01)
        self.assertIsNotNone(payload['barrier']['predicted_gap_bound'])

    def test_barrier_needs_an_atom(self):
        text = PURE_FOUR_SPHERICAL + '[barrier]\n' + self.measure + 'q_star = 0.5\n'
        self.assertExitCode(2, 'barrier', text)


class McmcCommandTests(CommandTestCase):

    def test_small_run_against_enumeration(self):
        text = (
            '[model]\nterms = [[2, 0.25]]\n'
            '[mcmc]\nn_spins = 4\nsweeps = 400\nn_temps = 2\nbatches = 4\nq_points = 3\n'
        )
        out_dir = self.run_command('mcmc', text, seed=5)
        overlap = read_rows(out_dir / 'overlap.csv')
        self.assertEqual(len(overlap), 5)
        self.assertAlmostEqual(sum(float(row['probability']) for row in overlap), 1.0)
        self.assertAlmostEqual(sum(float(row['exact']) for row in overlap), 1.0)
        self.assertEqual(len(read_rows(out_dir / 'rate.csv')), 3)
        summary = json.loads((out_dir / 'mcmc_summary.json').read_text())
        self.assertLessEqual(summary['total_variation'], 1.0)
        self.assertEqual(summary['n_sweeps'], 400)

    def test_spherical_rejected(self):
        text = PURE_FOUR_SPHERICAL + '[mcmc]\nn_spins = 4\nsweeps = 400\n'
        self.assertExitCode(2, 'mcmc', text)


class FormTests(SimpleTestCase):

    def test_model_needs_one_form_of_xi(self):
        self.assertFalse(ModelBlockForm({}).is_valid())
        self.assertFalse(ModelBlockForm({'xi0_terms': [[2, 1.0]]}).is_valid())
        self.assertFalse(ModelBlockForm({'terms': [[2, 1.0]], 'xi0_terms': [[2, 1.0]], 'beta': 1.0}).is_valid())
        form = ModelBlockForm({'terms': [[2, 0.5]], 'h': 0.1})
        self.assertTrue(form.is_valid())
        self.assertEqual(form.to_spec().h, 0.1)

    def test_zero_beta_is_the_zero_mixture(self):
        form = ModelBlockForm({'xi0_terms': [[2, 1.0]], 'beta': 1.0})
        self.assertTrue(form.is_valid())
        self.assertTrue(form.to_spec(0.0).is_zero)
        self.assertEqual(form.to_spec(2.0).beta, 2.0)

    def test_beta_grid_must_ascend(self):
        self.assertFalse(PhaseScanForm({'betas': [1.0, 0.5]}).is_valid())
        self.assertFalse(PhaseScanForm({'betas': [0.0, 0.5]}).is_valid())
        self.assertTrue(PhaseScanForm({'betas': [0.5, 1.0]}).is_valid())

    def test_flags_override_the_run_block(self):
        document = {
            'model': {'terms': [[2, 1.0]]},
            'run': {'seed': 7, 'threads': 2},
            'mcmc': {'n_spins': 4, 'sweeps': 100},
        }
        config = build_run_config('mcmc', document, seed=11)
        self.assertEqual((config.seed, config.threads), (11, 2))
        block = config.as_dict()['mcmc']
        self.assertEqual((block['n_spins'], block['sweeps']), (4, 100))
        self.assertNotIn('schedule', block)

    def test_measure_block(self):
        document = {'model': {'terms': [[2, 1.0]]}, 'barrier': {'atoms': [0.2, 0.6], 'masses': [0.5, 0.5]}}
        config = build_run_config('barrier', document)
        self.assertIsInstance(config.measure, AtomicMeasure)
        with self.assertRaises(ValidationError):
            build_run_config('barrier', {'model': {'terms': [[2, 1.0]]}, 'barrier': {'atoms': [0.2]}})

    def test_errors_are_collected(self):
        with self.assertRaises(ValidationError) as raised:
            build_run_config('exact_gap', {'model': {}, 'exact_gap': {'betas': [0.5]}})
        self.assertGreaterEqual(len(raised.exception.messages), 2)

    def test_read_json_document(self):
        path = Path(tempfile.mkdtemp()) / 'run.json'
        self.addCleanup(shutil.rmtree, path.parent, ignore_errors=True)
        path.write_text('{"model": {"terms": [[2, 1.0]]}}')
        self.assertEqual(read_document(path)['model']['terms'], [[2, 1.0]])
        path.write_text('[1, 2]')
        with self.assertRaises(ValidationError):
            read_document(path)


class ExporterTests(SimpleTestCase):

    def test_cell_format(self):
        self.assertEqual(format_cell(True), 'true')
        self.assertEqual(format_cell(None), '')
        self.assertEqual(format_cell(float('-inf')), '-inf')
        self.assertEqual(format_cell(0.1), '0.1')
        self.assertEqual(format_cell(3), '3')

    def test_column_order(self):
        path = Path(tempfile.mkdtemp()) / 'table.csv'
        self.addCleanup(shutil.rmtree, path.parent, ignore_errors=True)
        write_csv(path, [{'b': 2, 'a': 1.5}], ['a', 'b'])
        self.assertEqual(path.read_text(), 'a,b\n1.5,2\n')
