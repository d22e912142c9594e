"""
Shared plumbing of the experiment commands: config loading, flag overrides,
output directory, manifest, run ledger and exit codes.
"""

import logging
from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from experiments.exporters import write_json, write_manifest
from experiments.forms import build_run_config, read_document
from experiments.services import close_run, open_run
from mixtures.conf import get_setting
from mixtures.exceptions import ConvergenceError, InvariantViolation

logger = logging.getLogger('experiments')

EXIT_CONFIG_ERROR = 2
EXIT_NOT_CONVERGED = 3
EXIT_INVARIANT_VIOLATION = 4


def _messages(exc):
    if isinstance(exc, ValidationError):
        return '; '.join(exc.messages)
    return str(exc)


class ExperimentCommand(BaseCommand):
    """Base for commands driven by a configuration document"""

    command_name = ''

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='TOML or JSON configuration file')
        parser.add_argument('--seed', type=int, help='Seed overriding [run].seed')
        parser.add_argument('--out', help='Output directory overriding [run].out')
        parser.add_argument('--threads', type=int, help='Worker threads overriding [run].threads')

    def execute_run(self, config, out_dir):
        """Run the experiment and return the list of written files"""
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            document = read_document(options['config'])
            config = build_run_config(
                self.command_name, document,
                seed=options.get('seed'), threads=options.get('threads'),
                out=options.get('out'), source=options['config'],
            )
        except (ValidationError, ValueError) as exc:
            raise CommandError(f"Configuration error: {_messages(exc)}", returncode=EXIT_CONFIG_ERROR)
        if config.threads < 1:
            raise CommandError("Configuration error: --threads must be at least 1", returncode=EXIT_CONFIG_ERROR)

        out_dir = Path(config.out or Path(get_setting('OUTPUT_DIR')) / f'{self.command_name}-{config.seed}')
        out_dir.mkdir(parents=True, exist_ok=True)
        run = open_run(config, out_dir)
        self.stdout.write(f"{self.command_name}: {config.spec} (seed={config.seed}, threads={config.threads})")

        try:
            files = self.execute_run(config, out_dir)
        except (ValidationError, ValueError) as exc:
            message = _messages(exc)
            close_run(run, 'config_error', EXIT_CONFIG_ERROR, message)
            raise CommandError(f"Configuration error: {message}", returncode=EXIT_CONFIG_ERROR)
        except ConvergenceError as exc:
            close_run(run, 'not_converged', EXIT_NOT_CONVERGED, str(exc))
            write_manifest(out_dir, config, [], status='not_converged', extra={'error': str(exc)})
            raise CommandError(f"Numerical non-convergence: {exc}", returncode=EXIT_NOT_CONVERGED)
        except InvariantViolation as exc:
            logger.error("Invariant violation in %s: %s %s", self.command_name, exc, exc.details)
            violation = write_json(out_dir / 'violation.json', {'message': str(exc), 'details': exc.details})
            write_manifest(out_dir, config, [violation], status='invariant_violation', extra={'error': str(exc)})
            close_run(run, 'invariant_violation', EXIT_INVARIANT_VIOLATION, str(exc))
            raise CommandError(f"Invariant violation: {exc}", returncode=EXIT_INVARIANT_VIOLATION)

        manifest = write_manifest(out_dir, config, files)
        close_run(run, 'success', 0)
        self.stdout.write(self.style.SUCCESS(
            f"{self.command_name} finished: {len(files)} file(s) in {out_dir} ({Path(manifest).name})"
        ))
