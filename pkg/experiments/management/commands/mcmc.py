from experiments.exporters import write_csv, write_json
from experiments.services import mcmc_run

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Parallel tempering estimate of the overlap law and its empirical rate'
    command_name = 'mcmc'

    def execute_run(self, config, out_dir):
        rows, rate_rows, summary = mcmc_run(config)
        overlap_columns = ['q', 'probability', 'stderr'] + (['exact'] if 'total_variation' in summary else [])
        rate_columns = ['q', 'mass', 'rate', 'error'] + (['i_lb', 'consistent'] if 'all_consistent' in summary else [])
        files = [
            write_csv(out_dir / 'overlap.csv', rows, overlap_columns),
            write_csv(out_dir / 'rate.csv', rate_rows, rate_columns),
            write_json(out_dir / 'mcmc_summary.json', summary),
        ]
        if not summary['mixing_ok']:
            self.stdout.write(self.style.WARNING(f"Replica exchange is not mixing: {summary['notes']}"))
        if 'total_variation' in summary:
            self.stdout.write(f"Total variation against enumeration: {summary['total_variation']:.4f}")
        return files
