from experiments.exporters import write_csv, write_json
from experiments.services import PHASE_SCAN_COLUMNS, phase_scan

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Scan beta for single-atom, GRSB and GPREV flags with optional barrier search'
    command_name = 'phase_scan'

    def execute_run(self, config, out_dir):
        result = phase_scan(config)
        table = write_csv(out_dir / 'phase_scan.csv', [row.as_dict() for row in result.rows], PHASE_SCAN_COLUMNS)
        summary = write_json(out_dir / 'phase_scan_summary.json', result.summary())

        for note in result.notes:
            self.stdout.write(self.style.WARNING(note))
        failed = [row.beta for row in result.rows if not row.ok]
        if failed:
            self.stdout.write(self.style.WARNING(f"{len(failed)} row(s) did not converge: {failed}"))
        self.stdout.write(f"beta_s={result.beta_s} beta_gfeb={result.beta_gfeb}")
        return [table, summary]
