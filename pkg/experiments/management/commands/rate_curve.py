from experiments.exporters import write_csv, write_json
from experiments.services import rate_curve_run

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Certified lower bound on the overlap rate function and the barrier height'
    command_name = 'rate_curve'

    def execute_run(self, config, out_dir):
        curve, rows, columns, summary = rate_curve_run(config)
        files = [
            write_csv(out_dir / 'rate_curve.csv', rows, columns),
            write_json(out_dir / 'rate_curve_summary.json', summary),
        ]
        if curve.gfeb:
            files.append(write_json(out_dir / 'certificate.json', curve.certificate))
            self.stdout.write(self.style.SUCCESS(
                f"Barrier certified: height {curve.h_cal:.4e}, gap decay rate {-curve.h_cal:.4e}"
            ))
        else:
            self.stdout.write(self.style.WARNING("No barrier certified on this grid"))
        overlay = summary['overlay']
        if overlay and not overlay['all_consistent']:
            self.stdout.write(self.style.WARNING("MCMC rates fall below the bound at some q"))
        return files
