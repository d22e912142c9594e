from experiments.exporters import write_json
from experiments.services import barrier_run

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Barrier search near an atom with positive replicon'
    command_name = 'barrier'

    def execute_run(self, config, out_dir):
        payload = barrier_run(config)
        barrier = payload['barrier']
        if barrier['found']:
            self.stdout.write(self.style.SUCCESS(
                f"Barrier at q={barrier['q']:.4f}, lambda*={barrier['lambda']:.4f}, gap {barrier['gap']:.4e}"
            ))
        else:
            self.stdout.write(self.style.WARNING(f"No barrier near q*={barrier['q_star']:.4f}"))
        return [write_json(out_dir / 'barrier.json', payload)]
