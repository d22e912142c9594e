"""
Validation of run configuration documents.

A document is a TOML (or JSON) file with a [model] block, an optional [run]
block and one block named after the command. Each block is checked by a form;
unknown keys and unknown blocks are configuration errors.
"""

import json
import tomllib
from dataclasses import dataclass
from pathlib import Path

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from mixtures.calculators import MixtureSpec
from parisi.measures import AtomicMeasure


def _pairs(value, label):
    if not isinstance(value, (list, tuple)) or not value:
        raise ValidationError(f'{label} must be a non-empty list of [p, coeff] pairs.')
    for item in value:
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise ValidationError(f'{label} entry {item!r} is not a [p, coeff] pair.')
    return [tuple(item) for item in value]


def _numbers(value, label, allow_empty=False):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or (not value and not allow_empty):
        raise ValidationError(f'{label} must be a list of numbers.')
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ValidationError(f'{label} must contain only numbers.')


class ConfigBlockForm(forms.Form):
    """Form over a dictionary block that rejects keys it does not declare"""

    block_name = ''

    def __init__(self, data=None, *args, **kwargs):
        super().__init__(data or {}, *args, **kwargs)

    def clean(self):
        cleaned_data = super().clean()
        unknown = sorted(set(self.data) - set(self.fields))
        if unknown:
            raise ValidationError(f"Unknown key(s) in [{self.block_name}]: {', '.join(unknown)}")
        return cleaned_data

    def options(self):
        """Cleaned values with unset optional entries dropped"""
        return {k: v for k, v in self.cleaned_data.items() if v not in (None, '')}


class ModelBlockForm(ConfigBlockForm):
    """The [model] block: xi given as terms or as beta^2 * xi0"""

    block_name = 'model'

    terms = forms.JSONField(required=False)
    xi0_terms = forms.JSONField(required=False)
    beta = forms.FloatField(required=False, min_value=0.0)
    h = forms.FloatField(required=False, min_value=0.0)
    spherical = forms.BooleanField(required=False)
    generic = forms.BooleanField(required=False)

    def clean_terms(self):
        value = self.cleaned_data.get('terms')
        return _pairs(value, 'terms') if value is not None else None

    def clean_xi0_terms(self):
        value = self.cleaned_data.get('xi0_terms')
        return _pairs(value, 'xi0_terms') if value is not None else None

    def clean(self):
        cleaned_data = super().clean()
        terms = cleaned_data.get('terms')
        xi0_terms = cleaned_data.get('xi0_terms')
        beta = cleaned_data.get('beta')

        if terms is None and xi0_terms is None:
            raise ValidationError('The model needs either terms or beta with xi0_terms.')
        if xi0_terms is not None and beta is None:
            raise ValidationError('xi0_terms must come with beta.')
        if terms is not None and xi0_terms is not None:
            raise ValidationError('Give terms or beta with xi0_terms, not both.')
        return cleaned_data

    def to_spec(self, beta=None):
        """MixtureSpec of the block, optionally at another beta"""
        block = dict(self.cleaned_data)
        if beta is not None:
            block['beta'] = beta
        try:
            if beta == 0.0:
                return MixtureSpec(h=block.get('h') or 0.0, generic=bool(block.get('generic')))
            return MixtureSpec.from_config(block)
        except ValueError as exc:
            raise ValidationError(str(exc))


class RunBlockForm(ConfigBlockForm):
    """The [run] block; command-line flags take precedence"""

    block_name = 'run'

    seed = forms.IntegerField(required=False, min_value=0)
    threads = forms.IntegerField(required=False, min_value=1)
    out = forms.CharField(required=False)


class MeasureMixin(forms.Form):
    """Optional fixed measure given as atoms and masses"""

    atoms = forms.JSONField(required=False)
    masses = forms.JSONField(required=False)

    def clean_atoms(self):
        return _numbers(self.cleaned_data.get('atoms'), 'atoms')

    def clean_masses(self):
        return _numbers(self.cleaned_data.get('masses'), 'masses')

    def measure(self):
        atoms = self.cleaned_data.get('atoms')
        masses = self.cleaned_data.get('masses')
        if atoms is None and masses is None:
            return None
        if atoms is None or masses is None:
            raise ValidationError('atoms and masses must be given together.')
        try:
            return AtomicMeasure(atoms, masses)
        except ValueError as exc:
            raise ValidationError(str(exc))


class PhaseScanForm(ConfigBlockForm):
    block_name = 'phase_scan'

    betas = forms.JSONField(required=False)
    k = forms.IntegerField(required=False, min_value=1, initial=2)
    barrier = forms.BooleanField(required=False)
    bisect = forms.IntegerField(required=False, min_value=0)
    multi_starts = forms.IntegerField(required=False, min_value=1)
    grid_points = forms.IntegerField(required=False, min_value=16)
    offsets = forms.JSONField(required=False)

    def clean_betas(self):
        betas = _numbers(self.cleaned_data.get('betas'), 'betas', allow_empty=True) or []
        if any(b <= 0.0 for b in betas):
            raise ValidationError('Every beta of the scan must be positive.')
        if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
            raise ValidationError('The beta grid must be strictly ascending.')
        return betas

    def clean_offsets(self):
        return _numbers(self.cleaned_data.get('offsets'), 'offsets')


class ExactGapForm(ConfigBlockForm):
    block_name = 'exact_gap'

    n_spins = forms.IntegerField(min_value=1)
    betas = forms.JSONField()
    seeds = forms.IntegerField(required=False, min_value=1)
    epsilon = forms.FloatField(required=False)
    method = forms.ChoiceField(required=False, choices=[('walsh', 'Walsh'), ('tensor', 'Tensor')])

    def clean_betas(self):
        betas = _numbers(self.cleaned_data.get('betas'), 'betas')
        if any(b < 0.0 for b in betas):
            raise ValidationError('beta must be non-negative.')
        return betas

    def clean_epsilon(self):
        epsilon = self.cleaned_data.get('epsilon')
        if epsilon is not None and epsilon <= 0.0:
            raise ValidationError('epsilon must be positive.')
        return epsilon


class RateCurveForm(MeasureMixin, ConfigBlockForm):
    block_name = 'rate_curve'

    k = forms.IntegerField(required=False, min_value=1)
    q_grid = forms.JSONField(required=False)
    q_min = forms.FloatField(required=False, min_value=-1.0, max_value=1.0)
    q_max = forms.FloatField(required=False, min_value=-1.0, max_value=1.0)
    q_points = forms.IntegerField(required=False, min_value=2)
    grid_points = forms.IntegerField(required=False, min_value=16)
    lambda_method = forms.ChoiceField(required=False, choices=[('newton', 'Newton'), ('grid', 'Grid')])
    mcmc_n_spins = forms.IntegerField(required=False, min_value=2)
    mcmc_sweeps = forms.IntegerField(required=False, min_value=20)
    epsilon = forms.FloatField(required=False)

    def clean_q_grid(self):
        return _numbers(self.cleaned_data.get('q_grid'), 'q_grid')


class BarrierForm(MeasureMixin, ConfigBlockForm):
    block_name = 'barrier'

    k = forms.IntegerField(required=False, min_value=1)
    q_star = forms.FloatField(required=False, min_value=0.0, max_value=1.0)
    offsets = forms.JSONField(required=False)
    n_spins = forms.IntegerField(required=False, min_value=1)
    epsilon = forms.FloatField(required=False)
    grid_points = forms.IntegerField(required=False, min_value=16)

    def clean_offsets(self):
        return _numbers(self.cleaned_data.get('offsets'), 'offsets')


class McmcForm(ConfigBlockForm):
    block_name = 'mcmc'

    n_spins = forms.IntegerField(min_value=2)
    sweeps = forms.IntegerField(min_value=20)
    n_temps = forms.IntegerField(required=False, min_value=1)
    schedule = forms.JSONField(required=False)
    burn_in = forms.IntegerField(required=False, min_value=0)
    batches = forms.IntegerField(required=False, min_value=2)
    exact = forms.BooleanField(required=False)
    epsilon = forms.FloatField(required=False)
    q_points = forms.IntegerField(required=False, min_value=2)
    rate_overlay = forms.BooleanField(required=False)
    k = forms.IntegerField(required=False, min_value=1)

    def clean_schedule(self):
        return _numbers(self.cleaned_data.get('schedule'), 'schedule')


COMMAND_FORMS = {
    'phase_scan': PhaseScanForm,
    'exact_gap': ExactGapForm,
    'rate_curve': RateCurveForm,
    'barrier': BarrierForm,
    'mcmc': McmcForm,
}


@dataclass
class RunConfig:
    """Resolved configuration of one command invocation"""

    command: str
    model: ModelBlockForm
    spec: MixtureSpec
    options: dict
    seed: int = 0
    threads: int = 1
    out: str = None
    source: str = None
    measure: AtomicMeasure = None

    @property
    def spherical(self):
        return bool(self.model.cleaned_data.get('spherical'))

    def spec_at(self, beta):
        return self.model.to_spec(beta)

    def as_dict(self):
        return {
            'command': self.command,
            'model': {**self.spec.as_dict(), 'spherical': self.spherical},
            self.command: {k: v for k, v in self.options.items() if k not in ('atoms', 'masses')},
            'measure': self.measure.as_dict() if self.measure is not None else None,
            'seed': self.seed,
            'threads': self.threads,
            'out': self.out,
            'source': self.source,
            'version': getattr(settings, 'TOOLKIT_VERSION', ''),
        }


def read_document(path):
    """Parse a TOML or JSON configuration file"""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f'Configuration file {path} does not exist.')
    try:
        if path.suffix.lower() == '.json':
            document = json.loads(path.read_text())
        else:
            with open(path, 'rb') as handle:
                document = tomllib.load(handle)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f'Cannot parse {path}: {exc}')
    if not isinstance(document, dict):
        raise ValidationError(f'{path} must hold a table of blocks.')
    return document


def _errors(form):
    messages = []
    for name, errors in form.errors.items():
        prefix = f'[{form.block_name}]' if name == '__all__' else f'[{form.block_name}].{name}'
        messages.extend(f'{prefix}: {error}' for error in errors)
    return messages


def build_run_config(command, document, seed=None, threads=None, out=None, source=None):
    """Validate every block of a document and apply the flag overrides"""
    if command not in COMMAND_FORMS:
        raise ValidationError(f'Unknown command {command!r}.')
    unknown = sorted(set(document) - {'model', 'run', command})
    if unknown:
        raise ValidationError(f"Unknown block(s) for {command}: {', '.join(unknown)}")

    model = ModelBlockForm(document.get('model'))
    run = RunBlockForm(document.get('run'))
    block = COMMAND_FORMS[command](document.get(command))
    messages = []
    for form in (model, run, block):
        if not form.is_valid():
            messages.extend(_errors(form))
    if messages:
        raise ValidationError(messages)

    run_options = run.options()
    return RunConfig(
        command=command,
        model=model,
        spec=model.to_spec(),
        options=block.options(),
        seed=seed if seed is not None else run_options.get('seed', 0),
        threads=threads if threads is not None else run_options.get('threads', 1),
        out=out if out is not None else run_options.get('out'),
        source=str(source) if source else None,
        measure=block.measure() if isinstance(block, MeasureMixin) else None,
    )
