"""
Delimited text, JSON certificates and run manifests
"""

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.serializers.json import DjangoJSONEncoder
from django.utils import timezone

logger = logging.getLogger(__name__)


class NumericJSONEncoder(DjangoJSONEncoder):
    """DjangoJSONEncoder that also understands numpy scalars and arrays"""

    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return super().default(o)


def format_cell(value):
    """Fixed textual form so identical runs give byte-identical files"""
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return repr(value)
    return str(value)


def write_csv(path, rows, columns):
    """Comma-delimited table with a header row in the given column order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(column)) for column in columns])
    logger.debug("Wrote %d rows to %s", len(rows), path)
    return path


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, cls=NumericJSONEncoder, indent=2, sort_keys=True) + '\n')
    return path


def write_manifest(out_dir, config, files, status='success', extra=None):
    """manifest.json echoing the resolved configuration and the produced files"""
    out_dir = Path(out_dir)
    manifest = {
        'config': config.as_dict(),
        'status': status,
        'version': getattr(settings, 'TOOLKIT_VERSION', ''),
        'written_at': timezone.now(),
        'files': sorted(Path(f).name for f in files),
    }
    if extra:
        manifest.update(extra)
    return write_json(out_dir / 'manifest.json', manifest)
