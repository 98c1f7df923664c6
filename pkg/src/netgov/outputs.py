"""CSV and JSON writers. CSV floats carry 6 significant digits; every file
starts with the scenario hash, seed list and tool version."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from . import __version__


def fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    return str(value)


def meta(scenario_hash, seeds):
    return {"scenario_hash": scenario_hash, "seeds": list(seeds), "version": __version__}


def csv_text(header, rows, info):
    lines = [f"# scenario_hash={info['scenario_hash']} seeds={json.dumps(info['seeds'], separators=(',', ':'))}"
             f" version={info['version']}", ",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            s = fmt(v)
            if "," in s or '"' in s:
                s = '"' + s.replace('"', '""') + '"'
            cells.append(s)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows, info):
    Path(path).write_text(csv_text(header, rows, info))


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, obj, info):
    doc = {"meta": info, **_clean(obj)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_csv(path):
    """Rows of a CSV written by ``write_csv`` as dicts of strings (comment line skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
