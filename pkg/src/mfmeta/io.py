"""Versioned JSON and CSV outputs.

JSON files are objects whose first key is ``schema_version``.  CSV files
start with a ``# schema_version: <n>`` comment line followed by a header
row.  The readers reject files written under a different schema.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION

__all__ = ["to_jsonable", "write_json", "read_json", "write_csv", "read_csv"]


def to_jsonable(obj):
    """Recursively convert numpy containers and scalars to plain Python."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, obj):
    body = {"schema_version": SCHEMA_VERSION}
    body.update(to_jsonable(obj))
    Path(path).write_text(json.dumps(body, indent=2))
    return path


def read_json(path):
    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {d.get('schema_version')}")
    return d


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def read_csv(path):
    """Return ``(header, rows)``; numeric cells are converted to float."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema_version: {SCHEMA_VERSION}":
            raise ValueError(f"{path}: missing or unsupported schema header")
        rd = csv.reader(fh)
        header = next(rd)
        rows = []
        for r in rd:
            out = []
            for v in r:
                try:
                    out.append(float(v))
                except ValueError:
                    out.append(v)
            rows.append(out)
    return header, rows
