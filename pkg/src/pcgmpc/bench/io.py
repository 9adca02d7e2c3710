"""Result emission: one JSON metadata file plus one CSV per metric series."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _cell(v):
    # repr of a Python float round-trips exactly
    if isinstance(v, (list, tuple, np.ndarray)):
        return json.dumps(_plain(v))
    if isinstance(v, np.generic):
        v = v.item()
    return repr(v) if isinstance(v, float) else v


def write_series(path, records):
    """Write a list of flat dict records as CSV.  Columns are the union of keys in first-seen order."""
    cols = []
    for r in records:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in records:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _parse(s):
    if s == "":
        return None
    if s[0] == "[":
        return json.loads(s)
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return {"True": True, "False": False}.get(s, s)


def read_series(path):
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]


def emit(out_dir, name, meta, series):
    """Write ``<name>.json`` (metadata, with the series file names) and ``<name>_<key>.csv`` per series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, records in series.items():
        fname = f"{name}_{key}.csv"
        write_series(out / fname, records)
        files[key] = fname
    doc = {"name": name, "meta": _plain(meta), "series": files}
    path = out / f"{name}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load(path):
    """Inverse of ``emit``: returns ``(meta, {key: records})``."""
    path = Path(path)
    doc = json.loads(path.read_text())
    return doc["meta"], {k: read_series(path.parent / f) for k, f in doc["series"].items()}
