"""Locale-independent CSV and JSON helpers."""
from __future__ import annotations

import csv
import json
from pathlib import Path


def fmt(x) -> str:
    """Format a float with 17 significant digits (round-trips binary64)."""
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> Path:
    """Write rows to `path`; floats are formatted with :func:`fmt`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    return path


def write_json(path, record) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
    return path


def _default(obj):
    import numpy as np
    from fractions import Fraction

    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    return str(obj)
