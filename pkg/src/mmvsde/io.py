"""CSV/JSON writers with fixed formatting, and point-cloud readers."""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return "%.17g" % float(v)


def write_csv(path, header, rows):
    """Write rows with 17 significant digits; ``rows`` is an iterable of sequences or a 2-D array."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def sanitize(obj):
    """Make ``obj`` strict-JSON safe: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(sanitize(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def read_points(path):
    """Read a point cloud CSV: optional header row; a column named ``weight`` is taken as weights.

    Returns ``(points (N, d), weights or None)``.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise InvalidInputError(f"{path}: no rows")
    header = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidInputError(f"{path}: expected at least one row of coordinates")
    weights = None
    if header is not None and "weight" in header:
        j = header.index("weight")
        weights = data[:, j]
        data = np.delete(data, j, axis=1)
    return data, weights
