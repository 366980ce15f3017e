"""Fixed-precision CSV writers shared by the exporters."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

PRECISION = 12
_AXIS_NAMES = ("x", "y")


def fmt(value) -> str:
    """Format one scalar at 12 significant digits (integers and booleans verbatim)."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if np.isnan(value):
        return "nan"
    if value == 0.0:
        return "0"
    return f"{value:.{PRECISION}g}"


def write_table_csv(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> Path:
    path = Path(path)
    cols = [np.asarray(c).ravel() for c in columns]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_grid_csv(path, grid, columns: Mapping[str, np.ndarray], axis_names=_AXIS_NAMES) -> Path:
    """One row per grid point (row-major), coordinates first then the named columns."""
    coords = [c.ravel() for c in grid.mesh()]
    header = list(axis_names[: grid.dims]) + list(columns)
    return write_table_csv(path, header, coords + [np.asarray(v).ravel() for v in columns.values()])


def read_table_csv(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    if len(lines) == 1:
        return {h: np.array([]) for h in header}
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return {h: data[:, i] for i, h in enumerate(header)}


def _rounded(obj):
    if isinstance(obj, dict):
        return {str(k): _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _rounded(obj.tolist())
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return bool(obj) if isinstance(obj, np.bool_) else obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    value = float(obj)
    if not np.isfinite(value):
        return str(value)
    return float(f"{value:.{PRECISION}g}")


def write_json(path, obj) -> Path:
    """Sorted-key JSON with floats rounded to 12 significant digits (non-finite values as strings)."""
    path = Path(path)
    path.write_text(json.dumps(_rounded(obj), indent=2, sort_keys=True) + "\n")
    return path
