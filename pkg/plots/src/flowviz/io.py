"""Schema-locked loaders for the experiment artifacts.

Each loader validates structure up front and raises SchemaError with the
offending detail; scripts never guess at malformed inputs.
"""

from __future__ import annotations

import csv
import json
import re

import numpy as np

SAMPLES_TAIL_COLUMNS = ("log_q", "log_p_unnorm")
EVIDENCE_KEYS = {"T", "log_Z_hat", "std_err_log", "n", "ess", "max_weight_fraction"}
GRID_HEADER = ["T", "grid_x", "grid_y", "mapped_x", "mapped_y"]
MODES_KEYS = {
    "fractions",
    "captured",
    "modes_captured",
    "n_samples",
    "quantile",
    "threshold",
    "radius",
    "dim",
    "sigma",
    "distances",
}


class SchemaError(ValueError):
    pass


def load_samples(path):
    """samples.csv -> dict(theta (n,d), log_q (n,), log_p_unnorm (n,))."""
    with open(path) as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
    expected_theta = [f"theta_{j + 1}" for j in range(len(header) - 2)]
    if len(header) < 3 or header != expected_theta + list(SAMPLES_TAIL_COLUMNS):
        raise SchemaError(
            f"{path}: bad samples header {header!r}; expected theta_1..theta_d,log_q,log_p_unnorm"
        )
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as err:
        raise SchemaError(f"{path}: non-numeric sample rows ({err})") from err
    if data.size == 0:
        raise SchemaError(f"{path}: no sample rows")
    if data.shape[1] != len(header):
        raise SchemaError(f"{path}: row width {data.shape[1]} != header width {len(header)}")
    return {
        "theta": data[:, :-2],
        "log_q": data[:, -2],
        "log_p_unnorm": data[:, -1],
    }


def load_evidence(path):
    """evidence.json -> list of estimate dicts sorted by T."""
    with open(path) as f:
        payload = json.load(f)
    if not isinstance(payload, list):
        raise SchemaError(f"{path}: evidence payload must be a JSON array")
    if not payload:
        raise SchemaError(f"{path}: empty evidence array")
    for i, entry in enumerate(payload):
        missing = EVIDENCE_KEYS - set(entry)
        if missing:
            raise SchemaError(f"{path}: entry {i} missing keys {sorted(missing)}")
    return sorted(payload, key=lambda e: e["T"])


def load_grid(path):
    """grid.csv -> (lattice shape (nx, ny), dict T -> mapped (nx*ny, 2) plus grid)."""
    with open(path) as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != GRID_HEADER:
            raise SchemaError(f"{path}: bad grid header {header!r}; expected {GRID_HEADER}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as err:
        raise SchemaError(f"{path}: non-numeric grid rows ({err})") from err
    if data.size == 0 or data.shape[1] != 5:
        raise SchemaError(f"{path}: expected 5 numeric columns")
    temps = np.unique(data[:, 0])
    xs = np.unique(data[:, 1])
    ys = np.unique(data[:, 2])
    per_T = {}
    grid = None
    for T in temps:
        rows = data[data[:, 0] == T]
        if rows.shape[0] != xs.size * ys.size:
            raise SchemaError(f"{path}: ragged lattice for T={T:g}")
        if grid is None:
            grid = rows[:, 1:3]
        elif not np.array_equal(grid, rows[:, 1:3]):
            raise SchemaError(f"{path}: grid points differ across temperatures")
        per_T[float(T)] = rows[:, 3:5]
    return (xs.size, ys.size), grid, per_T


def load_modes(path):
    with open(path) as f:
        payload = json.load(f)
    missing = MODES_KEYS - set(payload)
    if missing:
        raise SchemaError(f"{path}: modes payload missing keys {sorted(missing)}")
    k = len(payload["fractions"])
    if len(payload["distances"]) != k or len(payload["captured"]) != k:
        raise SchemaError(f"{path}: per-mode arrays disagree on mode count")
    return payload


def infer_dim_from_samples(header_path) -> int:
    with open(header_path) as f:
        header = f.readline().strip().split(",")
    return sum(1 for h in header if re.fullmatch(r"theta_\d+", h))
