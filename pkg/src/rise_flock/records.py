"""Trajectory CSV and JSON report files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from rise_flock.errors import ValidationError

AXES = "xyz"


def _axis(k):
    return AXES[k] if k < len(AXES) else str(k + 1)


def trajectory_columns(N, n, m):
    cols = ["t"]
    cols += [f"q0_{_axis(k)}" for k in range(n)]
    cols += [f"q0dot_{_axis(k)}" for k in range(n)]
    cols += [f"q{i + 1}_{_axis(k)}" for i in range(N) for k in range(n)]
    cols += [f"u{i + 1}_{k + 1}" for i in range(N) for k in range(m)]
    cols += [f"e{i + 1}_{_axis(k)}" for i in range(N) for k in range(n)]
    return cols + ["P", "V"]


def write_trajectory_csv(path, log, P=None, V=None):
    """One row per logged sample; floats use ``repr`` so they round-trip exactly."""
    T, N, n = log.q.shape
    m = log.u.shape[-1]
    P = np.full(T, np.nan) if P is None else np.asarray(P, float)
    V = np.full(T, np.nan) if V is None else np.asarray(V, float)
    data = np.hstack([
        log.t[:, None], log.q0, log.q0dot, log.q.reshape(T, -1), log.u.reshape(T, -1),
        (log.q0[:, None, :] - log.q).reshape(T, -1), P[:, None], V[:, None],
    ])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_columns(N, n, m))
        for row in data:
            w.writerow([repr(float(x)) for x in row])


def read_trajectory_csv(path):
    """Load a trajectory CSV into a dict of arrays keyed by column name, plus sizes.

    Raises :class:`ValidationError` on a malformed file or one without samples.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ValidationError(f"trajectory file {str(path)!r} does not exist") from None
    if not rows:
        raise ValidationError(f"{path}: empty file, expected a header row")
    header = rows[0]
    N = sum(1 for c in header if c.startswith("q") and c.endswith("_x") and c[1:-2].isdigit() and c != "q0_x")
    n = sum(1 for c in header if c.startswith("q0_"))
    m = sum(1 for c in header if c.startswith("u1_"))
    if header[:1] != ["t"] or N == 0 or n == 0 or header != trajectory_columns(N, n, m):
        raise ValidationError(f"{path}: header does not match the trajectory schema")
    body = rows[1:]
    if not body:
        raise ValidationError(f"{path}: no samples")
    try:
        data = np.array([[float(x) for x in r] for r in body])
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric field ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValidationError(f"{path}: ragged rows")
    T = len(data)
    col = {name: j for j, name in enumerate(header)}

    def block(prefix, count, width, axis_names):
        idx = [col[f"{prefix}{i + 1}_{axis_names(k)}"] for i in range(count) for k in range(width)]
        return data[:, idx].reshape(T, count, width)

    return {
        "t": data[:, 0],
        "q0": data[:, [col[f"q0_{_axis(k)}"] for k in range(n)]],
        "q": block("q", N, n, _axis),
        "u": block("u", N, m, lambda k: str(k + 1)),
        "e": block("e", N, n, _axis),
        "P": data[:, col["P"]],
        "V": data[:, col["V"]],
        "N": N,
        "n": n,
        "m": m,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
