"""Byte-stable file output and dataset CSV handling.

All writers here produce identical bytes for identical inputs: floats are
printed with 17 significant digits (enough to round-trip any f64), JSON
keys are sorted, newlines are always "\\n", and files land via a
temp-file rename so a crash never leaves a half-written output.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_csv(header: list[str], rows: list[list[str]]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    return "\n".join(lines) + "\n"


def write_dataset_csv(path, x: np.ndarray, y: np.ndarray) -> None:
    """Write inputs and targets as x_0..x_{d-1},y_0..y_{o-1} columns."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    header = [f"x_{j}" for j in range(x.shape[1])] + [f"y_{j}" for j in range(y.shape[1])]
    rows = [
        [fmt_float(v) for v in x[i]] + [fmt_float(v) for v in y[i]]
        for i in range(x.shape[0])
    ]
    atomic_write_text(path, render_csv(header, rows))


def read_inputs_csv(path) -> np.ndarray:
    """Read an inputs-only CSV (header x_0..x_{d-1}); zero data rows is legal."""
    with open(path, newline="") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty inputs file, expected at least a header")
    header = lines[0].split(",")
    if header != [f"x_{j}" for j in range(len(header))]:
        raise ConfigError(
            f"{path}: inputs header must be x_0..x_{{d-1}}, got {','.join(header)}"
        )
    d = len(header)
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != d:
            raise ConfigError(f"{path}:{lineno}: expected {d} columns, got {len(cells)}")
        try:
            values.append([float(c) for c in cells])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    if not values:
        return np.zeros((0, d), dtype=np.float64)
    return np.array(values, dtype=np.float64)


def write_classification_csv(path, x: np.ndarray, labels: np.ndarray) -> None:
    """Write inputs with integer labels as x_0..x_{d-1},label columns."""
    x = np.asarray(x, dtype=np.float64)
    header = [f"x_{j}" for j in range(x.shape[1])] + ["label"]
    rows = [
        [fmt_float(v) for v in x[i]] + [str(int(labels[i]))] for i in range(x.shape[0])
    ]
    atomic_write_text(path, render_csv(header, rows))


def read_classification_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a classification CSV back into (inputs, integer labels)."""
    with open(path, newline="") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty classification file")
    header = lines[0].split(",")
    d = len(header) - 1
    if d < 1 or header != [f"x_{j}" for j in range(d)] + ["label"]:
        raise ConfigError(
            f"{path}: classification header must be x_0..x_{{d-1}},label, got {','.join(header)}"
        )
    xs, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != d + 1:
            raise ConfigError(f"{path}:{lineno}: expected {d + 1} columns, got {len(cells)}")
        try:
            xs.append([float(c) for c in cells[:d]])
            labels.append(int(cells[d]))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    if not xs:
        raise ConfigError(f"{path}: classification file has a header but no rows")
    return np.array(xs, dtype=np.float64), np.array(labels, dtype=np.int64)


def read_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset CSV back into (inputs, targets) arrays."""
    with open(path, newline="") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty dataset file")
    header = lines[0].split(",")
    d = sum(1 for name in header if name.startswith("x_"))
    o = sum(1 for name in header if name.startswith("y_"))
    expected = [f"x_{j}" for j in range(d)] + [f"y_{j}" for j in range(o)]
    if d == 0 or o == 0 or header != expected:
        raise ConfigError(
            f"{path}: dataset header must be x_0..x_{{d-1}},y_0..y_{{o-1}}, got {','.join(header)}"
        )
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != d + o:
            raise ConfigError(f"{path}:{lineno}: expected {d + o} columns, got {len(cells)}")
        try:
            values.append([float(c) for c in cells])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    data = np.array(values, dtype=np.float64)
    if data.size == 0:
        raise ConfigError(f"{path}: dataset has a header but no rows")
    return data[:, :d], data[:, d:]
