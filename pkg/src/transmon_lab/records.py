"""Tabular result records: observable traces, CSV round-trip, run manifests.

Every experiment emits flat files: CSV tables with one header row and
scientific-notation values at full double precision, plus a ``manifest.json``
capturing the resolved configuration.  The writers here are the single code
path for that format, so byte-stable output reduces to deterministic numbers
upstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParameterError, SchemaError

__all__ = [
    "TimeSeriesRecord",
    "format_value",
    "write_table",
    "read_table",
    "write_manifest",
    "read_manifest",
]

# 17 significant digits: round-trips any IEEE double exactly.
_FLOAT_FORMAT = "{:.16e}"


def format_value(x: float) -> str:
    """Render one table cell; rejects non-finite values."""
    x = float(x)
    if not math.isfinite(x):
        raise InvalidParameterError(f"table values must be finite, got {x!r}")
    return _FLOAT_FORMAT.format(x)


def _clean_name(name: str) -> str:
    if not name or any(c in name for c in ",\n\r\""):
        raise InvalidParameterError(f"invalid column name {name!r}")
    return name


@dataclass(frozen=True)
class TimeSeriesRecord:
    """Observable traces on a shared time grid, with averaging metadata.

    ``times`` holds rescaled times (drive period = 2*pi), strictly
    increasing; ``values`` has one row per time and one column per named
    observable.  ``meta`` records how the trace was produced (model
    parameters, ensemble and offset-charge averaging counts, seeds) as
    JSON-compatible scalars.
    """

    times: np.ndarray
    columns: tuple
    values: np.ndarray
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if times.ndim != 1 or times.size == 0:
            raise InvalidParameterError("times must be a nonempty 1-D array")
        if np.any(~np.isfinite(times)) or np.any(np.diff(times) <= 0):
            raise InvalidParameterError("times must be finite and strictly increasing")
        cols = tuple(_clean_name(str(c)) for c in self.columns)
        if len(set(cols)) != len(cols):
            raise InvalidParameterError(f"duplicate column names in {cols}")
        if values.shape != (times.size, len(cols)):
            raise InvalidParameterError(
                f"values shape {values.shape} does not match "
                f"({times.size}, {len(cols)})"
            )
        if np.any(~np.isfinite(values)):
            raise InvalidParameterError("values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_samples(self) -> int:
        return self.times.size

    def column(self, name: str) -> np.ndarray:
        """Values of one named observable."""
        try:
            j = self.columns.index(name)
        except ValueError:
            raise SchemaError(
                f"no column {name!r}; record has {self.columns}"
            ) from None
        return self.values[:, j]

    def strobes(self, period: float, tol: float = 1e-9) -> "TimeSeriesRecord":
        """Sub-record at integer multiples of ``period`` (stroboscopic times)."""
        if period <= 0 or not math.isfinite(period):
            raise InvalidParameterError(f"period must be positive, got {period}")
        ratio = self.times / period
        keep = np.abs(ratio - np.round(ratio)) <= tol
        if not np.any(keep):
            raise SchemaError("record holds no stroboscopic samples")
        return TimeSeriesRecord(
            times=self.times[keep],
            columns=self.columns,
            values=self.values[keep],
            meta=self.meta,
        )

    def write_csv(self, path) -> Path:
        """Emit as CSV with a leading time column named ``t``."""
        return write_table(path, ("t",) + self.columns,
                           [self.times] + [self.values[:, j]
                                           for j in range(len(self.columns))])

    @classmethod
    def read_csv(cls, path, meta: Mapping | None = None) -> "TimeSeriesRecord":
        """Parse a CSV written by :meth:`write_csv`."""
        names, cols = read_table(path)
        if names[0] != "t":
            raise SchemaError(f"{path}: first column must be 't', got {names[0]!r}")
        values = np.column_stack(cols[1:]) if len(cols) > 1 else np.empty((cols[0].size, 0))
        return cls(times=cols[0], columns=tuple(names[1:]), values=values,
                   meta=dict(meta or {}))


def write_table(path, names: Sequence[str], columns: Sequence[np.ndarray]) -> Path:
    """Write named columns as CSV; all columns must share one length."""
    names = [_clean_name(str(n)) for n in names]
    if len(set(names)) != len(names):
        raise InvalidParameterError(f"duplicate column names in {names}")
    if len(names) != len(columns) or not names:
        raise InvalidParameterError(
            f"{len(names)} names for {len(columns)} columns"
        )
    arrays = [np.ascontiguousarray(c, dtype=np.float64) for c in columns]
    length = arrays[0].size
    for n, a in zip(names, arrays):
        if a.ndim != 1 or a.size != length:
            raise InvalidParameterError(
                f"column {n!r} has shape {a.shape}, expected ({length},)"
            )
    path = Path(path)
    lines = [",".join(names)]
    for i in range(length):
        lines.append(",".join(format_value(a[i]) for a in arrays))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_table(path) -> tuple:
    """Read a CSV written by :func:`write_table` -> (names, column arrays)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read table {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise SchemaError(f"{path}: empty table")
    names = lines[0].split(",")
    if any(not n for n in names):
        raise SchemaError(f"{path}: blank column name in header {lines[0]!r}")
    rows = []
    for k, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(names):
            raise SchemaError(
                f"{path}:{k}: row has {len(parts)} cells, header has {len(names)}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise SchemaError(f"{path}:{k}: non-numeric cell ({exc})") from None
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names))
    return names, [data[:, j] for j in range(len(names))]


def write_manifest(directory, payload: Mapping) -> Path:
    """Write ``manifest.json`` with sorted keys and a trailing newline."""
    directory = Path(directory)
    path = directory / "manifest.json"
    text = json.dumps(dict(payload), indent=2, sort_keys=True,
                      ensure_ascii=False, default=_json_fallback)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read manifest {path}: {exc}") from exc


def _json_fallback(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__} in manifest")
