"""Data ingestion, rescaling transforms and result serialisation."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
CURVE_HEADER = ("x", "estimate", "band_lo", "band_hi")
_REPLICATE = re.compile(r"^w(\d+)$")


class DataError(ValueError):
    """Malformed or out-of-range input data."""


@dataclass(frozen=True)
class IngestTransform:
    """Affine map ``(w - lo) / (hi - lo)`` from the recorded scale onto [0, 1]."""

    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise ValueError(f"transform needs finite lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def forward(self, w):
        return (np.asarray(w, dtype=float) - self.lo) / self.width

    def inverse(self, x):
        return self.lo + self.width * np.asarray(x, dtype=float)

    def density_back(self, x_grid, f_values):
        """Grid and density values on the recorded scale (change of variables)."""
        return self.inverse(x_grid), np.asarray(f_values, dtype=float) / self.width

    def regression_back(self, x_grid, m_values):
        return self.inverse(x_grid), np.asarray(m_values, dtype=float)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class IngestedData:
    w: np.ndarray  # on [0, 1]
    y: np.ndarray | None
    w0: np.ndarray | None
    replicates: int  # number of averaged w columns
    transform: IngestTransform
    bias: float | None  # mean(w0) - mean(w), scaled units
    mean_error_var: float | None  # var(w0 - w) / (replicates + 1), scaled units

    def summary(self) -> dict:
        return {
            "n": int(self.w.size),
            "replicate_columns": self.replicates,
            "has_y": self.y is not None,
            "has_w0": self.w0 is not None,
            "w_min": float(self.w.min()),
            "w_max": float(self.w.max()),
            "w_mean": float(self.w.mean()),
            "w_var": float(self.w.var(ddof=1)) if self.w.size > 1 else None,
            "bias": self.bias,
            "mean_error_var": self.mean_error_var,
            "transform": self.transform.to_dict(),
        }


def calibrate_bias(w_series, w0_series) -> float:
    """Additive offset of the reference instrument: ``mean(w0) - mean(w)``."""
    w = np.asarray(w_series, dtype=float).ravel()
    w0 = np.asarray(w0_series, dtype=float).ravel()
    if w.size != w0.size:
        raise ValueError(f"series lengths differ: {w.size} vs {w0.size}")
    if w.size < 2:
        raise ValueError("need at least two paired observations")
    return float(np.mean(w0) - np.mean(w))


def averaged_error_variance(w_mean, w0, replicates: int) -> float:
    """Variance of the averaged error when ``replicates`` columns and the reference share one error law."""
    diff = np.asarray(w0, dtype=float) - np.asarray(w_mean, dtype=float)
    return float(np.var(diff, ddof=1) / (replicates + 1))


def _column(rows: list[dict], name: str, path: Path) -> np.ndarray:
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        cell = (row.get(name) or "").strip()
        try:
            out[i] = float(cell)
        except ValueError:
            raise DataError(f"{path}: row {i + 2}, column {name!r}: non-numeric value {cell!r}") from None
        if not math.isfinite(out[i]):
            raise DataError(f"{path}: row {i + 2}, column {name!r}: non-finite value {cell!r}")
    return out


def ingest(path, transform: IngestTransform | None = None) -> IngestedData:
    """Read a CSV with a ``w`` column or replicate columns ``w1..wK``; ``y`` and ``w0`` are optional."""
    path = Path(path)
    transform = transform or IngestTransform()
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            fields = [f.strip() for f in (reader.fieldnames or [])]
            reader.fieldnames = fields
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not fields:
        raise DataError(f"{path}: missing header row")
    if not rows:
        raise DataError(f"{path}: no data rows")
    reps = sorted((f for f in fields if _REPLICATE.match(f) and f != "w0"), key=lambda f: int(f[1:]))
    if "w" in fields:
        w_raw = _column(rows, "w", path)
        k = 1
    elif reps:
        w_raw = np.mean([_column(rows, f, path) for f in reps], axis=0)
        k = len(reps)
    else:
        raise DataError(f"{path}: need a 'w' column or replicate columns w1..wK (found {fields})")
    y = _column(rows, "y", path) if "y" in fields else None
    w0_raw = _column(rows, "w0", path) if "w0" in fields else None

    w = transform.forward(w_raw)
    bad = np.flatnonzero((w < 0.0) | (w > 1.0))
    if bad.size:
        listed = ", ".join(str(i + 2) for i in bad[:10])
        raise DataError(
            f"{path}: {bad.size} value(s) outside [{transform.lo}, {transform.hi}] after averaging (rows {listed})"
        )
    w0 = transform.forward(w0_raw) if w0_raw is not None else None
    bias = var_u = None
    if w0 is not None and w.size >= 2:
        bias = calibrate_bias(w, w0)
        var_u = averaged_error_variance(w, w0, k)
    return IngestedData(w, y, w0, k, transform, bias, var_u)


def _fmt(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else format(v, ".17g")


def write_curve_csv(path, x, estimate, band_lo=None, band_hi=None) -> None:
    """Grid curve with optional pointwise band; missing values are empty cells."""
    x = np.asarray(x, dtype=float)
    nan = np.full(x.shape, np.nan)
    cols = [x, np.asarray(estimate, dtype=float)]
    cols += [nan if band_lo is None else np.asarray(band_lo, dtype=float)]
    cols += [nan if band_hi is None else np.asarray(band_hi, dtype=float)]
    write_table_csv(path, CURVE_HEADER, zip(*cols))


def write_table_csv(path, header, rows) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for row in rows:
                out.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_curve_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = list(zip(*rows)) if rows else [()] * len(header)
    return {h: np.array([float(v) if v else np.nan for v in c]) for h, c in zip(header, cols)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def emit_json(results: dict, path) -> None:
    """Write results with a schema version; floats use shortest round-trip repr, non-finite become null."""
    doc = {"schema_version": SCHEMA_VERSION, **_jsonable(results)}
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit(results: dict, path, fmt: str | None = None) -> None:
    """Dispatch on ``fmt`` (or the file extension): JSON document or grid-curve CSV."""
    fmt = fmt or ("csv" if str(path).lower().endswith(".csv") else "json")
    if fmt == "json":
        emit_json(results, path)
    elif fmt == "csv":
        write_curve_csv(path, results["x"], results["estimate"], results.get("band_lo"), results.get("band_hi"))
    else:
        raise ValueError(f"unknown output format {fmt!r}")
