"""Trace ingestion and the smoothing / normalization / differencing pipeline.

Traces are 10 Hz BSM-like samples in a road-aligned frame (longitudinal
along the lane, lateral across lanes, meters). Every series passes through
``smooth -> normalize -> difference`` before it reaches a network, and each
stage tags its output so a stage cannot be applied out of order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Union

import numpy as np

SAMPLE_INTERVAL = 0.1
GAP_THRESHOLD = 0.3
CLAMP_LIMIT = 1.05

# CSV header -> TraceRecord attribute
CSV_COLUMNS: Dict[str, str] = {
    "t": "timestamp",
    "x": "longitudinal_pos",
    "y": "lateral_pos",
    "elev": "elevation",
    "speed": "speed",
    "heading": "heading",
    "swa": "steering_wheel_angle",
    "yaw_rate": "yaw_rate",
    "ax": "accel_long",
    "ay": "accel_lat",
    "az": "accel_vert",
    "len": "vehicle_length",
    "width": "vehicle_width",
}

# Dead-band thresholds per channel (degrees for swa, rad, m/s, m/s^2, rad/s).
SMOOTHING_THRESHOLDS: Dict[str, float] = {
    "swa": 3.0,
    "heading": 0.1,
    "speed": 0.1,
    "ax": 0.1,
    "yaw_rate": 0.1,
}


class SchemaError(ValueError):
    """A required CSV column is missing."""


class TraceFormatError(ValueError):
    """Trace rows are malformed or out of order."""


class StageError(ValueError):
    """A pipeline stage was applied to a series with the wrong tag."""


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    longitudinal_pos: float
    lateral_pos: float
    elevation: float
    speed: float
    heading: float
    steering_wheel_angle: float
    yaw_rate: float
    accel_long: float
    accel_lat: float
    accel_vert: float
    vehicle_length: float
    vehicle_width: float

    def __post_init__(self):
        if self.speed < 0:
            raise TraceFormatError(f"negative speed {self.speed} at t={self.timestamp}")
        if self.vehicle_length <= 0 or self.vehicle_width <= 0:
            raise TraceFormatError(f"non-positive vehicle size at t={self.timestamp}")


def load_trace(
    source: Union[TextIO, bytes, str],
    schema: Optional[Mapping[str, str]] = None,
) -> List[List[TraceRecord]]:
    """Read a CSV trace and split it into contiguous segments.

    Parameters
    ----------
    source : file object, bytes or str
        CSV text with a header row.
    schema : mapping, optional
        CSV column -> TraceRecord field. Defaults to ``CSV_COLUMNS``.

    Returns
    -------
    list of list of TraceRecord
        One list per segment; a gap larger than ``GAP_THRESHOLD`` seconds
        starts a new segment.
    """
    schema = dict(CSV_COLUMNS if schema is None else schema)
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = sorted(col for col in schema if col not in header)
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    wanted = {f.name for f in fields(TraceRecord)}
    if set(schema.values()) != wanted:
        raise SchemaError(f"schema must map onto exactly {sorted(wanted)}")

    records = []
    for lineno, row in enumerate(reader, start=2):
        row = {k.strip(): v for k, v in row.items() if k is not None}
        try:
            kwargs = {schema[col]: float(row[col]) for col in schema}
        except (TypeError, ValueError) as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from None
        records.append(TraceRecord(**kwargs))
    return split_segments(records)


def split_segments(records: Sequence[TraceRecord], gap: float = GAP_THRESHOLD) -> List[List[TraceRecord]]:
    segments: List[List[TraceRecord]] = []
    current: List[TraceRecord] = []
    for rec in records:
        if current:
            dt = rec.timestamp - current[-1].timestamp
            if dt <= 0:
                raise TraceFormatError(
                    f"non-increasing timestamp {rec.timestamp} after {current[-1].timestamp}"
                )
            if dt > gap + 1e-9:
                segments.append(current)
                current = []
        current.append(rec)
    if current:
        segments.append(current)
    return segments


def write_trace(records: Iterable[TraceRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(list(CSV_COLUMNS))
    for rec in records:
        writer.writerow([repr(float(getattr(rec, attr))) for attr in CSV_COLUMNS.values()])


def trace_arrays(records: Sequence[TraceRecord]) -> Dict[str, np.ndarray]:
    """Column arrays keyed by CSV header name."""
    return {
        col: np.array([getattr(r, attr) for r in records], dtype=float)
        for col, attr in CSV_COLUMNS.items()
    }


class Stage(str, Enum):
    RAW = "raw"
    SMOOTHED = "smoothed"
    NORMALIZED = "normalized"
    INTEGRATED = "integrated"


@dataclass(frozen=True)
class SignalSeries:
    name: str
    values: np.ndarray
    stage: Stage = Stage.RAW
    scale_min: Optional[float] = None
    scale_max: Optional[float] = None
    first_actual: Optional[float] = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "stage", Stage(self.stage))

    def __len__(self):
        return len(self.values)


def _require(series: SignalSeries, stage: Stage, op: str) -> None:
    if series.stage is not stage:
        raise StageError(f"{op} expects a {stage.value} series, got {series.stage.value} ({series.name})")


def deadband(values: np.ndarray, threshold: float) -> np.ndarray:
    out = np.array(values, dtype=float)
    if out.size < 2 or threshold <= 0:
        return out
    held = out[0]
    tol = 1e-12 * max(1.0, abs(threshold))
    for k in range(1, out.size):
        if abs(out[k] - held) >= threshold - tol:
            held = out[k]
        else:
            out[k] = held
    return out


def smooth(series: SignalSeries, threshold: Optional[float] = None) -> SignalSeries:
    """Dead-band hold: keep the last emitted value until the input moves
    at least ``threshold`` away from it.

    ``threshold`` defaults to the channel's entry in ``SMOOTHING_THRESHOLDS``
    (zero, i.e. pass-through, for channels without one).
    """
    _require(series, Stage.RAW, "smooth")
    if threshold is None:
        threshold = SMOOTHING_THRESHOLDS.get(series.name, 0.0)
    return replace(series, values=deadband(series.values, threshold), stage=Stage.SMOOTHED)


def normalize(
    series: SignalSeries,
    bounds: Optional[tuple] = None,
    clamp: float = CLAMP_LIMIT,
) -> SignalSeries:
    """Affine map of ``bounds`` (default: the series' own min/max) onto [-1, 1].

    With frozen ``bounds`` from a training corpus, out-of-range samples are
    clamped to ``[-clamp, clamp]``. A degenerate range maps to zeros.
    """
    _require(series, Stage.SMOOTHED, "normalize")
    vals = series.values
    if bounds is None:
        if vals.size == 0:
            raise ValueError(f"cannot normalize empty series {series.name}")
        lo, hi = float(vals.min()), float(vals.max())
        frozen = False
    else:
        lo, hi = float(bounds[0]), float(bounds[1])
        frozen = True
    if hi > lo:
        out = 2.0 * (vals - lo) / (hi - lo) - 1.0
        if frozen:
            out = np.clip(out, -clamp, clamp)
    else:
        out = np.zeros_like(vals)
    return replace(series, values=out, stage=Stage.NORMALIZED, scale_min=lo, scale_max=hi)


def denormalize(series: SignalSeries) -> SignalSeries:
    _require(series, Stage.NORMALIZED, "denormalize")
    lo, hi = series.scale_min, series.scale_max
    if hi > lo:
        vals = (series.values + 1.0) * (hi - lo) / 2.0 + lo
    else:
        vals = np.full_like(series.values, lo)
    return replace(series, values=vals, stage=Stage.SMOOTHED)


def difference(series: SignalSeries) -> SignalSeries:
    _require(series, Stage.NORMALIZED, "difference")
    if len(series) < 2:
        raise ValueError(f"difference needs at least 2 samples, got {len(series)} ({series.name})")
    return replace(
        series,
        values=np.diff(series.values),
        stage=Stage.INTEGRATED,
        first_actual=float(series.values[0]),
    )


def reconstruct(series: SignalSeries) -> SignalSeries:
    """Cumulative sum of the differences anchored at ``first_actual``."""
    _require(series, Stage.INTEGRATED, "reconstruct")
    if series.first_actual is None:
        raise ValueError(f"series {series.name} has no first_actual anchor")
    vals = np.concatenate([[series.first_actual], series.first_actual + np.cumsum(series.values)])
    return replace(series, values=vals, stage=Stage.NORMALIZED, first_actual=None)


@dataclass(frozen=True)
class ScaleBounds:
    """Frozen per-channel normalization bounds from a training corpus."""

    bounds: Dict[str, tuple] = field(default_factory=dict)

    @classmethod
    def fit(cls, traces: Sequence[Mapping[str, np.ndarray]], channels: Sequence[str]) -> "ScaleBounds":
        out = {}
        for ch in channels:
            smoothed = [
                smooth(SignalSeries(ch, tr[ch])).values for tr in traces if len(tr[ch])
            ]
            allv = np.concatenate(smoothed)
            out[ch] = (float(allv.min()), float(allv.max()))
        return cls(out)

    def __getitem__(self, ch: str) -> tuple:
        return self.bounds[ch]


def prepare(values: np.ndarray, channel: str, bounds: tuple) -> SignalSeries:
    """Run one raw channel through smooth -> normalize -> difference."""
    raw = SignalSeries(channel, values)
    return difference(normalize(smooth(raw), bounds))
