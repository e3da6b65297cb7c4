"""Uniformly sampled sensor series, CSV I/O, alignment and hourly statistics.

A :class:`SensorSeries` is gap-explicit: sample ``i`` sits at
``start + i * tau`` and missing readings are stored as NaN.  Nothing in this
module mutates a series after construction.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import AlignmentError, FormatError, ParseError

if TYPE_CHECKING:
    from .learning import DoorProfile
    from .thermal import ThermalParams

DEFAULT_TAU = 60.0
DEFAULT_HOUR_FRACTION = 0.5
EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
CSV_HEADER = "timestamp,value"


class Kind(str, enum.Enum):
    ROOM_TEMP = "room_temp"
    EXTERNAL_TEMP = "external_temp"
    DOOR_STATE = "door_state"
    UNIT_STATE = "unit_state"

    @property
    def is_binary(self) -> bool:
        return self in (Kind.DOOR_STATE, Kind.UNIT_STATE)


def to_utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {dt!r} has no UTC offset")
    return dt.astimezone(timezone.utc)


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 timestamp that carries an explicit offset."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError("missing UTC offset")
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    return to_utc(dt).isoformat()


def hour_floor(dt: datetime) -> datetime:
    return to_utc(dt).replace(minute=0, second=0, microsecond=0)


@dataclass(frozen=True, eq=False)
class SensorSeries:
    """Timestamped scalar or binary stream on a fixed ``tau``-second grid."""

    kind: Kind
    start: datetime
    tau: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "start", to_utc(self.start))
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if self.kind.is_binary:
            present = values[~np.isnan(values)]
            if not np.isin(present, (0.0, 1.0)).all():
                raise ValueError("value out of domain for a binary series")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SensorSeries):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.start == other.start
            and self.tau == other.tau
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None

    @property
    def end(self) -> datetime:
        """Timestamp one interval past the last sample (exclusive bound)."""
        return self.start + timedelta(seconds=self.tau * len(self))

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def timestamp_at(self, index: int) -> datetime:
        return self.start + timedelta(seconds=self.tau * index)

    def offset_of(self, when: datetime) -> float:
        """Position of ``when`` on this series' grid, in samples (may be fractional)."""
        return (to_utc(when) - self.start).total_seconds() / self.tau

    def epoch_seconds(self) -> np.ndarray:
        return self.start.timestamp() + self.tau * np.arange(len(self))

    def slice(self, lo: int, hi: int) -> SensorSeries:
        lo = max(lo, 0)
        hi = min(hi, len(self))
        hi = max(hi, lo)
        return SensorSeries(self.kind, self.timestamp_at(lo), self.tau, self.values[lo:hi])

    def with_values(self, values, kind: Kind | None = None) -> SensorSeries:
        return SensorSeries(kind or self.kind, self.start, self.tau, values)

    def dates(self) -> np.ndarray:
        """UTC calendar date of each sample, as ``datetime64[D]``."""
        secs = np.floor(self.epoch_seconds()).astype("int64")
        return secs.astype("datetime64[s]").astype("datetime64[D]")


@dataclass(frozen=True)
class HourlyRecord:
    hour_start: datetime
    mean_temp: float | None
    std_temp: float | None
    sample_count: int


@dataclass
class OutletRecord:
    """All inputs for one cold room.

    ``unit_state`` may be absent, in which case it is estimated from
    ``room_temp`` before use.
    """

    outlet_id: str
    room_temp: SensorSeries
    external_temp: SensorSeries
    door_state: SensorSeries
    unit_state: SensorSeries | None = None
    door_profile: DoorProfile | None = None
    params: ThermalParams | None = None

    def series(self) -> list[SensorSeries]:
        out = [self.room_temp, self.external_temp, self.door_state]
        if self.unit_state is not None:
            out.append(self.unit_state)
        return out

    def aligned(self) -> OutletRecord:
        parts = align(self.series())
        return OutletRecord(
            self.outlet_id,
            parts[0],
            parts[1],
            parts[2],
            parts[3] if self.unit_state is not None else None,
            self.door_profile,
            self.params,
        )


def _format_value(value: float, kind: Kind) -> str:
    if math.isnan(value):
        return ""
    if kind.is_binary:
        return str(int(value))
    return repr(float(value))


def parse_series(text: str, kind: Kind | str, tau: float | None = None) -> SensorSeries:
    """Parse ``timestamp,value`` CSV text into a gap-explicit series.

    Rows absent from the file become missing samples, as do rows with an
    empty value.  When ``tau`` is not given it is taken as the smallest
    spacing between consecutive rows (or :data:`DEFAULT_TAU` for fewer than
    two rows); every spacing must then be a whole multiple of it.
    """
    kind = Kind(kind)
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    lines = [ln[:-1] if ln.endswith("\r") else ln for ln in lines]
    if not lines:
        return SensorSeries(kind, EPOCH, tau or DEFAULT_TAU, np.empty(0))
    if lines[0].strip() != CSV_HEADER:
        raise ParseError(f"expected header {CSV_HEADER!r}, got {lines[0]!r}", line=1)

    stamps: list[datetime] = []
    values: list[float] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected 2 fields, got {len(parts)}", line=lineno)
        ts_text, val_text = parts
        try:
            ts = parse_timestamp(ts_text)
        except ValueError as exc:
            raise ParseError(f"malformed timestamp {ts_text!r} ({exc})", line=lineno) from None
        val_text = val_text.strip()
        if val_text == "":
            val = math.nan
        else:
            try:
                val = float(val_text)
            except ValueError:
                raise ParseError(f"malformed value {val_text!r}", line=lineno) from None
            if not math.isfinite(val):
                raise ParseError(f"non-finite value {val_text!r}", line=lineno)
            if kind.is_binary and val not in (0.0, 1.0):
                raise ParseError(f"value out of domain: {val_text!r}", line=lineno)
        if stamps and ts <= stamps[-1]:
            raise ParseError("timestamps out of order", line=lineno)
        stamps.append(ts)
        values.append(val)

    if not stamps:
        return SensorSeries(kind, EPOCH, tau or DEFAULT_TAU, np.empty(0))
    offsets = np.array([(ts - stamps[0]).total_seconds() for ts in stamps])
    if tau is None:
        tau = float(np.diff(offsets).min()) if len(offsets) > 1 else DEFAULT_TAU
    steps = offsets / tau
    index = np.rint(steps).astype(int)
    bad = np.flatnonzero(np.abs(steps - index) > 1e-6)
    if bad.size:
        raise FormatError(
            f"row {bad[0] + 2}: spacing is not an integer multiple of tau={tau:g} s"
        )
    out = np.full(index[-1] + 1, np.nan)
    out[index] = values
    return SensorSeries(kind, stamps[0], tau, out)


def serialize_series(series: SensorSeries) -> str:
    rows = [CSV_HEADER]
    for i, value in enumerate(series.values):
        rows.append(f"{format_timestamp(series.timestamp_at(i))},{_format_value(value, series.kind)}")
    return "\n".join(rows) + "\n"


def read_series(path: str | Path, kind: Kind | str, tau: float | None = None) -> SensorSeries:
    return parse_series(Path(path).read_text(encoding="utf-8"), kind, tau)


def write_series(path: str | Path, series: SensorSeries) -> None:
    Path(path).write_text(serialize_series(series), encoding="utf-8", newline="\n")


def align(series_list: Sequence[SensorSeries]) -> list[SensorSeries]:
    """Trim every series to the common time range.

    Raises :class:`AlignmentError` when intervals differ, grids are offset by a
    fraction of ``tau``, or the ranges do not overlap.
    """
    if not series_list:
        return []
    tau = series_list[0].tau
    if any(s.tau != tau for s in series_list):
        raise AlignmentError("all series must share the same interval")
    ref = series_list[0].start
    for s in series_list:
        shift = (s.start - ref).total_seconds() / tau
        if abs(shift - round(shift)) > 1e-9:
            raise AlignmentError(f"{s.kind.value} grid is offset by a fraction of tau")
    start = max(s.start for s in series_list)
    end = min(s.end for s in series_list)
    if end <= start:
        raise AlignmentError("series time ranges do not overlap")
    out = []
    for s in series_list:
        lo = int(round(s.offset_of(start)))
        hi = int(round(s.offset_of(end)))
        out.append(s.slice(lo, hi))
    return out


def hour_groups(series: SensorSeries) -> list[tuple[datetime, int, int]]:
    """``(hour_start, lo, hi)`` index ranges for every clock hour the series touches."""
    if len(series) == 0:
        return []
    hour_id = np.floor(series.epoch_seconds() / 3600.0 + 1e-9).astype("int64")
    marks = np.flatnonzero(np.diff(hour_id)) + 1
    bounds = np.concatenate(([0], marks, [len(series)]))
    return [
        (EPOCH + timedelta(hours=int(hour_id[lo])), int(lo), int(hi))
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]


def expected_per_hour(tau: float) -> float:
    return 3600.0 / tau


def summarize_hour(values: np.ndarray, tau: float, min_fraction: float = DEFAULT_HOUR_FRACTION):
    """Mean, population std and present count of one hour's samples.

    Mean and std are ``None`` when fewer than ``min_fraction`` of the expected
    ``3600 / tau`` samples are present.
    """
    present = values[~np.isnan(values)]
    n = int(present.size)
    if n == 0 or n < min_fraction * expected_per_hour(tau):
        return None, None, n
    return float(present.mean()), float(present.std()), n


def hourly_aggregate(
    series: SensorSeries, min_fraction: float = DEFAULT_HOUR_FRACTION
) -> list[HourlyRecord]:
    if series.kind.is_binary:
        raise ValueError("hourly_aggregate expects a temperature series")
    records = []
    for hour, lo, hi in hour_groups(series):
        mean, std, n = summarize_hour(series.values[lo:hi], series.tau, min_fraction)
        records.append(HourlyRecord(hour, mean, std, n))
    return records


def day_of(dt: datetime) -> date:
    return to_utc(dt).date()


def concat(parts: Iterable[SensorSeries]) -> SensorSeries:
    """Join back-to-back series of one kind, filling any gap with missing samples."""
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    chunks = [first.values]
    cursor = first.end
    for p in parts[1:]:
        if p.kind != first.kind or p.tau != first.tau:
            raise AlignmentError("cannot concatenate series of different kind or interval")
        gap = (p.start - cursor).total_seconds() / first.tau
        if gap < -1e-9 or abs(gap - round(gap)) > 1e-9:
            raise AlignmentError("series overlap or are off-grid")
        chunks.append(np.full(int(round(gap)), np.nan))
        chunks.append(p.values)
        cursor = p.end
    return SensorSeries(first.kind, first.start, first.tau, np.concatenate(chunks))
