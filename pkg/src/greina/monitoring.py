"""Hourly leak monitoring.

Each hour the fitted model's free-running estimate is averaged and widened
by the measured within-hour spread to form a boundary.  Hours whose measured
mean exceeds it feed a bucket counter; a long enough run of them labels the
room as leaking.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from datetime import date, datetime, timedelta

import numpy as np

from .errors import ParseError, SimulationError
from .estimation import estimate_unit_state
from .learning import DefaultThreshold
from .series import (
    DEFAULT_HOUR_FRACTION,
    Kind,
    OutletRecord,
    SensorSeries,
    format_timestamp,
    hour_floor,
    parse_timestamp,
    summarize_hour,
    to_utc,
)
from .thermal import ThermalParams, free_run

DEFAULT_H_MON = 6
DEFAULT_B_LEAK = 36
VERDICT_HEADER = ("hour", "mean_temp", "boundary", "anomalous", "bucket", "label")
ALERT_HEADER = ("hour", "outlet_id", "bucket", "message")
HOUR = timedelta(hours=1)


class Label(str, enum.Enum):
    NORMAL = "normal"
    LEAKING = "leaking"


@dataclass(frozen=True)
class MonitorConfig:
    h_mon: int = DEFAULT_H_MON
    b_leak: int = DEFAULT_B_LEAK
    min_fraction: float = DEFAULT_HOUR_FRACTION

    def __post_init__(self):
        if self.h_mon < 1:
            raise ValueError("h_mon must be at least 1")
        if self.b_leak < 1:
            raise ValueError("B_leak must be at least 1")
        if not 0 < self.min_fraction <= 1:
            raise ValueError("min_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class BucketState:
    b: int = 0
    lock: int = 0
    label: Label = Label.NORMAL
    last_update: datetime | None = None

    def __post_init__(self):
        if self.b < 0 or self.lock < 0:
            raise ValueError("bucket and lock are non-negative")
        object.__setattr__(self, "label", Label(self.label))


@dataclass(frozen=True)
class HourVerdict:
    hour: datetime
    T_r_h: float | None
    T_hat_h: float | None
    anomalous: bool | None
    bucket_after: BucketState
    T_tilde_h: float | None = None
    sigma_h: float | None = None


@dataclass(frozen=True)
class MonitorState:
    """Everything needed to continue monitoring from the next hour.

    ``carry`` is the model estimate for the first sample of the next hour
    (NaN after a gap) and ``last_measured`` the latest measured room
    temperature, used to restart the estimate after gaps.
    """

    bucket: BucketState = BucketState()
    carry: float = math.nan
    last_measured: float = math.nan
    next_hour: datetime | None = None


def decision_boundary(
    T_tilde_h: float, sigma_h: float, default: DefaultThreshold | None = None
) -> float:
    if default is not None:
        return float(default.value)
    if sigma_h < 0:
        raise ValueError("sigma_h must be non-negative")
    return T_tilde_h + sigma_h


def update_bucket(
    state: BucketState,
    T_r_h: float | None,
    T_hat_h: float | None,
    h_mon: int = DEFAULT_H_MON,
    b_leak: int = DEFAULT_B_LEAK,
    hour: datetime | None = None,
) -> BucketState:
    """One step of the bucket automaton.

    Missing inputs leave the state untouched.  The lock never drops below
    zero and neither does the bucket.
    """
    if _missing(T_r_h) or _missing(T_hat_h):
        return state
    if T_r_h > T_hat_h:
        b, lock = state.b + 1, h_mon
    else:
        lock = max(state.lock - 1, 0)
        b = 0 if lock == 0 else max(state.b - 1, 0)
    label = state.label
    if b >= b_leak:
        label = Label.LEAKING
    elif b == 0:
        label = Label.NORMAL
    return BucketState(b, lock, label, hour if hour is not None else state.last_update)


def _missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


@dataclass
class _Inputs:
    """Numpy views of an aligned outlet record with compressor state filled in."""

    start: datetime
    tau: float
    T_r: np.ndarray
    X: np.ndarray

    @classmethod
    def of(cls, outlet: OutletRecord) -> _Inputs:
        rec = outlet.aligned()
        unit = rec.unit_state
        if unit is None:
            unit = estimate_unit_state(rec.room_temp)
        X = np.column_stack([rec.external_temp.values, rec.door_state.values, unit.values])
        return cls(rec.room_temp.start, rec.room_temp.tau, rec.room_temp.values, X)

    def hour_slice(self, hour: datetime) -> slice:
        lo = math.ceil((to_utc(hour) - self.start).total_seconds() / self.tau - 1e-9)
        hi = math.ceil((to_utc(hour) + HOUR - self.start).total_seconds() / self.tau - 1e-9)
        return slice(max(lo, 0), max(min(hi, len(self.T_r)), 0))


def _evaluate_hour(
    data: _Inputs,
    hour: datetime,
    model: ThermalParams | DefaultThreshold,
    state: MonitorState,
    cfg: MonitorConfig,
) -> tuple[HourVerdict, MonitorState, np.ndarray]:
    sl = data.hour_slice(hour)
    T_r = data.T_r[sl]
    mean, sigma, _ = summarize_hour(T_r, data.tau, cfg.min_fraction)
    est = np.full(len(T_r), np.nan)
    carry, last_meas = state.carry, state.last_measured
    present = T_r[~np.isnan(T_r)]
    if present.size:
        last_meas = float(present[-1])

    if isinstance(model, DefaultThreshold):
        t_tilde = None
        boundary = decision_boundary(math.nan, 0.0, model) if mean is not None else None
    else:
        try:
            est, carry = free_run(model, state.carry, data.X[sl], T_r, state.last_measured)
            if not np.isfinite(est[~np.isnan(est)]).all():
                raise SimulationError("model estimate is not finite")
        except SimulationError:
            est, carry = np.full(len(T_r), np.nan), math.nan
        t_tilde, _, _ = summarize_hour(est, data.tau, cfg.min_fraction)
        if t_tilde is None or mean is None:
            boundary = None
        else:
            boundary = decision_boundary(t_tilde, sigma)

    anomalous = None if (mean is None or boundary is None) else bool(mean > boundary)
    bucket = update_bucket(state.bucket, mean, boundary, cfg.h_mon, cfg.b_leak, hour)
    verdict = HourVerdict(hour, mean, boundary, anomalous, bucket, t_tilde, sigma)
    return verdict, MonitorState(bucket, carry, last_meas, hour + HOUR), est


def monitor_hour(
    outlet: OutletRecord,
    hour: datetime,
    params_or_default: ThermalParams | DefaultThreshold,
    state: MonitorState | None = None,
    config: MonitorConfig = MonitorConfig(),
) -> tuple[HourVerdict, MonitorState]:
    """Judge a single clock hour and return the verdict with the follow-on state."""
    verdict, new_state, _ = _evaluate_hour(
        _Inputs.of(outlet), hour_floor(hour), params_or_default, state or MonitorState(), config
    )
    return verdict, new_state


@dataclass
class MonitorRun:
    verdicts: list[HourVerdict]
    state: MonitorState
    estimate: SensorSeries | None


def run_monitor(
    outlet: OutletRecord,
    params_or_default: ThermalParams | DefaultThreshold,
    state: MonitorState | None = None,
    config: MonitorConfig = MonitorConfig(),
    start: datetime | None = None,
    until: datetime | None = None,
) -> MonitorRun:
    """Process every complete hour after ``state.next_hour`` (or ``start``) up to ``until``.

    Splitting a run at any hour boundary and passing the returned state to
    the second call gives the same verdicts as a single call.
    """
    state = state or MonitorState()
    data = _Inputs.of(outlet)
    data_end = data.start + timedelta(seconds=data.tau * len(data.T_r))
    first = state.next_hour or start or data.start
    hour = hour_floor(first)
    if hour < first:
        hour += HOUR
    end = data_end if until is None else min(data_end, to_utc(until))

    verdicts: list[HourVerdict] = []
    est_parts: list[tuple[slice, np.ndarray]] = []
    while hour + HOUR <= end:
        verdict, state, est = _evaluate_hour(data, hour, params_or_default, state, config)
        verdicts.append(verdict)
        est_parts.append((data.hour_slice(hour), est))
        hour += HOUR

    estimate = None
    if est_parts and not isinstance(params_or_default, DefaultThreshold):
        lo, hi = est_parts[0][0].start, est_parts[-1][0].stop
        values = np.full(hi - lo, np.nan)
        for sl, est in est_parts:
            values[sl.start - lo:sl.stop - lo] = est
        estimate = SensorSeries(
            Kind.ROOM_TEMP, data.start + timedelta(seconds=data.tau * lo), data.tau, values
        )
    return MonitorRun(verdicts, state, estimate)


def flagged_days(verdicts) -> list[date]:
    days = {v.hour.date() for v in verdicts if v.bucket_after.label is Label.LEAKING}
    return sorted(days)


def first_label_hour(verdicts) -> datetime | None:
    return next((v.hour for v in verdicts if v.bucket_after.label is Label.LEAKING), None)


def alert_hours(verdicts, before: BucketState | None = None) -> list[HourVerdict]:
    """Verdicts at which the label switched from normal to leaking."""
    prev = (before or BucketState()).label
    out = []
    for v in verdicts:
        if v.bucket_after.label is Label.LEAKING and prev is Label.NORMAL:
            out.append(v)
        prev = v.bucket_after.label
    return out


# ------------------------------------------------------------------ CSV logs


def _num(x) -> str:
    return "" if _missing(x) else repr(float(x))


def verdict_rows(verdicts) -> list[list[str]]:
    return [
        [
            format_timestamp(v.hour),
            _num(v.T_r_h),
            _num(v.T_hat_h),
            "" if v.anomalous is None else str(int(v.anomalous)),
            str(v.bucket_after.b),
            v.bucket_after.label.value,
        ]
        for v in verdicts
    ]


def verdicts_to_csv(verdicts, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(VERDICT_HEADER)
    w.writerows(verdict_rows(verdicts))
    return buf.getvalue()


def parse_verdicts(text: str) -> list[HourVerdict]:
    """Read a verdict log back; the lock counter is not logged and reads as 0."""
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        return []
    if tuple(rows[0]) != VERDICT_HEADER:
        raise ParseError(f"expected header {','.join(VERDICT_HEADER)}", line=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(VERDICT_HEADER):
            raise ParseError(f"expected {len(VERDICT_HEADER)} fields", line=lineno)
        try:
            hour = parse_timestamp(row[0])
            mean = float(row[1]) if row[1] else None
            bound = float(row[2]) if row[2] else None
            anomalous = None if row[3] == "" else bool(int(row[3]))
            bucket = BucketState(int(row[4]), 0, Label(row[5]), hour)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        out.append(HourVerdict(hour, mean, bound, anomalous, bucket))
    return out


def alerts_to_csv(alerts, outlet_id: str, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(ALERT_HEADER)
    for v in alerts:
        w.writerow([format_timestamp(v.hour), outlet_id, v.bucket_after.b, alert_message(outlet_id, v)])
    return buf.getvalue()


def alert_message(outlet_id: str, v: HourVerdict) -> str:
    return f"refrigerant leak suspected in {outlet_id} at {format_timestamp(v.hour)} (bucket {v.bucket_after.b})"


# --------------------------------------------------------- state persistence


def state_to_dict(state: MonitorState) -> dict:
    b = state.bucket
    return {
        "bucket": b.b,
        "lock": b.lock,
        "label": b.label.value,
        "last_update": None if b.last_update is None else format_timestamp(b.last_update),
        "carry": None if math.isnan(state.carry) else state.carry,
        "last_measured": None if math.isnan(state.last_measured) else state.last_measured,
        "next_hour": None if state.next_hour is None else format_timestamp(state.next_hour),
    }


def state_from_dict(d: dict) -> MonitorState:
    """Inverse of :func:`state_to_dict`; raises ``KeyError``/``ValueError``/``TypeError`` on bad input."""
    opt_ts = lambda v: None if v is None else parse_timestamp(v)
    opt_f = lambda v: math.nan if v is None else float(v)
    bucket = BucketState(int(d["bucket"]), int(d["lock"]), Label(d["label"]), opt_ts(d["last_update"]))
    return MonitorState(bucket, opt_f(d["carry"]), opt_f(d["last_measured"]), opt_ts(d["next_hour"]))

