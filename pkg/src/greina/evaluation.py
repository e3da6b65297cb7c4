"""Modelling error and reporting-delay metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .errors import ParseError, TimelineError
from .series import SensorSeries, hour_groups, to_utc

TIMELINE_HEADER = ("outlet_id", "dt_s", "dt_m", "dt_g", "dt_e")


@dataclass(frozen=True)
class FaultTimeline:
    """Leak dates: symptom start, manager report, engine report, repair."""

    dt_s: date | None
    dt_m: date | None = None
    dt_g: date | None = None
    dt_e: date | None = None
    outlet_id: str = ""

    def __post_init__(self):
        for name in ("dt_s", "dt_m", "dt_g", "dt_e"):
            v = getattr(self, name)
            if isinstance(v, datetime):
                object.__setattr__(self, name, to_utc(v).date())
        if self.dt_s is not None and self.dt_e is not None and self.dt_e < self.dt_s:
            raise TimelineError("repair date precedes symptom start")


def _co_present(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ok = ~np.isnan(a) & ~np.isnan(b)
    return a[ok], b[ok]


def _same_grid(T_r: SensorSeries, T_tilde: SensorSeries) -> None:
    if T_r.start != T_tilde.start or T_r.tau != T_tilde.tau or len(T_r) != len(T_tilde):
        raise ValueError("series must be aligned")


def hourly_mae(T_r: SensorSeries, T_tilde: SensorSeries, hour: datetime) -> float | None:
    """Mean absolute deviation over the hour's co-present samples, ``None`` if there are none."""
    _same_grid(T_r, T_tilde)
    secs = T_r.epoch_seconds()
    h0 = to_utc(hour).timestamp()
    sel = (secs >= h0 - 1e-6) & (secs < h0 + 3600 - 1e-6)
    a, b = _co_present(T_r.values[sel], T_tilde.values[sel])
    if a.size == 0:
        return None
    return float(np.abs(b - a).mean())


def hourly_mae_all(T_r: SensorSeries, T_tilde: SensorSeries) -> dict[datetime, float]:
    """Every hour's error, skipping hours without co-present samples."""
    _same_grid(T_r, T_tilde)
    out = {}
    for hour, lo, hi in hour_groups(T_r):
        a, b = _co_present(T_r.values[lo:hi], T_tilde.values[lo:hi])
        if a.size:
            out[hour] = float(np.abs(b - a).mean())
    return out


def rmse(T_r: SensorSeries | np.ndarray, T_tilde: SensorSeries | np.ndarray) -> float | None:
    a = T_r.values if isinstance(T_r, SensorSeries) else np.asarray(T_r, dtype=float)
    b = T_tilde.values if isinstance(T_tilde, SensorSeries) else np.asarray(T_tilde, dtype=float)
    if a.shape != b.shape:
        raise ValueError("series must be aligned")
    a, b = _co_present(a, b)
    if a.size == 0:
        return None
    return float(np.sqrt(np.mean((b - a) ** 2)))


def reporting_delays(t: FaultTimeline) -> tuple[int | None, int | None]:
    if t.dt_s is None:
        raise TimelineError("symptom start is required")
    out = []
    for report in (t.dt_m, t.dt_g):
        if report is None:
            out.append(None)
            continue
        if report < t.dt_s:
            raise TimelineError(f"report on {report} precedes symptom start {t.dt_s}")
        out.append((report - t.dt_s).days)
    return out[0], out[1]


def delay_gap(t: FaultTimeline) -> int | None:
    """Engine report minus manager report in days; negative when the engine was first."""
    if t.dt_m is None or t.dt_g is None:
        return None
    return (t.dt_g - t.dt_m).days


# ------------------------------------------------------------ timeline files


def _opt_date(text: str, lineno: int) -> date | None:
    text = text.strip()
    if not text:
        return None
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise ParseError(f"bad date {text!r}", line=lineno) from None


def parse_timelines(text: str) -> list[FaultTimeline]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if tuple(c.strip() for c in rows[0]) != TIMELINE_HEADER:
        raise ParseError(f"expected header {','.join(TIMELINE_HEADER)}", line=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(TIMELINE_HEADER):
            raise ParseError(f"expected {len(TIMELINE_HEADER)} fields", line=lineno)
        dates = [_opt_date(c, lineno) for c in row[1:]]
        out.append(FaultTimeline(*dates, outlet_id=row[0].strip()))
    return out


def timelines_to_csv(timelines) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMELINE_HEADER)
    for t in timelines:
        w.writerow([t.outlet_id] + ["" if d is None else d.isoformat() for d in (t.dt_s, t.dt_m, t.dt_g, t.dt_e)])
    return buf.getvalue()


def read_timelines(path: str | Path) -> list[FaultTimeline]:
    return parse_timelines(Path(path).read_text(encoding="utf-8"))
