"""Hourly outdoor temperature sources and their join onto the sensor grid."""
from __future__ import annotations

import abc
import csv
import io
import math
import threading
import urllib.parse
import urllib.request
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .series import Kind, SensorSeries, format_timestamp, hour_floor, parse_timestamp, to_utc

WEATHER_HEADER = ("hour", "temp_c")
DEFAULT_MAX_FILL_HOURS = 3


def parse_weather_csv(text: str) -> dict[datetime, float | None]:
    """``hour,temp_c`` rows keyed by UTC hour; an empty cell is a missing reading."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return {}
    if tuple(c.strip() for c in rows[0]) != WEATHER_HEADER:
        raise ParseError("expected header hour,temp_c", line=1)
    out: dict[datetime, float | None] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError("expected 2 fields", line=lineno)
        try:
            hour = parse_timestamp(row[0])
            value = float(row[1]) if row[1].strip() else None
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if hour != hour_floor(hour):
            raise ParseError(f"{row[0]} is not on an hour boundary", line=lineno)
        out[hour] = value
    return out


def weather_to_csv(hourly: SensorSeries) -> str:
    lines = [",".join(WEATHER_HEADER)]
    for i, v in enumerate(hourly.values):
        lines.append(f"{format_timestamp(hourly.timestamp_at(i))},{'' if math.isnan(v) else repr(float(v))}")
    return "\n".join(lines) + "\n"


def _hour_series(readings: dict[datetime, float | None], start: datetime, end: datetime) -> SensorSeries:
    start, end = hour_floor(start), hour_floor(end)
    n = int((end - start).total_seconds() // 3600)
    values = np.full(max(n, 0), np.nan)
    for i in range(len(values)):
        v = readings.get(start + timedelta(hours=i))
        if v is not None:
            values[i] = v
    return SensorSeries(Kind.EXTERNAL_TEMP, start, 3600.0, values)


class WeatherProvider(abc.ABC):
    """Source of hourly outdoor temperatures for a location."""

    @abc.abstractmethod
    def hourly(self, location: str, start: datetime, end: datetime) -> SensorSeries:
        """One value per clock hour in ``[start, end)``, missing where unknown."""


class FileWeatherProvider(WeatherProvider):
    """Reads ``<root>/<location>.csv``, or a single file for every location."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def _file(self, location: str) -> Path:
        return self.path / f"{location}.csv" if self.path.is_dir() else self.path

    def hourly(self, location: str, start: datetime, end: datetime) -> SensorSeries:
        f = self._file(location)
        if not f.exists():
            raise DataError(f"no weather file {f}")
        return _hour_series(parse_weather_csv(f.read_text(encoding="utf-8")), start, end)


class HttpWeatherProvider(WeatherProvider):
    """Client for a service answering ``GET /hourly?location=&start=&end=`` with weather CSV."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def hourly(self, location: str, start: datetime, end: datetime) -> SensorSeries:
        query = urllib.parse.urlencode(
            {"location": location, "start": format_timestamp(start), "end": format_timestamp(end)}
        )
        try:
            with urllib.request.urlopen(f"{self.base_url}/hourly?{query}", timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8")
        except OSError as exc:
            raise DataError(f"weather service unavailable: {exc}") from None
        return _hour_series(parse_weather_csv(text), start, end)


class StubWeatherServer:
    """Local HTTP server that serves fixture readings, for exercising the client.

    Use as a context manager; ``url`` is valid while it is open.
    """

    def __init__(self, readings: dict[str, dict[datetime, float | None]]):
        self.readings = readings
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def _handler(self):
        readings = self.readings

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                url = urllib.parse.urlparse(self.path)
                q = urllib.parse.parse_qs(url.query)
                if url.path != "/hourly" or "location" not in q:
                    self.send_error(404)
                    return
                data = readings.get(q["location"][0])
                if data is None:
                    self.send_error(404, "unknown location")
                    return
                lo = parse_timestamp(q["start"][0]) if "start" in q else None
                hi = parse_timestamp(q["end"][0]) if "end" in q else None
                lines = [",".join(WEATHER_HEADER)]
                for hour in sorted(data):
                    if (lo is None or hour >= lo) and (hi is None or hour < hi):
                        v = data[hour]
                        lines.append(f"{format_timestamp(hour)},{'' if v is None else repr(v)}")
                body = ("\n".join(lines) + "\n").encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "text/csv")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        return Handler

    @property
    def url(self) -> str:
        assert self._server is not None, "server is not running"
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> StubWeatherServer:
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        assert self._server is not None
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()
        self._server = None


def join_weather(
    hourly: SensorSeries,
    start: datetime,
    length: int,
    tau: float,
    max_fill_hours: int = DEFAULT_MAX_FILL_HOURS,
) -> SensorSeries:
    """Spread hourly readings onto a ``tau`` grid.

    Each sample takes its clock hour's reading.  A missing hour inherits the
    latest earlier reading if that is at most ``max_fill_hours`` old.
    """
    if hourly.tau != 3600.0:
        raise ValueError("hourly weather must have a one-hour interval")
    h = hourly.values.copy()
    last = -1
    for i in range(len(h)):
        if not math.isnan(h[i]):
            last = i
        elif last >= 0 and i - last <= max_fill_hours:
            h[i] = hourly.values[last]
    start = to_utc(start)
    secs = start.timestamp() + tau * np.arange(length)
    idx = np.floor((secs - hourly.start.timestamp()) / 3600.0 + 1e-9).astype(int)
    inside = (idx >= 0) & (idx < len(h))
    values = np.full(length, np.nan)
    values[inside] = h[idx[inside]]
    return SensorSeries(Kind.EXTERNAL_TEMP, start, tau, values)


def hourly_from_series(series: SensorSeries) -> SensorSeries:
    """Hourly means of a finer external-temperature series (used to build weather fixtures)."""
    from .series import hour_groups

    groups = hour_groups(series)
    if not groups:
        return SensorSeries(Kind.EXTERNAL_TEMP, series.start, 3600.0, np.empty(0))
    vals = []
    for _, lo, hi in groups:
        chunk = series.values[lo:hi]
        chunk = chunk[~np.isnan(chunk)]
        vals.append(float(chunk.mean()) if chunk.size else np.nan)
    return SensorSeries(Kind.EXTERNAL_TEMP, groups[0][0], 3600.0, np.array(vals))
