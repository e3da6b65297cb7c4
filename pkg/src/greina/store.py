"""On-disk layout for outlets, fitted parameters and monitor state.

An outlet is a directory holding its sensor CSVs.  A fleet is a directory of
outlets.  Each outlet keeps versioned ``<trained_at>.params`` files, a
``flagged_days.txt`` list and the monitor's logs and state.
"""
from __future__ import annotations

import json
import os
from contextlib import contextmanager
from datetime import date, datetime, timedelta
from pathlib import Path

from filelock import FileLock

from .errors import DataError, InsufficientDataError, StateCorruptionError
from .learning import DoorProfile, FleetEntry, door_profile
from .monitoring import MonitorState, state_from_dict, state_to_dict
from .series import Kind, OutletRecord, SensorSeries, read_series, to_utc
from .thermal import ThermalParams, read_params, write_params
from .weather import FileWeatherProvider, join_weather

SERIES_FILES = {
    Kind.ROOM_TEMP: "room_temp.csv",
    Kind.EXTERNAL_TEMP: "external_temp.csv",
    Kind.DOOR_STATE: "door_state.csv",
    Kind.UNIT_STATE: "unit_state.csv",
}
WEATHER_FILE = "weather.csv"
FLAGGED_FILE = "flagged_days.txt"
STATE_FILE = "monitor_state.json"
VERDICTS_FILE = "verdicts.csv"
ALERTS_FILE = "alerts.csv"
ESTIMATE_FILE = "estimated_temp.csv"
LOCK_FILE = ".greina.lock"


def compact_timestamp(dt: datetime) -> str:
    return to_utc(dt).strftime("%Y%m%dT%H%M%SZ")


@contextmanager
def outlet_lock(outlet_dir: str | Path, timeout: float = 30.0):
    """Exclusive lock on one outlet for the duration of a command."""
    with FileLock(str(Path(outlet_dir) / LOCK_FILE), timeout=timeout):
        yield


def load_outlet(
    outlet_dir: str | Path,
    tau: float | None = None,
    use_unit_state: bool = True,
    max_fill_hours: int = 3,
) -> OutletRecord:
    """Read an outlet directory.

    Room temperature and door state are required.  External temperature comes
    from ``external_temp.csv`` or, failing that, hourly ``weather.csv``.
    """
    d = Path(outlet_dir)
    if not d.is_dir():
        raise DataError(f"outlet directory {d} does not exist")

    def need(kind: Kind) -> SensorSeries:
        path = d / SERIES_FILES[kind]
        if not path.exists():
            raise DataError(f"{d.name}: missing {path.name}")
        return read_series(path, kind, tau)

    room = need(Kind.ROOM_TEMP)
    door = need(Kind.DOOR_STATE)
    if (d / SERIES_FILES[Kind.EXTERNAL_TEMP]).exists():
        ext = need(Kind.EXTERNAL_TEMP)
    elif (d / WEATHER_FILE).exists():
        # one extra hour so a trailing partial hour is covered
        hourly = FileWeatherProvider(d / WEATHER_FILE).hourly(d.name, room.start, room.end + timedelta(hours=1))
        ext = join_weather(hourly, room.start, len(room), room.tau, max_fill_hours)
    else:
        raise DataError(f"{d.name}: missing external_temp.csv (or weather.csv)")
    unit = None
    if use_unit_state and (d / SERIES_FILES[Kind.UNIT_STATE]).exists():
        unit = need(Kind.UNIT_STATE)
    return OutletRecord(d.name, room, ext, door, unit)


class OutletStore:
    """Parameter versions and flagged days for outlets under ``root``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dir(self, outlet_id: str) -> Path:
        return self.root / outlet_id

    def save_params(self, outlet_id: str, params: ThermalParams) -> Path:
        if params.trained_at is None:
            raise ValueError("params to store need trained_at")
        d = self.dir(outlet_id)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{compact_timestamp(params.trained_at)}.params"
        tmp = path.with_suffix(".params.tmp")
        write_params(tmp, params)
        os.replace(tmp, path)
        return path

    def versions(self, outlet_id: str) -> list[Path]:
        d = self.dir(outlet_id)
        return sorted(d.glob("*.params")) if d.is_dir() else []

    def latest_params(self, outlet_id: str) -> ThermalParams | None:
        versions = self.versions(outlet_id)
        return read_params(versions[-1]) if versions else None

    def flagged_days(self, outlet_id: str) -> set[date]:
        path = self.dir(outlet_id) / FLAGGED_FILE
        if not path.exists():
            return set()
        out = set()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if line.strip():
                try:
                    out.add(date.fromisoformat(line.strip()))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: bad date {line.strip()!r}") from None
        return out

    def add_flagged_days(self, outlet_id: str, days) -> set[date]:
        merged = self.flagged_days(outlet_id) | set(days)
        d = self.dir(outlet_id)
        d.mkdir(parents=True, exist_ok=True)
        (d / FLAGGED_FILE).write_text("".join(f"{x.isoformat()}\n" for x in sorted(merged)), encoding="utf-8")
        return merged

    def outlets(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and not p.name.startswith("."))


def load_fleet(fleet_dir: str | Path, exclude: str | None = None, tau: float | None = None) -> dict[str, FleetEntry]:
    """Door profiles and latest fitted parameters of every outlet in a fleet directory."""
    store = OutletStore(fleet_dir)
    fleet = {}
    for oid in store.outlets():
        d = store.dir(oid)
        if exclude is not None and d.resolve() == Path(exclude).resolve():
            continue
        door_path = d / SERIES_FILES[Kind.DOOR_STATE]
        profile: DoorProfile | None = None
        if door_path.exists():
            try:
                profile = door_profile(read_series(door_path, Kind.DOOR_STATE, tau))
            except InsufficientDataError:
                profile = None
        fleet[oid] = FleetEntry(oid, profile, store.latest_params(oid))
    return fleet


def read_state(outlet_dir: str | Path) -> MonitorState | None:
    path = Path(outlet_dir) / STATE_FILE
    if not path.exists():
        return None
    try:
        return state_from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise StateCorruptionError(f"{path} is unreadable ({exc}); rerun with --reset-state") from None


def write_state(outlet_dir: str | Path, state: MonitorState) -> None:
    path = Path(outlet_dir) / STATE_FILE
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(state_to_dict(state), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
