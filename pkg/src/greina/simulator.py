"""Cold-room ground-truth generator.

A single air node is driven by a diurnal outdoor temperature, a stochastic
door and a hysteresis-controlled compressor.  Leaks shrink the compressor's
cooling capacity linearly over time.  Everything is a pure function of the
scenario's seed.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ParseError
from .kvfile import parse_kv
from .series import Kind, SensorSeries, format_timestamp, parse_timestamp, to_utc, write_series
from .thermal import PhysicalParams, ThermalParams, lump_parameters

START = datetime(2024, 3, 1, tzinfo=timezone.utc)

CANONICAL_ROOM = PhysicalParams(C_r=2000.0, K_e_r=0.05, Q_dr=1.5, Q_ru=-4.0, eta_r=0.8)
DAY_HOURS = range(9, 21)
BASE_DAY_RATE = 2.0
BASE_NIGHT_RATE = 0.2
BUSY_DAY_RATE = 6.0
FIXTURE_BLOWER_OFFSET = -0.2

GROUND_TRUTH_FILES = ("room_temp.csv", "external_temp.csv", "door_state.csv", "unit_state.csv", "truth.csv")


class NeverCoolsWarning(UserWarning):
    """The configured compressor cannot pull the room down to the off threshold."""


def door_schedule(day_rate: float, night_rate: float, day_hours=DAY_HOURS) -> tuple[float, ...]:
    return tuple(float(day_rate if h in day_hours else night_rate) for h in range(24))


@dataclass(frozen=True)
class FaultInjection:
    """Linear loss of ``decay`` of the cooling capacity per day from ``onset``.

    ``repair`` optionally restores full capacity.
    """

    onset: datetime
    decay: float
    kind: str = "refrigerant_leak"
    repair: datetime | None = None

    def __post_init__(self):
        if self.kind != "refrigerant_leak":
            raise ValueError(f"unsupported fault kind {self.kind!r}")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.repair is not None and self.repair < self.onset:
            raise ValueError("repair precedes onset")

    def capacity(self, t: np.ndarray) -> np.ndarray:
        """Remaining capacity fraction at UTC epoch seconds ``t``."""
        days = (t - self.onset.timestamp()) / 86400.0
        cap = np.where(days > 0, np.maximum(0.0, 1.0 - self.decay * days), 1.0)
        if self.repair is not None:
            cap = np.where(t >= self.repair.timestamp(), 1.0, cap)
        return cap


@dataclass(frozen=True)
class ScenarioConfig:
    physical: PhysicalParams = CANONICAL_ROOM
    tau: float = 60.0
    T_off: float = 5.0
    T_on: float = 8.0
    weather_min: float = 21.0
    weather_max: float = 37.0
    weather_peak_hour: float = 15.0
    door_rates: tuple[float, ...] = door_schedule(BASE_DAY_RATE, BASE_NIGHT_RATE)
    door_mean_duration: float = 90.0
    sensor_noise_sigma: float = 0.2
    blower_offset: float = 0.0
    duration_days: float = 30.0
    seed: int = 0
    faults: tuple[FaultInjection, ...] = ()
    start: datetime = START
    T_initial: float = 7.0
    outlet_id: str = "outlet"

    def __post_init__(self):
        if not self.T_off < self.T_on:
            raise ValueError("T_off must be below T_on")
        if len(self.door_rates) != 24 or any(r < 0 for r in self.door_rates):
            raise ValueError("door_rates needs 24 non-negative entries")
        if self.door_mean_duration <= 0 or self.sensor_noise_sigma < 0 or self.duration_days <= 0:
            raise ValueError("durations must be positive and noise non-negative")
        if self.weather_min > self.weather_max:
            raise ValueError("weather_min exceeds weather_max")
        object.__setattr__(self, "faults", tuple(self.faults))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_days * 86400.0 / self.tau))

    @property
    def lumped(self) -> ThermalParams:
        return lump_parameters(self.physical, self.tau)

    @property
    def leak_onset(self) -> datetime | None:
        onsets = [f.onset for f in self.faults]
        return min(onsets) if onsets else None

    def day(self, k: float) -> datetime:
        """Timestamp ``k`` days after the scenario start."""
        return self.start + timedelta(days=k)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    config: ScenarioConfig
    room_temp: SensorSeries
    external_temp: SensorSeries
    door_state: SensorSeries
    unit_state: SensorSeries
    room_temp_clean: SensorSeries
    air_temp: np.ndarray
    capacity: np.ndarray
    leak_onset: datetime | None

    def __eq__(self, other):
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return (
            self.config == other.config
            and self.room_temp == other.room_temp
            and self.external_temp == other.external_temp
            and self.door_state == other.door_state
            and self.unit_state == other.unit_state
            and self.room_temp_clean == other.room_temp_clean
            and np.array_equal(self.air_temp, other.air_temp)
            and np.array_equal(self.capacity, other.capacity)
        )

    __hash__ = None

    def daily_duty(self) -> dict[date, float]:
        return _daily_mean(self.unit_state)

    def daily_mean_air(self) -> dict[date, float]:
        return _daily_mean(self.unit_state.with_values(self.air_temp, Kind.ROOM_TEMP))


def _daily_mean(s: SensorSeries) -> dict[date, float]:
    days = s.dates()
    out = {}
    for d in np.unique(days):
        out[d.astype(date)] = float(np.nanmean(s.values[days == d]))
    return out


def weather(config: ScenarioConfig, t: np.ndarray) -> np.ndarray:
    """Outdoor temperature at epoch seconds ``t``: a sinusoid peaking at the configured hour."""
    mid = 0.5 * (config.weather_min + config.weather_max)
    amp = 0.5 * (config.weather_max - config.weather_min)
    hod = (t % 86400.0) / 3600.0
    return mid + amp * np.sin(2 * np.pi * (hod - config.weather_peak_hour + 6.0) / 24.0)


def door_events(config: ScenarioConfig, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Open intervals ``(t_open, t_close)`` in seconds from the scenario start.

    Closed spells end after an exponential amount of the hour-of-day dependent
    hazard; open spells last an exponential time with the configured mean.
    """
    horizon = config.n_steps * config.tau
    rates = np.asarray(config.door_rates) / 3600.0
    offset = config.start.timestamp() % 86400.0
    events = []
    t = 0.0
    while t < horizon:
        need = rng.exponential(1.0)
        while need > 0 and t < horizon:
            hod = int(((t + offset) % 86400.0) // 3600.0)
            seg_end = t + (3600.0 - ((t + offset) % 3600.0))
            r = rates[hod]
            if r > 0 and need <= r * (seg_end - t):
                t += need / r
                need = 0.0
            else:
                need -= r * (seg_end - t)
                t = seg_end
        if t >= horizon:
            break
        dur = rng.exponential(config.door_mean_duration)
        events.append((t, t + dur))
        t += dur
    return events


def _door_vector(config: ScenarioConfig, events) -> np.ndarray:
    n, tau = config.n_steps, config.tau
    out = np.zeros(n)
    for lo, hi in events:
        # a step counts as open if the door was open at any time within it
        a = int(lo // tau)
        b = int(math.ceil(hi / tau))
        out[a:min(b, n)] = 1.0
    return out


def _check_cooling(config: ScenarioConfig) -> None:
    p = config.physical
    if p.K_e_r > 0:
        floor = config.weather_min + (p.Q_ru + p.eta_r) / p.K_e_r
        cools = floor < config.T_off
    else:
        cools = p.Q_ru + p.eta_r < 0
    if not cools:
        warnings.warn(
            f"{config.outlet_id}: compressor cannot reach T_off={config.T_off} even at the coolest hour",
            NeverCoolsWarning,
            stacklevel=3,
        )


def simulate_outlet(config: ScenarioConfig) -> GroundTruth:
    _check_cooling(config)
    mu = config.lumped
    n, tau = config.n_steps, config.tau
    door_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))

    t = config.start.timestamp() + tau * np.arange(n)
    T_e = weather(config, t)
    S_d = _door_vector(config, door_events(config, door_rng))
    cap = np.ones(n)
    for f in config.faults:
        cap = np.minimum(cap, f.capacity(t))

    T = np.empty(n)
    S = np.empty(n)
    x, s = float(config.T_initial), 0.0
    te, sd, cp = T_e.tolist(), S_d.tolist(), cap.tolist()
    for k in range(n):
        if x >= config.T_on:
            s = 1.0
        elif x <= config.T_off:
            s = 0.0
        T[k], S[k] = x, s
        x = mu.mu_r * x + mu.mu_e * te[k] + mu.mu_dr * sd[k] + mu.mu_ru * cp[k] * s + mu.eta_prime

    clean = T + config.blower_offset * S
    noisy = clean + config.sensor_noise_sigma * noise_rng.standard_normal(n)
    mk = lambda kind, v: SensorSeries(kind, config.start, tau, v)
    return GroundTruth(
        config=config,
        room_temp=mk(Kind.ROOM_TEMP, noisy),
        external_temp=mk(Kind.EXTERNAL_TEMP, T_e),
        door_state=mk(Kind.DOOR_STATE, S_d),
        unit_state=mk(Kind.UNIT_STATE, S),
        room_temp_clean=mk(Kind.ROOM_TEMP, clean),
        air_temp=T,
        capacity=cap,
        leak_onset=config.leak_onset,
    )


TRUTH_HEADER = ("timestamp", "noise_free_temp", "air_temp", "unit_state", "capacity", "leak_onset")


def truth_csv(gt: GroundTruth) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRUTH_HEADER)
    onset = "" if gt.leak_onset is None else format_timestamp(gt.leak_onset)
    s = gt.room_temp_clean
    for i in range(len(s)):
        w.writerow([
            format_timestamp(s.timestamp_at(i)),
            repr(float(s.values[i])),
            repr(float(gt.air_temp[i])),
            str(int(gt.unit_state.values[i])),
            repr(float(gt.capacity[i])),
            onset,
        ])
    return buf.getvalue()


@dataclass(frozen=True)
class TruthRecord:
    """Contents of a ``truth.csv`` file."""

    noise_free_temp: SensorSeries
    air_temp: np.ndarray
    unit_state: SensorSeries
    capacity: np.ndarray
    leak_onset: datetime | None


def parse_truth(text: str) -> TruthRecord:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRUTH_HEADER:
        raise ParseError(f"expected header {','.join(TRUTH_HEADER)}", line=1)
    body = rows[1:]
    if not body:
        raise ParseError("truth file has no rows", line=2)
    try:
        stamps = [parse_timestamp(r[0]) for r in body]
        cols = np.array([[float(x) for x in r[1:5]] for r in body])
        onset = parse_timestamp(body[0][5]) if body[0][5] else None
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed truth row ({exc})") from None
    tau = (stamps[1] - stamps[0]).total_seconds() if len(stamps) > 1 else 60.0
    mk = lambda kind, v: SensorSeries(kind, stamps[0], tau, v)
    return TruthRecord(
        mk(Kind.ROOM_TEMP, cols[:, 0]), cols[:, 1], mk(Kind.UNIT_STATE, cols[:, 2]), cols[:, 3], onset
    )


def read_truth(path: str | Path) -> TruthRecord:
    return parse_truth(Path(path).read_text(encoding="utf-8"))


def write_ground_truth(gt: GroundTruth, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, series in (
        ("room_temp.csv", gt.room_temp),
        ("external_temp.csv", gt.external_temp),
        ("door_state.csv", gt.door_state),
        ("unit_state.csv", gt.unit_state),
    ):
        write_series(out / name, series)
        paths.append(out / name)
    (out / "truth.csv").write_text(truth_csv(gt), encoding="utf-8", newline="\n")
    paths.append(out / "truth.csv")
    return paths


def manager_report_date(
    unit_state: SensorSeries, onset: datetime | None, saturation: float = 0.99
) -> date | None:
    """First day on or after ``onset`` whose compressor duty cycle reaches ``saturation``.

    This scripts a manager who only notices a leak once the unit runs flat out.
    """
    if onset is None:
        return None
    onset_day = to_utc(onset).date()
    for d, duty in sorted(_daily_mean(unit_state).items()):
        if d >= onset_day and duty >= saturation:
            return d
    return None


def breakdown_date(gt: GroundTruth, saturation: float = 0.99) -> date | None:
    return manager_report_date(gt.unit_state, gt.leak_onset, saturation)


# ------------------------------------------------------------------ library


def _fixture(outlet_id: str, seed: int, **kw) -> ScenarioConfig:
    kw.setdefault("blower_offset", FIXTURE_BLOWER_OFFSET)
    return ScenarioConfig(outlet_id=outlet_id, seed=seed, **kw)


def _leak(onset_day: float, decay: float) -> tuple[FaultInjection, ...]:
    return (FaultInjection(onset=START + timedelta(days=onset_day), decay=decay),)


def scenario_library() -> dict[str, tuple[ScenarioConfig, ...]]:
    """Canonical fixture set; most entries hold one outlet, the transfer case holds two."""
    busy = door_schedule(BUSY_DAY_RATE, BASE_NIGHT_RATE)
    return {
        "clean-30d": (_fixture("clean", 101),),
        "leak-slow": (_fixture("leak-slow", 102, faults=_leak(15, 0.08)),),
        "leak-fast": (_fixture("leak-fast", 103, faults=_leak(15, 0.25)),),
        "noisy-manager": (_fixture("noisy-manager", 104, door_rates=busy),),
        "two-outlet-transfer": (
            _fixture("outlet-a", 105),
            _fixture("outlet-b", 106, faults=_leak(15, 0.15)),
        ),
    }


# ------------------------------------------------------------ config files

_SCALARS = {
    "tau", "T_off", "T_on", "weather_min", "weather_max", "weather_peak_hour",
    "door_mean_duration", "sensor_noise_sigma", "blower_offset", "duration_days", "T_initial",
}
_PHYSICAL = {"C_r", "K_e_r", "Q_dr", "Q_ru", "eta_r"}
_OTHER = {"seed", "outlet_id", "start", "door_day_rate", "door_night_rate", "door_rates",
          "leak_onset_day", "leak_decay", "leak_repair_day"}


def scenario_from_text(text: str) -> ScenarioConfig:
    """Build a scenario from flat ``key = value`` lines.

    Accepts any scalar field of :class:`ScenarioConfig`, the room's physical
    constants, ``door_day_rate``/``door_night_rate`` (or 24 comma-separated
    ``door_rates``) and ``leak_onset_day``/``leak_decay``/``leak_repair_day``.
    """
    kv = parse_kv(text)
    unknown = sorted(set(kv) - _SCALARS - _PHYSICAL - _OTHER)
    if unknown:
        raise ParseError(f"unknown keys: {', '.join(unknown)}")
    try:
        kw: dict = {k: float(kv[k]) for k in _SCALARS & set(kv)}
        phys = {k: float(kv.get(k, getattr(CANONICAL_ROOM, k))) for k in sorted(_PHYSICAL)}
        kw["physical"] = PhysicalParams(**phys)
        if "seed" in kv:
            kw["seed"] = int(kv["seed"])
        if "outlet_id" in kv:
            kw["outlet_id"] = kv["outlet_id"]
        if "start" in kv:
            kw["start"] = parse_timestamp(kv["start"])
        if "door_rates" in kv:
            kw["door_rates"] = tuple(float(x) for x in kv["door_rates"].split(","))
        elif "door_day_rate" in kv or "door_night_rate" in kv:
            kw["door_rates"] = door_schedule(
                float(kv.get("door_day_rate", BASE_DAY_RATE)),
                float(kv.get("door_night_rate", BASE_NIGHT_RATE)),
            )
        start = kw.get("start", START)
        if "leak_onset_day" in kv:
            repair = kv.get("leak_repair_day")
            kw["faults"] = (
                FaultInjection(
                    onset=start + timedelta(days=float(kv["leak_onset_day"])),
                    decay=float(kv.get("leak_decay", 0.08)),
                    repair=None if repair is None else start + timedelta(days=float(repair)),
                ),
            )
        return ScenarioConfig(**kw)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, seed=seed)
