"""Lumped single-zone cold-room model and the four-node multi-zone variant.

The single-zone model advances room temperature one interval ``tau`` at a
time::

    T[t+1] = mu_r*T[t] + mu_e*Te[t] + mu_dr*Sd[t] + mu_ru*Sru[t] + eta'

where the coefficients absorb the room's heat capacity and the interval
length into its physical conductance and heat flows.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ParseError, SimulationError, ThermalInstabilityError
from .kvfile import parse_kv
from .series import Kind, SensorSeries, format_timestamp, parse_timestamp

ORIGIN_FITTED = "fitted"
ORIGIN_DEFAULT = "default"
_TRANSFER_PREFIX = "transferred:"


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of a room: kJ/K for capacity, kW and kW/K otherwise."""

    C_r: float
    K_e_r: float
    Q_dr: float
    Q_ru: float
    eta_r: float

    def __post_init__(self):
        if not self.C_r > 0:
            raise ValueError(f"C_r must be positive, got {self.C_r}")
        if not self.K_e_r >= 0:
            raise ValueError(f"K_e_r must be non-negative, got {self.K_e_r}")


@dataclass(frozen=True)
class ThermalParams:
    mu_r: float
    mu_e: float
    mu_dr: float
    mu_ru: float
    eta_prime: float
    tau: float
    trained_at: datetime | None = None
    origin: str = ORIGIN_FITTED

    COEFFICIENTS = ("mu_r", "mu_e", "mu_dr", "mu_ru", "eta_prime")

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (
            self.origin in (ORIGIN_FITTED, ORIGIN_DEFAULT)
            or (self.origin.startswith(_TRANSFER_PREFIX) and len(self.origin) > len(_TRANSFER_PREFIX))
        ):
            raise ValueError(f"unknown origin {self.origin!r}")

    @property
    def theta(self) -> np.ndarray:
        """Coefficients in design-matrix column order."""
        return np.array([getattr(self, k) for k in self.COEFFICIENTS])

    @classmethod
    def from_theta(cls, theta, tau: float, **meta) -> ThermalParams:
        return cls(*(float(v) for v in theta), tau=tau, **meta)

    @property
    def transferred_from(self) -> str | None:
        if self.origin.startswith(_TRANSFER_PREFIX):
            return self.origin[len(_TRANSFER_PREFIX):]
        return None

    def transferred(self, outlet_id: str) -> ThermalParams:
        return replace(self, origin=_TRANSFER_PREFIX + outlet_id)


def transferred_origin(outlet_id: str) -> str:
    return _TRANSFER_PREFIX + outlet_id


def lump_parameters(p: PhysicalParams, tau: float) -> ThermalParams:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    ratio = tau / p.C_r
    mu_e = p.K_e_r * ratio
    if mu_e >= 1:
        raise ThermalInstabilityError(
            f"tau*K_e_r/C_r = {mu_e:g} >= 1: explicit update is non-physical at tau={tau:g} s"
        )
    return ThermalParams(
        mu_r=1.0 - mu_e,
        mu_e=mu_e,
        mu_dr=p.Q_dr * ratio,
        mu_ru=p.Q_ru * ratio,
        eta_prime=p.eta_r * ratio,
        tau=tau,
        origin=ORIGIN_DEFAULT,
    )


def unlump(params: ThermalParams, C_r: float) -> PhysicalParams:
    """Invert :func:`lump_parameters` given the room's heat capacity."""
    scale = C_r / params.tau
    return PhysicalParams(
        C_r=C_r,
        K_e_r=params.mu_e * scale,
        Q_dr=params.mu_dr * scale,
        Q_ru=params.mu_ru * scale,
        eta_r=params.eta_prime * scale,
    )


def predict_step(params: ThermalParams, T_r, T_e, S_d, S_ru):
    """One-step-ahead room temperature; broadcasts over array inputs."""
    return (
        params.mu_r * T_r
        + params.mu_e * T_e
        + params.mu_dr * S_d
        + params.mu_ru * S_ru
        + params.eta_prime
    )


def simulate_series(
    params: ThermalParams,
    T_r0: float,
    T_e: SensorSeries,
    S_d: SensorSeries,
    S_ru: SensorSeries,
    anchor: SensorSeries | None = None,
) -> SensorSeries:
    """Free-run the model from ``T_r0`` over aligned exogenous inputs.

    A step whose inputs are missing makes the following estimate missing.
    Once inputs are present again the run restarts from the most recent
    measured room temperature in ``anchor`` (or, without it, from the last
    estimate before the gap).
    """
    n = len(T_e)
    if len(S_d) != n or len(S_ru) != n or (anchor is not None and len(anchor) != n):
        raise SimulationError("simulate_series needs aligned inputs of equal length")
    if not math.isfinite(T_r0):
        raise SimulationError("initial room temperature must be finite")
    inputs = np.column_stack([T_e.values, S_d.values, S_ru.values])
    if n and np.isnan(inputs).any(axis=1).all():
        raise SimulationError("all exogenous inputs are missing")
    out, _ = free_run(
        params, T_r0, inputs, None if anchor is None else anchor.values, follow_estimate=anchor is None
    )
    return SensorSeries(Kind.ROOM_TEMP, T_e.start, T_e.tau, out)


def free_run(
    params: ThermalParams,
    x0: float,
    inputs: np.ndarray,
    measured: np.ndarray | None = None,
    last_measured: float = math.nan,
    follow_estimate: bool = False,
) -> tuple[np.ndarray, float]:
    """Core loop behind :func:`simulate_series`.

    ``inputs`` is an ``(n, 3)`` array of ``T_e, S_d, S_ru``.  ``x0`` may be NaN,
    in which case the run starts at the first step with present inputs and a
    known measured temperature.  Returns the estimates and the value the
    model predicts for the step after the last one, so a caller can continue
    the run later.
    """
    mu_r, mu_e, mu_dr, mu_ru, eta = params.theta.tolist()
    n = len(inputs)
    ok = (~np.isnan(inputs).any(axis=1)).tolist()
    te, sd, sru = (inputs[:, j].tolist() for j in range(3))
    meas = measured.tolist() if measured is not None else None

    out = [math.nan] * n
    x = float(x0)
    last_meas = float(last_measured)
    last_est = x
    for t in range(n):
        if meas is not None and meas[t] == meas[t]:
            last_meas = meas[t]
        if x != x and ok[t]:
            x = last_est if follow_estimate else last_meas
        out[t] = x
        if x == x:
            last_est = x
            if ok[t]:
                x = mu_r * x + mu_e * te[t] + mu_dr * sd[t] + mu_ru * sru[t] + eta
            else:
                x = math.nan
    return np.array(out), x


# --------------------------------------------------------------- multi-zone


@dataclass(frozen=True)
class MultiZoneParams:
    """Wall node plus three air regions; r1 holds the cooler, r2 the occupancy."""

    C_w: float
    C_r1: float
    C_r2: float
    C_r3: float
    K_w_r1: float
    K_w_r2: float
    K_w_r3: float
    K_e_r1: float
    K_e_r2: float
    K_e_r3: float
    K_e_w: float
    K_r1_r2: float
    K_r2_r3: float
    eta_r1: float
    eta_r2: float
    eta_r3: float
    Q_ac: float
    Q_oc: float
    tau: float = 60.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("C_") and not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
            if f.name.startswith("K_") and not v >= 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def node_loads(self) -> dict[str, float]:
        """Total conductance out of each node times tau over its capacity."""
        t = self.tau
        return {
            "wall": (self.K_e_w + self.K_w_r1 + self.K_w_r2 + self.K_w_r3) * t / self.C_w,
            "r1": (self.K_e_r1 + self.K_w_r1 + self.K_r1_r2) * t / self.C_r1,
            "r2": (self.K_e_r2 + self.K_w_r2 + self.K_r1_r2 + self.K_r2_r3) * t / self.C_r2,
            "r3": (self.K_e_r3 + self.K_w_r3 + self.K_r2_r3) * t / self.C_r3,
        }

    def check_stable(self) -> None:
        for node, load in self.node_loads().items():
            if load >= 1:
                raise ThermalInstabilityError(
                    f"node {node}: tau*sum(K)/C = {load:g} >= 1 at tau={self.tau:g} s"
                )


@dataclass(frozen=True)
class MultiZoneState:
    T_w: float
    T_r1: float
    T_r2: float
    T_r3: float

    @classmethod
    def uniform(cls, T: float) -> MultiZoneState:
        return cls(T, T, T, T)


def multizone_step(
    params: MultiZoneParams, state: MultiZoneState, T_e: float, S_ac: float, S_oc: float
) -> MultiZoneState:
    p, s = params, state
    p.check_stable()
    w, r1, r2, r3 = s.T_w, s.T_r1, s.T_r2, s.T_r3
    q_w = p.K_e_w * (T_e - w) + p.K_w_r1 * (r1 - w) + p.K_w_r2 * (r2 - w) + p.K_w_r3 * (r3 - w)
    q_1 = (
        p.K_e_r1 * (T_e - r1)
        + p.K_w_r1 * (w - r1)
        + p.K_r1_r2 * (r2 - r1)
        + p.Q_ac * S_ac
        + p.eta_r1
    )
    q_2 = (
        p.K_e_r2 * (T_e - r2)
        + p.K_w_r2 * (w - r2)
        + p.K_r1_r2 * (r1 - r2)
        + p.K_r2_r3 * (r3 - r2)
        + p.Q_oc * S_oc
        + p.eta_r2
    )
    # r3 exchanges with r2 in the same sense as every other coupling
    q_3 = p.K_e_r3 * (T_e - r3) + p.K_w_r3 * (w - r3) + p.K_r2_r3 * (r2 - r3) + p.eta_r3
    t = p.tau
    return MultiZoneState(
        T_w=w + q_w * t / p.C_w,
        T_r1=r1 + q_1 * t / p.C_r1,
        T_r2=r2 + q_2 * t / p.C_r2,
        T_r3=r3 + q_3 * t / p.C_r3,
    )


def simulate_multizone(
    params: MultiZoneParams,
    T_r1_0: float,
    T_e: np.ndarray,
    S_ac: np.ndarray,
    S_oc: np.ndarray,
    initial: MultiZoneState | None = None,
) -> np.ndarray:
    """Iterate :func:`multizone_step`; returns an ``(n, 4)`` array of node temperatures.

    Latent nodes start at ``T_r1_0`` unless ``initial`` is given.
    """
    params.check_stable()
    state = initial or MultiZoneState.uniform(T_r1_0)
    n = len(T_e)
    out = np.empty((n, 4))
    for t in range(n):
        out[t] = (state.T_w, state.T_r1, state.T_r2, state.T_r3)
        state = multizone_step(params, state, float(T_e[t]), float(S_ac[t]), float(S_oc[t]))
    return out


# ------------------------------------------------------------ params files


def _floats(cls, kv: dict[str, str], optional=()) -> dict:
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(kv) - set(names))
    if unknown:
        raise ParseError(f"unknown keys: {', '.join(unknown)}")
    missing = [k for k in names if k not in kv and k not in optional]
    if missing:
        raise ParseError(f"missing keys: {', '.join(missing)}")
    out = {}
    for k, v in kv.items():
        if k in optional:
            continue
        try:
            out[k] = float(v)
        except ValueError:
            raise ParseError(f"{k}: not a number: {v!r}") from None
    return out


def params_to_text(params: ThermalParams | MultiZoneParams) -> str:
    lines = []
    for k, v in asdict(params).items():
        if k == "trained_at":
            if v is None:
                continue
            v = format_timestamp(v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> ThermalParams:
    kv = parse_kv(text)
    values = _floats(ThermalParams, kv, optional=("trained_at", "origin"))
    trained_at = None
    if "trained_at" in kv:
        try:
            trained_at = parse_timestamp(kv["trained_at"])
        except ValueError:
            raise ParseError(f"trained_at: bad timestamp {kv['trained_at']!r}") from None
    try:
        return ThermalParams(**values, trained_at=trained_at, origin=kv.get("origin", ORIGIN_FITTED))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def multizone_from_text(text: str) -> MultiZoneParams:
    values = _floats(MultiZoneParams, parse_kv(text))
    try:
        return MultiZoneParams(**values)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def read_params(path: str | Path) -> ThermalParams:
    return params_from_text(Path(path).read_text(encoding="utf-8"))


def write_params(path: str | Path, params: ThermalParams | MultiZoneParams) -> None:
    Path(path).write_text(params_to_text(params), encoding="utf-8", newline="\n")
