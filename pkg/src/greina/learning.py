"""Fitting lumped thermal parameters and bootstrapping new outlets from a fleet."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, InsufficientDataError, NoSimilarOutletError
from .estimation import estimate_unit_state
from .series import OutletRecord, SensorSeries
from .thermal import ORIGIN_FITTED, MultiZoneParams, ThermalParams, simulate_multizone

log = logging.getLogger(__name__)

N_COEF = 5
MIN_TRAINING_DAYS = 7
DEFAULT_FIT_WINDOW = 60


class RankDeficiencyWarning(UserWarning):
    """The design matrix does not identify every coefficient."""


@dataclass(frozen=True)
class DefaultThreshold:
    """Sentinel telling the monitor to use a flat boundary instead of a model."""

    value: float = 10.0


@dataclass(frozen=True)
class DoorProfile:
    median_opens: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(x) for x in self.median_opens)
        if len(v) != 24:
            raise ValueError(f"a door profile has 24 entries, got {len(v)}")
        if any(not x >= 0 for x in v):
            raise ValueError("door profile entries must be non-negative")
        object.__setattr__(self, "median_opens", v)

    def as_array(self) -> np.ndarray:
        return np.array(self.median_opens)


@dataclass(frozen=True)
class CleanDataMask:
    """Dates excluded from training, typically those the monitor flagged."""

    excluded: frozenset[date] = frozenset()

    @classmethod
    def of(cls, days: Iterable[date]) -> CleanDataMask:
        return cls(frozenset(days))

    def allows(self, dates: np.ndarray) -> np.ndarray:
        """Boolean per sample for an array of ``datetime64[D]`` dates."""
        if not self.excluded:
            return np.ones(len(dates), dtype=bool)
        banned = np.array(sorted(self.excluded), dtype="datetime64[D]")
        return ~np.isin(dates, banned)


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    tol: float = 1e-6
    patience: int = 5
    seed: int = 0


@dataclass(frozen=True)
class FitReport:
    params: ThermalParams
    training_rows: int
    residual_mae: float
    epochs: int
    mode: str = "closed_form"


@dataclass(frozen=True)
class FleetEntry:
    outlet_id: str
    door_profile: DoorProfile | None
    params: ThermalParams | None


# ------------------------------------------------------------ design matrix


def _window_mean(col: np.ndarray, w: int) -> np.ndarray:
    if w == 1:
        return col.copy()
    return sliding_window_view(col, w).mean(axis=-1)


def _window_all(ok: np.ndarray, w: int) -> np.ndarray:
    if w == 1:
        return ok.copy()
    return sliding_window_view(ok, w).all(axis=-1)


def build_design_matrix(
    T_r: SensorSeries,
    T_e: SensorSeries,
    S_d: SensorSeries,
    S_ru: SensorSeries,
    mask: CleanDataMask | None = None,
    window: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Regression rows ``[T_r, T_e, S_d, S_ru, 1] -> next T_r``.

    With ``window > 1`` every column is first replaced by its trailing
    ``window``-sample moving average.  The model is linear, so the averaged
    data obey the same one-step relation, while sensor noise on the
    regressors is strongly reduced.  A row is kept only when each raw sample
    it draws on is present and none falls on a masked day.
    """
    n = len(T_r)
    if not (len(T_e) == len(S_d) == len(S_ru) == n):
        raise ValueError("build_design_matrix needs aligned series")
    if not (T_r.start == T_e.start == S_d.start == S_ru.start):
        raise ValueError("build_design_matrix needs aligned series")
    if window < 1:
        raise ValueError("window must be at least 1")
    w = int(window)
    if n < w + 1:
        raise InsufficientDataError("insufficient clean data")

    allowed = (mask or CleanDataMask()).allows(T_r.dates())
    t_ok = ~np.isnan(T_r.values) & allowed
    x_ok = t_ok.copy()
    for s in (T_e, S_d, S_ru):
        x_ok &= ~np.isnan(s.values)

    # row t uses inputs over [t, t+w) and room temperature over [t, t+w]
    rows = _window_all(x_ok, w)[:-1] & _window_all(t_ok, w + 1)
    cols = [np.nan_to_num(s.values) for s in (T_r, T_e, S_d, S_ru)]
    means = [_window_mean(c, w) for c in cols]
    X = np.column_stack([m[:-1] for m in means] + [np.ones(n - w)])[rows]
    y = means[0][1:][rows]
    if len(y) == 0:
        raise InsufficientDataError("insufficient clean data")
    return X, y


# ------------------------------------------------------------------ fitting


def _closed_form(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    theta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        warnings.warn(
            f"design matrix has rank {rank} < {X.shape[1]}; returning the minimum-norm solution",
            RankDeficiencyWarning,
            stacklevel=3,
        )
    return theta


def _sgd(X: np.ndarray, y: np.ndarray, theta0: np.ndarray, cfg: SGDConfig) -> tuple[np.ndarray, int]:
    # features standardised, constant column left as the intercept
    m = X[:, :-1].mean(axis=0)
    s = X[:, :-1].std(axis=0)
    s = np.where(s > 0, s, 1.0)
    Z = (X[:, :-1] - m) / s
    w = theta0[:-1] * s
    b = theta0[-1] + theta0[:-1] @ m
    rng = np.random.default_rng(cfg.seed)
    n = len(y)

    def loss(w, b):
        r = Z @ w + b - y
        return float(r @ r) / n

    prev = loss(w, b)
    rises = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.learning_rate / np.sqrt(epoch)
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            r = Z[idx] @ w + b - y[idx]
            w = w - lr * 2.0 * (Z[idx].T @ r) / len(idx)
            b = b - lr * 2.0 * r.mean()
        cur = loss(w, b)
        if not np.isfinite(cur):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        if cur > prev:
            rises += 1
            if rises >= cfg.patience:
                raise DivergenceError(f"loss increased for {rises} consecutive epochs")
        else:
            rises = 0
        improved = prev - cur
        prev = cur
        if 0 <= improved < cfg.tol:
            break
    theta = np.empty(N_COEF)
    theta[:-1] = w / s
    theta[-1] = b - (w / s) @ m
    return theta, epoch


def fit_parameters(
    X: np.ndarray,
    y: np.ndarray,
    mode: str = "closed_form",
    prior: ThermalParams | None = None,
    tau: float | None = None,
    trained_at: datetime | None = None,
    sgd: SGDConfig = SGDConfig(),
) -> FitReport:
    """Least-squares fit of the five lumped coefficients.

    ``closed_form`` solves ordinary least squares (minimum-norm when the
    columns are dependent, with a :class:`RankDeficiencyWarning`).  ``sgd``
    runs mini-batch gradient descent warm-started from ``prior`` or, failing
    that, from the closed-form solution.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] != N_COEF or len(y) != len(X):
        raise ValueError(f"X must be (n, {N_COEF}) and y length n")
    if len(y) < N_COEF:
        raise InsufficientDataError(f"need at least {N_COEF} rows, got {len(y)}")
    if tau is None:
        tau = prior.tau if prior is not None else 60.0
    epochs = 0
    if mode == "closed_form":
        theta = _closed_form(X, y)
    elif mode == "sgd":
        theta0 = prior.theta if prior is not None else _closed_form(X, y)
        theta, epochs = _sgd(X, y, theta0, sgd)
    else:
        raise ValueError(f"unknown fit mode {mode!r}")
    params = ThermalParams.from_theta(
        theta,
        tau=tau,
        trained_at=trained_at or datetime.now(timezone.utc).replace(microsecond=0),
        origin=ORIGIN_FITTED,
    )
    mae = float(np.abs(X @ theta - y).mean())
    return FitReport(params, len(y), mae, epochs, mode)


def update_monthly(
    existing: FitReport,
    X: np.ndarray | None,
    y: np.ndarray | None,
    trained_at: datetime | None = None,
    sgd: SGDConfig = SGDConfig(),
) -> FitReport:
    """Refine ``existing`` with SGD over a new month of clean rows.

    Too few rows leaves the existing report in place.
    """
    if X is None or y is None or len(y) < N_COEF:
        log.warning("monthly update skipped: %d clean rows", 0 if y is None else len(y))
        return existing
    return fit_parameters(
        X, y, mode="sgd", prior=existing.params, tau=existing.params.tau,
        trained_at=trained_at, sgd=sgd,
    )


def clean_days(T_r: SensorSeries, mask: CleanDataMask | None = None) -> int:
    dates = T_r.dates()[~np.isnan(T_r.values)]
    allowed = (mask or CleanDataMask()).allows(dates)
    return int(np.unique(dates[allowed]).size)


def fit_outlet(
    record: OutletRecord,
    mask: CleanDataMask | None = None,
    mode: str = "closed_form",
    prior: ThermalParams | None = None,
    window: int = DEFAULT_FIT_WINDOW,
    min_days: int = MIN_TRAINING_DAYS,
    trained_at: datetime | None = None,
    sgd: SGDConfig = SGDConfig(),
) -> FitReport:
    """Clean-mask, estimate compressor state when unmeasured, then fit."""
    rec = record.aligned()
    unit = rec.unit_state if rec.unit_state is not None else estimate_unit_state(rec.room_temp)
    days = clean_days(rec.room_temp, mask)
    if days < min_days:
        raise InsufficientDataError(f"insufficient clean data: {days} clean days, need {min_days}")
    X, y = build_design_matrix(rec.room_temp, rec.external_temp, rec.door_state, unit, mask, window)
    return fit_parameters(X, y, mode, prior, rec.room_temp.tau, trained_at, sgd)


# ----------------------------------------------------------------- transfer


def door_profile(S_d: SensorSeries) -> DoorProfile:
    """Median count of door openings (0 -> 1 transitions) per clock hour over full days."""
    n = len(S_d)
    if n < 2:
        raise InsufficientDataError("door profile needs at least one full day")
    v = S_d.values
    opens = np.zeros(n, dtype=bool)
    opens[1:] = (v[:-1] == 0) & (v[1:] == 1)
    secs = S_d.epoch_seconds()
    day = np.floor(secs / 86400 + 1e-9).astype("int64")
    hour = (np.floor(secs / 3600 + 1e-9).astype("int64")) % 24
    first_full = int(np.ceil(S_d.start.timestamp() / 86400 - 1e-9))
    last_full = int(np.floor(S_d.end.timestamp() / 86400 + 1e-9)) - 1
    if last_full < first_full:
        raise InsufficientDataError("door profile needs at least one full day")
    counts = np.zeros((last_full - first_full + 1, 24))
    sel = opens & (day >= first_full) & (day <= last_full)
    np.add.at(counts, (day[sel] - first_full, hour[sel]), 1)
    return DoorProfile(tuple(np.median(counts, axis=0)))


def profile_distance(a: DoorProfile, b: DoorProfile) -> float:
    d = a.as_array() - b.as_array()
    return float(d @ d)


def rank_similar(
    new_profile: DoorProfile, candidates: Mapping[str, DoorProfile]
) -> list[tuple[str, float]]:
    if not candidates:
        raise NoSimilarOutletError("no candidate outlets to compare against")
    scores = [(oid, profile_distance(p, new_profile)) for oid, p in candidates.items()]
    return sorted(scores, key=lambda item: (item[1], item[0]))


def initialize_outlet(
    new_profile: DoorProfile, fleet: Mapping[str, FleetEntry]
) -> ThermalParams | DefaultThreshold:
    """Parameters of the most similar fitted outlet, else the flat 10 degree boundary."""
    profiles = {oid: e.door_profile for oid, e in fleet.items() if e.door_profile is not None}
    try:
        ranked = rank_similar(new_profile, profiles)
    except NoSimilarOutletError:
        return DefaultThreshold()
    for oid, _ in ranked:
        params = fleet[oid].params
        if params is not None and params.origin == ORIGIN_FITTED:
            return params.transferred(oid)
    return DefaultThreshold()


# ------------------------------------------------------ multi-zone (experimental)

_MZ_FIELDS = [
    "C_w", "C_r1", "C_r2", "C_r3", "K_w_r1", "K_w_r2", "K_w_r3", "K_e_r1", "K_e_r2",
    "K_e_r3", "K_e_w", "K_r1_r2", "K_r2_r3", "eta_r1", "eta_r2", "eta_r3", "Q_ac", "Q_oc",
]


@dataclass
class MultiZoneFit:
    params: MultiZoneParams
    rmse: float
    evaluations: int
    extras: dict = field(default_factory=dict)


def fit_multizone(
    T_r1: np.ndarray,
    T_e: np.ndarray,
    S_ac: np.ndarray,
    S_oc: np.ndarray,
    initial: MultiZoneParams,
    experimental: bool = False,
    max_nfev: int = 200,
) -> MultiZoneFit:
    """Simulation-error least squares over all 18 multi-zone parameters.

    Only the r1 temperature is observed, so latent-node parameters are
    generally not identifiable; results are for exploration only and the
    call must opt in with ``experimental=True``.
    """
    if not experimental:
        raise RuntimeError("fit_multizone is experimental; pass experimental=True")
    from scipy.optimize import least_squares

    T_r1 = np.asarray(T_r1, dtype=float)
    x0 = np.array([getattr(initial, k) for k in _MZ_FIELDS])
    lo = np.array([1e-9 if k.startswith("C_") else 0.0 if k.startswith("K_") else -np.inf for k in _MZ_FIELDS])
    hi = np.full(len(x0), np.inf)
    x0 = np.clip(x0, lo + 1e-12, None)

    def residual(x):
        try:
            p = MultiZoneParams(**dict(zip(_MZ_FIELDS, x)), tau=initial.tau)
            traj = simulate_multizone(p, T_r1[0], T_e, S_ac, S_oc)
        except Exception:
            return np.full(len(T_r1), 1e3)
        r = traj[:, 1] - T_r1
        return np.where(np.isfinite(r), r, 1e3)

    res = least_squares(residual, x0, bounds=(lo, hi), x_scale="jac", max_nfev=max_nfev)
    params = MultiZoneParams(**dict(zip(_MZ_FIELDS, res.x)), tau=initial.tau)
    rmse = float(np.sqrt(np.mean(res.fun ** 2)))
    return MultiZoneFit(params, rmse, int(res.nfev), {"status": int(res.status)})
