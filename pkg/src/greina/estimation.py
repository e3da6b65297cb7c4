"""Compressor on/off reconstruction from room temperature alone.

Step changes between consecutive samples are split into three groups with a
deterministic one-dimensional k-means: sharp drops (compressor switching on),
sharp rises (switching off) and everything else.  The drop/rise events are
then replayed through a two-state machine.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import InsufficientDataError
from .series import DEFAULT_TAU, EPOCH, Kind, SensorSeries

MAX_ITER = 100


class EventClass(str, enum.Enum):
    SHARP_DROP = "sharp_drop"
    NORMAL = "normal"
    SHARP_RISE = "sharp_rise"


@dataclass(frozen=True)
class TempEvent:
    """A classified temperature change.

    ``index`` is the sample at which the new level is first seen, i.e. the
    later sample of the pair.
    """

    index: int
    delta: float
    cls: EventClass


def compute_deltas(T_r: SensorSeries) -> list[tuple[int, float]]:
    """``(i, T[i+1] - T[i])`` for every pair of adjacent present samples."""
    v = T_r.values
    if np.count_nonzero(~np.isnan(v)) < 2:
        raise InsufficientDataError("need at least two present samples to compute deltas")
    d = np.diff(v)
    idx = np.flatnonzero(~np.isnan(d))
    return list(zip(idx.tolist(), d[idx].tolist()))


def kmeans_1d(values: np.ndarray, max_iter: int = MAX_ITER) -> tuple[np.ndarray, np.ndarray]:
    """Three-cluster k-means on a 1-D array.

    Centroids start at the minimum, median and maximum.  Returns
    ``(labels, centroids)`` with labels 0/1/2 ordered by centroid.  The
    computation runs on the sorted values, so labels depend only on the
    multiset of inputs and not on their order.
    """
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    v = values[order]
    c = np.array([v[0], np.median(v), v[-1]])
    lab = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(v[:, None] - c[None, :]), axis=1)
        if lab is not None and np.array_equal(new, lab):
            break
        lab = new
        for j in range(3):
            members = v[lab == j]
            if members.size:
                c[j] = members.mean()
    rank = np.empty(3, dtype=int)
    rank[np.argsort(c, kind="stable")] = np.arange(3)
    out = np.empty(len(v), dtype=int)
    out[order] = rank[lab]
    return out, np.sort(c)


_CLASSES = (EventClass.SHARP_DROP, EventClass.NORMAL, EventClass.SHARP_RISE)


def classify_events(deltas: list[tuple[int, float]]) -> list[TempEvent]:
    """Label each delta; event indices refer to the later sample of each pair."""
    if not deltas:
        return []
    idx = np.array([i for i, _ in deltas], dtype=int)
    vals = np.array([d for _, d in deltas], dtype=float)
    distinct = np.unique(vals)
    if distinct.size == 1:
        labels = np.ones(len(vals), dtype=int)
    elif distinct.size == 2:
        # k-means would park one value in the middle cluster; extremes win here
        labels = np.where(vals == distinct[0], 0, 2)
    else:
        labels, _ = kmeans_1d(vals)
    return [
        TempEvent(int(i) + 1, float(d), _CLASSES[k])
        for i, d, k in zip(idx.tolist(), vals.tolist(), labels.tolist())
    ]


def sequence_states(
    events: list[TempEvent],
    length: int,
    start: datetime = EPOCH,
    tau: float = DEFAULT_TAU,
) -> SensorSeries:
    """Rebuild the 0/1 compressor vector from classified events.

    A drop opens an ON interval and the next rise closes it.  Repeated events
    of one type collapse.  Before the first event the state is the opposite
    of what that event implies; with no events the unit is OFF throughout.
    """
    out = np.zeros(length)
    marks = sorted(
        (e for e in events if e.cls is not EventClass.NORMAL and 0 <= e.index < length),
        key=lambda e: e.index,
    )
    if not marks:
        return SensorSeries(Kind.UNIT_STATE, start, tau, out)
    state = 0 if marks[0].cls is EventClass.SHARP_DROP else 1
    pos = 0
    for e in marks:
        target = 1 if e.cls is EventClass.SHARP_DROP else 0
        if target == state:
            continue
        out[pos:e.index] = state
        pos, state = e.index, target
    out[pos:] = state
    return SensorSeries(Kind.UNIT_STATE, start, tau, out)


def estimate_unit_state(T_r: SensorSeries) -> SensorSeries:
    events = classify_events(compute_deltas(T_r))
    return sequence_states(events, len(T_r), T_r.start, T_r.tau)


def on_intervals(state: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``[lo, hi)`` runs where ``state`` is 1."""
    s = np.concatenate(([0], (np.asarray(state) == 1).astype(int), [0]))
    edges = np.diff(s)
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))
