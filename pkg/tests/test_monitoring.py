import itertools
import math
from dataclasses import replace
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_config, monitor_start, record_of, trained
from greina.errors import ParseError
from greina.learning import DefaultThreshold
from greina.monitoring import (
    BucketState,
    HourVerdict,
    Label,
    MonitorConfig,
    MonitorState,
    alert_hours,
    alerts_to_csv,
    decision_boundary,
    first_label_hour,
    flagged_days,
    monitor_hour,
    parse_verdicts,
    run_monitor,
    state_from_dict,
    state_to_dict,
    update_bucket,
    verdicts_to_csv,
)
from greina.simulator import FaultInjection, ScenarioConfig, FIXTURE_BLOWER_OFFSET

T0 = datetime(2024, 3, 1, tzinfo=timezone.utc)
H = timedelta(hours=1)


class TestBoundary:
    def test_sum(self):
        assert decision_boundary(6.5, 0.8) == pytest.approx(7.3)

    def test_zero_sigma(self):
        assert decision_boundary(6.5, 0.0) == 6.5

    @given(st.floats(-50, 50), st.floats(0, 10))
    def test_default_threshold_ignores_inputs(self, t, s):
        assert decision_boundary(t, s, DefaultThreshold()) == 10.0

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            decision_boundary(6.5, -0.1)


def reference_bucket(b, lock, label, verdict, h_mon, b_leak):
    """The automaton written out case by case."""
    if verdict == "missing":
        return b, lock, label
    if verdict == "above":
        b, lock = b + 1, h_mon
    else:
        lock = lock - 1 if lock > 0 else 0
        if lock == 0:
            b = 0
        elif b > 0:
            b = b - 1
    if b >= b_leak:
        label = "leaking"
    if b == 0:
        label = "normal"
    return b, lock, label


class TestBucket:
    def test_increment(self):
        s = update_bucket(BucketState(0, 0), 8.1, 7.3, h_mon=6)
        assert (s.b, s.lock) == (1, 6)

    def test_reset(self):
        s = update_bucket(BucketState(3, 1), 6.0, 7.3)
        assert (s.b, s.lock) == (0, 0)

    def test_missing_unchanged(self):
        st_ = BucketState(2, 4, Label.NORMAL, T0)
        assert update_bucket(st_, None, 7.3, hour=T0 + H) == st_
        assert update_bucket(st_, 8.0, math.nan, hour=T0 + H) == st_

    def test_equal_is_not_anomalous(self):
        assert update_bucket(BucketState(0, 0), 7.3, 7.3).b == 0

    @pytest.mark.parametrize("h_mon,b_leak", [(1, 1), (3, 4), (6, 36)])
    def test_exhaustive_table(self, h_mon, b_leak):
        for b, lock, label, verdict in itertools.product(
            range(b_leak + 3), range(h_mon + 1), ("normal", "leaking"), ("above", "below", "missing")
        ):
            T = {"above": 9.0, "below": 5.0, "missing": None}[verdict]
            got = update_bucket(BucketState(b, lock, Label(label)), T, 7.0, h_mon, b_leak)
            assert (got.b, got.lock, got.label.value) == reference_bucket(b, lock, label, verdict, h_mon, b_leak)

    def test_label_hysteresis(self):
        s = BucketState()
        for _ in range(36):
            s = update_bucket(s, 9.0, 7.0)
        assert s.label is Label.LEAKING
        s = update_bucket(s, 5.0, 7.0)
        assert s.b == 35 and s.label is Label.LEAKING
        for _ in range(5):
            s = update_bucket(s, 5.0, 7.0)
        assert s.b == 0 and s.label is Label.NORMAL

    @given(st.lists(st.sampled_from(["above", "below", "missing"]), max_size=200))
    def test_invariants(self, seq):
        s = BucketState()
        since_reset = 0
        history = 0
        for v in seq:
            T = {"above": 9.0, "below": 5.0, "missing": None}[v]
            s = update_bucket(s, T, 7.0)
            if v == "above":
                since_reset += 1
            if v != "missing":
                history += 1
            if s.b == 0:
                since_reset = 0
                history = 0
            assert s.b >= 0 and s.lock >= 0
            assert s.b <= since_reset
            if s.label is Label.LEAKING:
                assert history >= 36

    def test_validation(self):
        with pytest.raises(ValueError):
            BucketState(-1, 0)
        with pytest.raises(ValueError):
            MonitorConfig(b_leak=0)


def verdict(hour, label, b=0):
    return HourVerdict(hour, 6.0, 7.0, False, BucketState(b, 0, label, hour))


class TestFlaggedDays:
    def test_none(self):
        assert flagged_days([verdict(T0 + k * H, Label.NORMAL) for k in range(30)]) == []

    def test_span(self):
        vs = [verdict(T0 + k * H, Label.LEAKING if 20 <= k < 60 else Label.NORMAL) for k in range(80)]
        assert flagged_days(vs) == [date(2024, 3, 1), date(2024, 3, 2), date(2024, 3, 3)]

    def test_resolved_mid_day(self):
        vs = [verdict(T0 + k * H, Label.LEAKING if k < 3 else Label.NORMAL) for k in range(24)]
        assert flagged_days(vs) == [date(2024, 3, 1)]

    def test_alert_hours_only_on_transition(self):
        labels = [Label.NORMAL, Label.LEAKING, Label.LEAKING, Label.NORMAL, Label.LEAKING]
        vs = [verdict(T0 + k * H, l) for k, l in enumerate(labels)]
        assert [v.hour for v in alert_hours(vs)] == [T0 + H, T0 + 4 * H]
        assert [v.hour for v in alert_hours(vs[1:], before=BucketState(label=Label.LEAKING))] == [T0 + 4 * H]
        assert first_label_hour(vs) == T0 + H


# -------------------------------------------------------------- closed loop

SHORT = replace(ScenarioConfig(), duration_days=3, seed=21, blower_offset=FIXTURE_BLOWER_OFFSET)


def short_record():
    from conftest import ground_truth

    return record_of(ground_truth(SHORT))


class TestMonitorHour:
    def test_clean_hour_normal(self):
        gt, params = trained(fixture_config("clean-30d"))
        v, _ = monitor_hour(record_of(gt), monitor_start(gt.config) + 5 * H, params)
        assert v.anomalous is False and v.bucket_after.b == 0
        assert v.T_hat_h == pytest.approx(v.T_tilde_h + v.sigma_h)

    def test_sparse_hour_indeterminate(self):
        rec = short_record()
        v = rec.room_temp.values.copy()
        v[60:100] = np.nan  # hour 1 keeps 20 samples
        rec = replace(rec, room_temp=rec.room_temp.with_values(v))
        before = MonitorState(BucketState(2, 3, Label.NORMAL, T0))
        verdict_, after = monitor_hour(rec, T0 + H, SHORT.lumped, before)
        assert verdict_.anomalous is None and verdict_.T_r_h is None
        assert after.bucket == before.bucket

    def test_simulation_failure_indeterminate(self):
        bad = replace(SHORT.lumped, mu_r=1e200)
        rec = short_record()
        state = MonitorState(BucketState(1, 2), carry=1e200)
        v, after = monitor_hour(rec, T0 + 2 * H, bad, state)
        assert v.anomalous is None and after.bucket == state.bucket

    def test_default_threshold(self):
        rec = short_record()
        v, _ = monitor_hour(rec, T0 + 3 * H, DefaultThreshold())
        assert v.T_hat_h == 10.0 and v.anomalous is (v.T_r_h > 10.0)

    def test_estimates_state_when_unit_missing(self):
        rec = replace(short_record(), unit_state=None)
        v, _ = monitor_hour(rec, T0 + 4 * H, SHORT.lumped)
        assert v.T_tilde_h is not None


class TestRunMonitor:
    def test_deterministic(self):
        rec = short_record()
        a = run_monitor(rec, SHORT.lumped)
        b = run_monitor(rec, SHORT.lumped)
        assert a.verdicts == b.verdicts and a.state == b.state

    def test_only_complete_hours(self):
        rec = short_record()
        rec = replace(rec, **{k: getattr(rec, k).slice(0, 150) for k in ("room_temp", "external_temp", "door_state", "unit_state")})
        run = run_monitor(rec, SHORT.lumped)
        assert [v.hour for v in run.verdicts] == [T0, T0 + H]
        assert run.state.next_hour == T0 + 2 * H

    def test_until(self):
        run = run_monitor(short_record(), SHORT.lumped, until=T0 + 5 * H + timedelta(minutes=30))
        assert len(run.verdicts) == 5

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.integers(1, 71), min_size=1, max_size=3, unique=True))
    def test_split_runs_identical(self, cuts):
        rec = short_record()
        whole = run_monitor(rec, SHORT.lumped)
        state, verdicts = None, []
        for c in sorted(cuts) + [None]:
            part = run_monitor(rec, SHORT.lumped, state, until=None if c is None else T0 + c * H)
            verdicts += part.verdicts
            state = part.state
        assert verdicts == whole.verdicts
        assert state == whole.state

    def test_state_survives_serialisation(self):
        rec = short_record()
        whole = run_monitor(rec, SHORT.lumped)
        first = run_monitor(rec, SHORT.lumped, until=T0 + 30 * H)
        restored = state_from_dict(state_to_dict(first.state))
        rest = run_monitor(rec, SHORT.lumped, restored)
        assert first.verdicts + rest.verdicts == whole.verdicts

    def test_estimate_series(self):
        run = run_monitor(short_record(), SHORT.lumped, until=T0 + 2 * H)
        assert len(run.estimate) == 120 and run.estimate.start == T0


class TestLeakDetection:
    def test_clean_month_no_labels(self):
        cfg = replace(fixture_config("clean-30d"), sensor_noise_sigma=0.3, seed=777)
        gt, params = trained(cfg)
        run = run_monitor(record_of(gt), params, start=monitor_start(cfg))
        assert first_label_hour(run.verdicts) is None

    def test_severe_leak_labelled_within_40_hours(self):
        cfg = replace(fixture_config("leak-fast"), duration_days=18,
                      faults=(FaultInjection(T0 + timedelta(days=15), 1.0),))
        gt, params = trained(cfg)
        run = run_monitor(record_of(gt), params, start=monitor_start(cfg), until=gt.leak_onset + 40 * H)
        assert run.verdicts[-1].bucket_after.label is Label.LEAKING
        assert first_label_hour(run.verdicts) >= gt.leak_onset

    def test_monotone_in_severity(self):
        delays = []
        for decay in (0.08, 0.15, 0.25, 0.5, 1.0):
            cfg = replace(fixture_config("leak-slow"), duration_days=22,
                          faults=(FaultInjection(T0 + timedelta(days=15), decay),))
            gt, params = trained(cfg)
            run = run_monitor(record_of(gt), params, start=monitor_start(cfg))
            first = first_label_hour(run.verdicts)
            assert first is not None, decay
            delays.append(first - gt.leak_onset)
        assert all(a >= b for a, b in zip(delays, delays[1:])), delays


class TestLogs:
    def test_round_trip(self):
        run = run_monitor(short_record(), SHORT.lumped, until=T0 + 6 * H)
        text = verdicts_to_csv(run.verdicts)
        assert text.startswith("hour,mean_temp,boundary,anomalous,bucket,label\n")
        back = parse_verdicts(text)
        assert [(v.hour, v.T_r_h, v.T_hat_h, v.anomalous, v.bucket_after.b) for v in back] == [
            (v.hour, v.T_r_h, v.T_hat_h, v.anomalous, v.bucket_after.b) for v in run.verdicts
        ]
        assert verdicts_to_csv(back) == text

    def test_missing_fields(self):
        v = HourVerdict(T0, None, None, None, BucketState())
        assert verdicts_to_csv([v], header=False) == "2024-03-01T00:00:00+00:00,,,,0,normal\n"

    def test_bad_header(self):
        with pytest.raises(ParseError):
            parse_verdicts("a,b\n")

    def test_alerts_csv(self):
        v = verdict(T0, Label.LEAKING, b=36)
        text = alerts_to_csv([v], "room-1")
        assert text.splitlines()[0] == "hour,outlet_id,bucket,message"
        assert text.splitlines()[1].startswith("2024-03-01T00:00:00+00:00,room-1,36,")

    def test_state_dict_round_trip(self):
        s = MonitorState(BucketState(3, 2, Label.LEAKING, T0), 6.25, math.nan, T0 + H)
        back = state_from_dict(state_to_dict(s))
        assert back.bucket == s.bucket and back.carry == 6.25 and math.isnan(back.last_measured)
        assert back.next_hour == T0 + H

    def test_state_dict_corrupt(self):
        with pytest.raises((KeyError, ValueError, TypeError)):
            state_from_dict({"bucket": -1, "lock": 0, "label": "normal", "last_update": None,
                             "carry": None, "last_measured": None, "next_hour": None})
