from dataclasses import replace
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ground_truth, record_of
from greina.errors import DivergenceError, InsufficientDataError, NoSimilarOutletError
from greina.learning import (
    CleanDataMask,
    DefaultThreshold,
    DoorProfile,
    FleetEntry,
    RankDeficiencyWarning,
    SGDConfig,
    build_design_matrix,
    door_profile,
    fit_multizone,
    fit_outlet,
    fit_parameters,
    initialize_outlet,
    profile_distance,
    rank_similar,
    update_monthly,
)
from greina.series import Kind, SensorSeries
from greina.simulator import ScenarioConfig
from greina.thermal import MultiZoneParams, PhysicalParams, ThermalParams, free_run, lump_parameters, simulate_multizone

T0 = datetime(2024, 3, 1, tzinfo=timezone.utc)
TRAINED = datetime(2024, 3, 8, tzinfo=timezone.utc)
ROOM = PhysicalParams(2000, 0.05, 1.5, -4, 0.8)


def ser(values, kind, start=T0, tau=60.0):
    return SensorSeries(kind, start, tau, np.asarray(values, dtype=float))


def synthetic(params: ThermalParams, n=3000, seed=0, S_ru=None):
    """Room series generated exactly by ``params`` from random exogenous inputs."""
    rng = np.random.default_rng(seed)
    T_e = 25 + 8 * rng.standard_normal(n)
    S_d = (rng.random(n) < 0.15).astype(float)
    if S_ru is None:
        S_ru = (rng.random(n) < 0.5).astype(float)
    T_r, _ = free_run(params, 6.0, np.column_stack([T_e, S_d, S_ru]))
    return [ser(T_r, Kind.ROOM_TEMP), ser(T_e, Kind.EXTERNAL_TEMP), ser(S_d, Kind.DOOR_STATE), ser(S_ru, Kind.UNIT_STATE)]


def normal_equations(X, y):
    return np.linalg.solve(X.T @ X, X.T @ y)


class TestDesignMatrix:
    def test_five_samples_four_rows(self):
        s = synthetic(lump_parameters(ROOM, 60), n=5)
        X, y = build_design_matrix(*s)
        assert X.shape == (4, 5) and y.shape == (4,)
        np.testing.assert_array_equal(X[:, 0], s[0].values[:4])
        np.testing.assert_array_equal(y, s[0].values[1:])
        assert np.all(X[:, 4] == 1)

    def test_masked_day_rows_excluded(self):
        n = 3 * 1440
        s = synthetic(lump_parameters(ROOM, 60), n=n)
        X, _ = build_design_matrix(*s, mask=CleanDataMask.of([(T0 + timedelta(days=1)).date()]))
        # day 1 contributes nothing, and neither does the row crossing into it
        assert len(X) == (1440 - 1) + (1440 - 1)

    def test_all_masked(self):
        s = synthetic(lump_parameters(ROOM, 60), n=100)
        with pytest.raises(InsufficientDataError):
            build_design_matrix(*s, mask=CleanDataMask.of([T0.date()]))

    def test_missing_samples_excluded(self):
        s = synthetic(lump_parameters(ROOM, 60), n=10)
        v = s[1].values.copy()
        v[4] = np.nan
        s[1] = s[1].with_values(v)
        X, _ = build_design_matrix(*s)
        assert len(X) == 8

    def test_window_rows(self):
        s = synthetic(lump_parameters(ROOM, 60), n=100)
        X, y = build_design_matrix(*s, window=10)
        assert len(X) == 90
        assert X[0, 0] == pytest.approx(s[0].values[:10].mean())
        assert y[0] == pytest.approx(s[0].values[1:11].mean())

    def test_window_keeps_exact_relation(self):
        p = lump_parameters(ROOM, 60)
        X, y = build_design_matrix(*synthetic(p, n=500), window=30)
        np.testing.assert_allclose(X @ p.theta, y, atol=1e-9)

    def test_unaligned(self):
        s = synthetic(lump_parameters(ROOM, 60), n=10)
        s[1] = s[1].slice(0, 9)
        with pytest.raises(ValueError):
            build_design_matrix(*s)


class TestClosedForm:
    def test_exact_recovery(self):
        p = lump_parameters(ROOM, 60)
        rep = fit_parameters(*build_design_matrix(*synthetic(p)), trained_at=TRAINED)
        np.testing.assert_allclose(rep.params.theta, p.theta, rtol=0, atol=1e-6)
        assert rep.params.origin == "fitted" and rep.params.trained_at == TRAINED
        assert rep.residual_mae >= 0 and rep.training_rows == 2999

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([rng.normal(6, 1, 400), rng.normal(30, 5, 400), rng.random(400) < 0.2,
                             rng.random(400) < 0.5, np.ones(400)]).astype(float)
        y = X @ np.array([0.99, 0.002, 0.05, -0.1, 0.03]) + 0.1 * rng.standard_normal(400)
        got = fit_parameters(X, y, trained_at=TRAINED).params.theta
        np.testing.assert_allclose(got, normal_equations(X, y), rtol=1e-8, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(
        st.builds(
            PhysicalParams,
            C_r=st.floats(500, 10000),
            K_e_r=st.floats(0.01, 0.3),
            Q_dr=st.floats(0.1, 5),
            Q_ru=st.floats(-10, -1),
            eta_r=st.floats(0, 3),
        ),
        st.integers(0, 1000),
    )
    def test_parameter_recovery(self, phys, seed):
        p = lump_parameters(phys, 60)
        rep = fit_parameters(*build_design_matrix(*synthetic(p, n=2000, seed=seed)), trained_at=TRAINED)
        np.testing.assert_allclose(rep.params.theta, p.theta, rtol=0, atol=1e-6)

    def test_rank_deficiency_minimum_norm(self):
        p = replace(lump_parameters(ROOM, 60), mu_ru=0.0)
        s = synthetic(p, S_ru=np.zeros(3000))
        X, y = build_design_matrix(*s)
        with pytest.warns(RankDeficiencyWarning):
            rep = fit_parameters(X, y, trained_at=TRAINED)
        assert rep.params.mu_ru == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(X @ rep.params.theta, y, atol=1e-9)

    def test_too_few_rows(self):
        with pytest.raises(InsufficientDataError):
            fit_parameters(np.ones((4, 5)), np.ones(4))

    def test_bad_mode(self):
        X, y = build_design_matrix(*synthetic(lump_parameters(ROOM, 60), n=50))
        with pytest.raises(ValueError):
            fit_parameters(X, y, mode="adam")


class TestSGD:
    def test_close_to_closed_form(self):
        p = lump_parameters(ROOM, 60)
        X, y = build_design_matrix(*synthetic(p, n=5000))
        y = y + 0.01 * np.random.default_rng(1).standard_normal(len(y))
        exact = fit_parameters(X, y, trained_at=TRAINED)
        start = replace(p, mu_dr=p.mu_dr * 1.2, eta_prime=p.eta_prime * 0.8)
        rep = fit_parameters(X, y, mode="sgd", prior=start, trained_at=TRAINED)
        assert rep.epochs >= 1 and rep.mode == "sgd"
        assert rep.residual_mae <= exact.residual_mae * 1.1

    def test_deterministic(self):
        p = lump_parameters(ROOM, 60)
        X, y = build_design_matrix(*synthetic(p, n=2000))
        start = replace(p, mu_dr=0.0)
        a = fit_parameters(X, y, mode="sgd", prior=start, trained_at=TRAINED)
        b = fit_parameters(X, y, mode="sgd", prior=start, trained_at=TRAINED)
        assert a == b

    def test_divergence(self):
        p = lump_parameters(ROOM, 60)
        X, y = build_design_matrix(*synthetic(p, n=2000))
        with pytest.raises(DivergenceError):
            fit_parameters(X, y, mode="sgd", prior=p, sgd=SGDConfig(learning_rate=50.0), trained_at=TRAINED)

    def test_without_prior_starts_at_closed_form(self):
        p = lump_parameters(ROOM, 60)
        X, y = build_design_matrix(*synthetic(p, n=1000))
        rep = fit_parameters(X, y, mode="sgd", trained_at=TRAINED)
        np.testing.assert_allclose(rep.params.theta, p.theta, atol=1e-5)


def month_record(seed, days=7, **kw):
    cfg = ScenarioConfig(sensor_noise_sigma=0.1, duration_days=days, seed=seed, **kw)
    return record_of(ground_truth(cfg))


class TestSimulatorFits:
    def test_noisy_week_within_five_percent(self):
        rec = month_record(11)
        p = fit_outlet(rec, trained_at=TRAINED).params
        truth = ScenarioConfig().lumped
        for k in ThermalParams.COEFFICIENTS:
            assert getattr(p, k) == pytest.approx(getattr(truth, k), rel=0.05), k

    def test_physics_sum_soft_check(self):
        p = fit_outlet(month_record(12), trained_at=TRAINED).params
        assert abs(p.mu_r + p.mu_e - 1) < 0.05

    def test_needs_min_days(self):
        with pytest.raises(InsufficientDataError):
            fit_outlet(month_record(13, days=3), trained_at=TRAINED)

    def test_masked_leak_day_bit_identical(self):
        rec = month_record(14, days=9)
        n8 = 8 * 1440
        base = record_of_slice(rec, 0, n8)
        leak_day = (T0 + timedelta(days=8)).date()
        a = fit_outlet(base, trained_at=TRAINED)
        with_extra = fit_outlet(rec, mask=CleanDataMask.of([leak_day]), trained_at=TRAINED)
        assert np.array_equal(a.params.theta, with_extra.params.theta)
        assert a.training_rows == with_extra.training_rows

    def test_estimates_unit_state_when_absent(self):
        rec = month_record(15)
        rec_no_state = replace(rec, unit_state=None)
        p = fit_outlet(rec_no_state, trained_at=TRAINED).params
        assert p.mu_ru < 0

    def test_monthly_update_stable(self):
        first = fit_outlet(month_record(16), trained_at=TRAINED)
        new = month_record(17)
        X, y = build_design_matrix(new.room_temp, new.external_temp, new.door_state, new.unit_state, window=60)
        upd = update_monthly(first, X, y, trained_at=TRAINED)
        for k in ("mu_r", "mu_e", "mu_dr", "mu_ru"):
            assert getattr(upd.params, k) == pytest.approx(getattr(first.params, k), rel=0.01), k

    def test_monthly_update_door_load_direction(self):
        first = fit_outlet(month_record(18), trained_at=TRAINED)
        heavy = month_record(18, physical=replace(ROOM, Q_dr=3.0))
        X, y = build_design_matrix(heavy.room_temp, heavy.external_temp, heavy.door_state, heavy.unit_state,
                                   window=60)
        upd = update_monthly(first, X, y, trained_at=TRAINED)
        assert upd.params.mu_dr > first.params.mu_dr

    def test_monthly_update_empty(self, caplog):
        first = fit_outlet(month_record(19), trained_at=TRAINED)
        assert update_monthly(first, None, None) is first
        assert update_monthly(first, np.ones((2, 5)), np.ones(2)) is first
        assert "skipped" in caplog.text


def record_of_slice(rec, lo, hi):
    return replace(
        rec,
        room_temp=rec.room_temp.slice(lo, hi),
        external_temp=rec.external_temp.slice(lo, hi),
        door_state=rec.door_state.slice(lo, hi),
        unit_state=rec.unit_state.slice(lo, hi),
    )


def door_days(days_opens):
    """Door series from a list of days, each a list of opening minutes-of-day."""
    v = np.zeros(1440 * len(days_opens))
    for d, minutes in enumerate(days_opens):
        for m in minutes:
            v[d * 1440 + m] = 1
    return ser(v, Kind.DOOR_STATE)


class TestDoorProfile:
    def test_always_closed(self):
        assert door_profile(door_days([[], []])).median_opens == (0.0,) * 24

    def test_daily_ten_oclock(self):
        prof = door_profile(door_days([[600]] * 3)).as_array()
        assert prof[10] == 1 and prof.sum() == 1

    def test_median(self):
        prof = door_profile(door_days([[], [540], [540, 545, 550]])).as_array()
        assert prof[9] == 1

    def test_continuous_open_counts_once(self):
        v = np.zeros(1440)
        v[600:620] = 1
        assert door_profile(ser(v, Kind.DOOR_STATE)).as_array()[10] == 1

    def test_partial_days_ignored(self):
        # slice starts at noon of day 0; its 13:20 open must not count
        s = door_days([[800], []]).slice(720, 2880)
        assert door_profile(s).as_array().sum() == 0

    def test_needs_full_day(self):
        with pytest.raises(InsufficientDataError):
            door_profile(door_days([[600]]).slice(0, 1000))

    def test_validation(self):
        with pytest.raises(ValueError):
            DoorProfile((0.0,) * 23)
        with pytest.raises(ValueError):
            DoorProfile((-1.0,) + (0.0,) * 23)


def profile(*entries):
    v = [0.0] * 24
    for i, x in entries:
        v[i] = x
    return DoorProfile(tuple(v))


profiles = st.lists(st.integers(0, 10), min_size=24, max_size=24).map(lambda v: DoorProfile(tuple(v)))


class TestRanking:
    def test_identical_scores_zero(self):
        p = profile((10, 2))
        assert rank_similar(p, {"copy": p, "other": profile()})[0] == ("copy", 0.0)

    def test_hand_arithmetic(self):
        a, b = profile((0, 1)), profile((1, 1))
        assert rank_similar(a, {"b": b, "a": a}) == [("a", 0.0), ("b", 2.0)]

    def test_two_candidates_ordering(self):
        new = profile((9, 3), (10, 4))
        c1 = profile((9, 2), (10, 2))  # 1 + 4 = 5
        c2 = profile((9, 3))  # 16
        assert rank_similar(new, {"c2": c2, "c1": c1}) == [("c1", 5.0), ("c2", 16.0)]

    def test_ties_by_id(self):
        p = profile()
        assert [o for o, _ in rank_similar(p, {"z": p, "a": p, "m": p})] == ["a", "m", "z"]

    def test_empty(self):
        with pytest.raises(NoSimilarOutletError):
            rank_similar(profile(), {})

    @given(profiles, profiles)
    def test_metric_properties(self, a, b):
        assert profile_distance(a, a) == 0
        assert profile_distance(a, b) == profile_distance(b, a)
        assert profile_distance(a, b) >= 0

    @given(profiles, st.dictionaries(st.text("abcdef", min_size=1, max_size=3), profiles, min_size=1, max_size=6),
           st.randoms(use_true_random=False))
    def test_order_independent(self, new, cands, rnd):
        items = list(cands.items())
        rnd.shuffle(items)
        assert rank_similar(new, dict(items)) == rank_similar(new, cands)


def fitted(oid="x"):
    return replace(lump_parameters(ROOM, 60), origin="fitted", trained_at=TRAINED)


class TestInitialize:
    def test_single_fitted(self):
        out = initialize_outlet(profile(), {"a": FleetEntry("a", profile((3, 1)), fitted())})
        assert isinstance(out, ThermalParams)
        assert out.origin == "transferred:a" and out.theta.tolist() == fitted().theta.tolist()

    def test_empty_fleet(self):
        assert initialize_outlet(profile(), {}) == DefaultThreshold(10.0)

    def test_skips_unfitted_best(self):
        fleet = {
            "best": FleetEntry("best", profile(), None),
            "xfer": FleetEntry("xfer", profile((1, 1)), fitted().transferred("q")),
            "next": FleetEntry("next", profile((1, 2)), fitted()),
        }
        assert initialize_outlet(profile(), fleet).origin == "transferred:next"

    def test_no_usable_candidate(self):
        fleet = {"a": FleetEntry("a", profile(), None), "b": FleetEntry("b", None, fitted())}
        assert isinstance(initialize_outlet(profile(), fleet), DefaultThreshold)


class TestMultiZoneFit:
    def test_gated(self):
        with pytest.raises(RuntimeError):
            fit_multizone(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), None)

    def test_improves_on_perturbed_start(self):
        kw = dict(C_w=4000, C_r1=1500, C_r2=1500, C_r3=1500, K_w_r1=0.02, K_w_r2=0.02, K_w_r3=0.02,
                  K_e_r1=0.01, K_e_r2=0.01, K_e_r3=0.01, K_e_w=0.03, K_r1_r2=0.05, K_r2_r3=0.05,
                  eta_r1=0.2, eta_r2=0.2, eta_r3=0.2, Q_ac=-3.0, Q_oc=0.5)
        truth = MultiZoneParams(**kw)
        rng = np.random.default_rng(0)
        n = 600
        T_e = 30 + 3 * np.sin(np.arange(n) / 100)
        S_ac = (np.arange(n) // 40 % 2).astype(float)
        S_oc = (rng.random(n) < 0.1).astype(float)
        T_r1 = simulate_multizone(truth, 6.0, T_e, S_ac, S_oc)[:, 1]
        start = replace(truth, Q_ac=-2.0, K_r1_r2=0.08)
        start_rmse = np.sqrt(np.mean((simulate_multizone(start, 6.0, T_e, S_ac, S_oc)[:, 1] - T_r1) ** 2))
        res = fit_multizone(T_r1, T_e, S_ac, S_oc, start, experimental=True, max_nfev=50)
        assert res.rmse < start_rmse
