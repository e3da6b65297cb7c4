"""``greina`` command line: simulate, fit, monitor, evaluate, rank.

Exit codes: 0 success, 2 usage, 3 data or parse error, 4 insufficient data,
5 corrupted monitor state.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import EngineConfig, load_config
from .errors import (
    DataError,
    GreinaError,
    InsufficientDataError,
    StateCorruptionError,
    ThermalInstabilityError,
)
from .evaluation import FaultTimeline, delay_gap, hourly_mae_all, read_timelines, reporting_delays
from .learning import (
    CleanDataMask,
    DefaultThreshold,
    FitReport,
    build_design_matrix,
    door_profile,
    fit_outlet,
    initialize_outlet,
    rank_similar,
    update_monthly,
)
from .estimation import estimate_unit_state
from .monitoring import (
    ALERT_HEADER,
    Label,
    alert_hours,
    alert_message,
    alerts_to_csv,
    flagged_days,
    parse_verdicts,
    run_monitor,
    verdicts_to_csv,
)
from .series import Kind, format_timestamp, parse_timestamp, read_series, serialize_series
from .simulator import (
    manager_report_date,
    read_truth,
    scenario_from_text,
    scenario_library,
    simulate_outlet,
    write_ground_truth,
)
from .store import (
    ALERTS_FILE,
    ESTIMATE_FILE,
    SERIES_FILES,
    STATE_FILE,
    VERDICTS_FILE,
    OutletStore,
    load_fleet,
    load_outlet,
    outlet_lock,
    read_state,
    write_state,
)
from .thermal import read_params

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INSUFFICIENT, EXIT_STATE = 0, 2, 3, 4, 5


class UsageError(GreinaError):
    """Invalid combination of flags or config values."""


def _err(msg: str) -> None:
    print(f"greina: {msg}", file=sys.stderr)


def _timestamp(text: str):
    try:
        return parse_timestamp(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad timestamp {text!r}: {exc}") from None


def _engine_config(args) -> EngineConfig:
    cfg = load_config(getattr(args, "config", None))
    try:
        return cfg.override(
            tau=getattr(args, "tau", None),
            h_mon=getattr(args, "h_mon", None),
            b_leak=getattr(args, "b_leak", None),
            seed=getattr(args, "seed", None),
            fit_mode=getattr(args, "mode", None),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _store_for(outlet_dir: Path, cfg: EngineConfig) -> OutletStore:
    return OutletStore(cfg.store_root) if cfg.store_root else OutletStore(outlet_dir.resolve().parent)


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> int:
    library = scenario_library()
    if args.scenario in library:
        configs = library[args.scenario]
    elif Path(args.scenario).is_file():
        configs = (scenario_from_text(Path(args.scenario).read_text(encoding="utf-8")),)
    else:
        _err(f"unknown scenario {args.scenario!r}; choose one of: {', '.join(library)}")
        return EXIT_USAGE
    if args.seed is not None:
        configs = tuple(replace(c, seed=args.seed + i) for i, c in enumerate(configs))
    if args.tau is not None:
        configs = tuple(replace(c, tau=args.tau) for c in configs)
    out = Path(args.out)
    for c in configs:
        target = out if len(configs) == 1 else out / c.outlet_id
        for path in write_ground_truth(simulate_outlet(c), target):
            print(path)
    return EXIT_OK


# ----------------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    cfg = _engine_config(args)
    outlet_dir = Path(args.outlet)
    store = _store_for(outlet_dir, cfg)
    oid = outlet_dir.resolve().name
    with outlet_lock(outlet_dir):
        record = load_outlet(outlet_dir, cfg.tau, not args.estimate_state, cfg.weather_max_fill_hours)
        if args.until is not None:
            record = _truncate(record, args.until)
        mask = CleanDataMask.of(store.flagged_days(oid))
        room = record.room_temp
        present = np.flatnonzero(~np.isnan(room.values))
        if present.size == 0:
            raise InsufficientDataError("insufficient clean data: room temperature is empty")
        trained_at = room.timestamp_at(int(present[-1]))
        prior = store.latest_params(oid) if args.update else None

        if prior is not None:
            report = _monthly_update(record, prior, mask, trained_at, cfg)
            if report is None:
                print(f"no new clean rows since {format_timestamp(prior.trained_at)}; parameters unchanged")
                return EXIT_OK
        else:
            report = fit_outlet(
                record, mask, cfg.fit_mode, window=cfg.fit_window,
                min_days=cfg.min_training_days, trained_at=trained_at, sgd=cfg.sgd,
            )
        path = store.save_params(oid, report.params)
    _print_report(report, path)
    return EXIT_OK


def _truncate(record, until):
    """Keep samples strictly before ``until``."""
    def cut(s):
        if s is None:
            return None
        return s.slice(0, int(np.ceil(s.offset_of(until) - 1e-9)))
    return replace(
        record,
        room_temp=cut(record.room_temp),
        external_temp=cut(record.external_temp),
        door_state=cut(record.door_state),
        unit_state=cut(record.unit_state),
    )


def _monthly_update(record, prior, mask, trained_at, cfg) -> FitReport | None:
    rec = record.aligned()
    lo = max(int(np.ceil(rec.room_temp.offset_of(prior.trained_at))), 0) if prior.trained_at else 0
    room = rec.room_temp.slice(lo, len(rec.room_temp))
    if len(room) == 0 or (prior.trained_at and trained_at <= prior.trained_at):
        return None
    unit = rec.unit_state if rec.unit_state is not None else estimate_unit_state(rec.room_temp)
    parts = [s.slice(lo, len(s)) for s in (rec.external_temp, rec.door_state, unit)]
    try:
        X, y = build_design_matrix(room, *parts, mask, cfg.fit_window)
    except InsufficientDataError:
        return None
    existing = FitReport(prior, 0, 0.0, 0)
    report = update_monthly(existing, X, y, trained_at=trained_at, sgd=cfg.sgd)
    return None if report is existing else report


def _print_report(report: FitReport, path: Path) -> None:
    p = report.params
    print(f"params: {path}")
    for name in p.COEFFICIENTS:
        print(f"{name}: {getattr(p, name):.9g}")
    print(f"mu_r + mu_e: {p.mu_r + p.mu_e:.6f}")
    print(f"mode: {report.mode}")
    print(f"training_rows: {report.training_rows}")
    print(f"residual_mae: {report.residual_mae:.6f}")
    print(f"epochs: {report.epochs}")


# ------------------------------------------------------------------- monitor


def _select_model(args, cfg, record, outlet_dir, store, oid):
    if args.default_threshold:
        return DefaultThreshold(cfg.default_threshold), f"default threshold {cfg.default_threshold:g} C"
    if args.params:
        return read_params(args.params), f"parameters from {args.params}"
    if args.transfer_from:
        fleet = load_fleet(args.transfer_from, exclude=str(outlet_dir), tau=cfg.tau)
        try:
            profile = door_profile(record.door_state)
        except InsufficientDataError:
            model = DefaultThreshold(cfg.default_threshold)
        else:
            model = initialize_outlet(profile, fleet)
            if isinstance(model, DefaultThreshold):
                model = DefaultThreshold(cfg.default_threshold)
        if isinstance(model, DefaultThreshold):
            return model, f"no similar outlet in fleet; default threshold {model.value:g} C"
        return model, f"parameters transferred from {model.transferred_from}"
    params = store.latest_params(oid)
    if params is None:
        raise InsufficientDataError(
            f"{oid} has no fitted parameters; run 'greina fit' or pass --params, --transfer-from or --default-threshold"
        )
    return params, f"fitted parameters trained at {format_timestamp(params.trained_at)}"


def _append(path: Path, text_with_header: str) -> None:
    if path.exists() and path.stat().st_size > 0:
        body = text_with_header.split("\n", 1)[1]
        with open(path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(body)
    else:
        path.write_text(text_with_header, encoding="utf-8", newline="\n")


def cmd_monitor(args) -> int:
    cfg = _engine_config(args)
    outlet_dir = Path(args.outlet)
    store = _store_for(outlet_dir, cfg)
    oid = outlet_dir.resolve().name
    with outlet_lock(outlet_dir):
        if args.reset_state:
            for name in (STATE_FILE, VERDICTS_FILE, ALERTS_FILE, ESTIMATE_FILE):
                (outlet_dir / name).unlink(missing_ok=True)
        state = read_state(outlet_dir)
        record = load_outlet(outlet_dir, cfg.tau, not args.estimate_state, cfg.weather_max_fill_hours)
        model, description = _select_model(args, cfg, record, outlet_dir, store, oid)
        print(f"{oid}: monitoring with {description}", file=sys.stderr)

        run = run_monitor(record, model, state, cfg.monitor, until=args.until)
        before = state.bucket if state is not None else None
        alerts = alert_hours(run.verdicts, before)

        _append(outlet_dir / VERDICTS_FILE, verdicts_to_csv(run.verdicts))
        if alerts:
            _append(outlet_dir / ALERTS_FILE, alerts_to_csv(alerts, oid))
        elif not (outlet_dir / ALERTS_FILE).exists():
            (outlet_dir / ALERTS_FILE).write_text(",".join(ALERT_HEADER) + "\n", encoding="utf-8")
        if run.estimate is not None:
            _append(outlet_dir / ESTIMATE_FILE, serialize_series(run.estimate))
        days = flagged_days(run.verdicts)
        if days:
            store.add_flagged_days(oid, days)
        write_state(outlet_dir, run.state)

    for v in alerts:
        print(f"ALERT {alert_message(oid, v)}")
    leaking = sum(v.bucket_after.label is Label.LEAKING for v in run.verdicts)
    print(f"{oid}: {len(run.verdicts)} hours processed, {leaking} leaking, {len(alerts)} alerts", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------ evaluate


def _episodes(verdicts) -> list:
    starts, prev = [], Label.NORMAL
    for v in verdicts:
        if v.bucket_after.label is Label.LEAKING and prev is Label.NORMAL:
            starts.append(v.hour)
        prev = v.bucket_after.label
    return starts


def cmd_evaluate(args) -> int:
    outlet_dir = Path(args.outlet)
    oid = args.outlet_id or outlet_dir.resolve().name
    vpath = Path(args.verdicts) if args.verdicts else outlet_dir / VERDICTS_FILE
    if not vpath.exists():
        raise DataError(f"missing verdict log {vpath}")
    verdicts = parse_verdicts(vpath.read_text(encoding="utf-8"))

    timeline = None
    if args.timeline:
        rows = [t for t in read_timelines(args.timeline) if t.outlet_id == oid]
        if not rows:
            raise DataError(f"outlet id {oid!r} not found in timeline {args.timeline}")
        timeline = rows[0]
    truth_path = Path(args.truth) if args.truth else outlet_dir / "truth.csv"
    truth = None
    if args.truth or timeline is None:
        if not truth_path.exists():
            raise DataError(f"missing truth file {truth_path}")
        truth = read_truth(truth_path)

    onset_hour = truth.leak_onset if truth is not None else None
    if timeline is not None:
        dt_s, dt_m = timeline.dt_s, timeline.dt_m
    else:
        dt_s = onset_hour.date() if onset_hour else None
        dt_m = manager_report_date(truth.unit_state, onset_hour) if truth is not None else None
    since = onset_hour if onset_hour is not None else None

    episodes = _episodes(verdicts)
    if dt_s is None:
        detections, false_alarms = [], episodes
    elif since is not None:
        detections = [h for h in episodes if h >= since]
        false_alarms = [h for h in episodes if h < since]
    else:
        detections = [h for h in episodes if h.date() >= dt_s]
        false_alarms = [h for h in episodes if h.date() < dt_s]
    dt_g = detections[0].date() if detections else None

    print(f"outlet_id: {oid}")
    print(f"hours: {len(verdicts)}")
    print(f"anomalous_hours: {sum(bool(v.anomalous) for v in verdicts)}")
    _print_errors(outlet_dir)
    print(f"leak_present: {'yes' if dt_s else 'no'}")
    print(f"detections: {1 if detections else 0}")
    print(f"misses: {1 if dt_s and not detections else 0}")
    print(f"false_alarms: {len(false_alarms)}")
    if dt_s is not None:
        t = FaultTimeline(dt_s, dt_m, dt_g, timeline.dt_e if timeline else None, oid)
        rd_m, rd_g = reporting_delays(t)
        gap = delay_gap(t)
        print(f"dt_s: {dt_s}")
        print(f"dt_m: {dt_m or ''}")
        print(f"dt_g: {dt_g or ''}")
        print(f"rd_m: {'' if rd_m is None else rd_m}")
        print(f"rd_g: {'' if rd_g is None else rd_g}")
        print(f"d_m_g: {'' if gap is None else gap}")
    return EXIT_OK


def _print_errors(outlet_dir: Path) -> None:
    est, room = outlet_dir / ESTIMATE_FILE, outlet_dir / SERIES_FILES[Kind.ROOM_TEMP]
    if not (est.exists() and room.exists()):
        return
    estimate = read_series(est, Kind.ROOM_TEMP)
    measured = read_series(room, Kind.ROOM_TEMP, estimate.tau)
    lo = int(round(measured.offset_of(estimate.start)))
    measured = measured.slice(lo, lo + len(estimate))
    if len(measured) != len(estimate):
        raise DataError("estimated_temp.csv extends beyond room_temp.csv")
    errs = np.array(list(hourly_mae_all(measured, estimate).values()))
    if errs.size == 0:
        return
    print(f"e_h_count: {errs.size}")
    print(f"e_h_mean: {errs.mean():.4f}")
    print(f"e_h_std: {errs.std():.4f}")
    print(f"e_h_median: {np.median(errs):.4f}")
    print(f"e_h_p90: {np.percentile(errs, 90):.4f}")


# ---------------------------------------------------------------------- rank


def cmd_rank(args) -> int:
    cfg = _engine_config(args)
    new_dir = Path(args.outlet)
    door_path = new_dir / SERIES_FILES[Kind.DOOR_STATE]
    if not door_path.exists():
        raise DataError(f"{new_dir.name}: missing {door_path.name}")
    profile = door_profile(read_series(door_path, Kind.DOOR_STATE, cfg.tau))
    fleet = load_fleet(args.fleet, exclude=str(new_dir), tau=cfg.tau)
    candidates = {oid: e.door_profile for oid, e in fleet.items() if e.door_profile is not None}
    if not candidates:
        print(f"no similar outlet in fleet; monitoring falls back to the {cfg.default_threshold:g} C default threshold")
        return EXIT_OK
    print("rank,outlet_id,score,has_params")
    for i, (oid, score) in enumerate(rank_similar(profile, candidates), start=1):
        print(f"{i},{oid},{score:.6g},{'yes' if fleet[oid].params is not None else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="engine config file (key = value)")
    common.add_argument("--tau", type=float, help="sampling interval in seconds")
    common.add_argument("--seed", type=int, help="random seed")

    bucket = argparse.ArgumentParser(add_help=False)
    bucket.add_argument("--h-mon", type=int, dest="h_mon", help="in-bounds hours before the bucket resets")
    bucket.add_argument("--b-leak", type=int, dest="b_leak", help="bucket level that labels a leak")

    p = argparse.ArgumentParser(prog="greina", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated outlet")
    s.add_argument("scenario", help="library scenario name or scenario config file")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="fit thermal parameters for an outlet")
    f.add_argument("outlet", help="outlet directory")
    f.add_argument("--mode", choices=("closed_form", "sgd"))
    f.add_argument("--update", action="store_true", help="refine the latest parameters with newer data")
    f.add_argument("--estimate-state", action="store_true", help="ignore unit_state.csv and estimate it")
    f.add_argument("--until", type=_timestamp, help="train only on samples before this time")
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("monitor", parents=[common, bucket], help="run hourly leak monitoring")
    m.add_argument("outlet", help="outlet directory")
    src = m.add_mutually_exclusive_group()
    src.add_argument("--params", help="parameter file to use")
    src.add_argument("--transfer-from", dest="transfer_from", help="fleet directory for transfer")
    src.add_argument("--default-threshold", dest="default_threshold", action="store_true",
                     help="use the flat 10 C boundary")
    m.add_argument("--reset-state", dest="reset_state", action="store_true",
                   help="discard monitor state and logs and start over")
    m.add_argument("--until", type=_timestamp, help="stop at this hour (exclusive)")
    m.add_argument("--estimate-state", action="store_true", help="ignore unit_state.csv and estimate it")
    m.set_defaults(func=cmd_monitor)

    e = sub.add_parser("evaluate", help="score a monitored outlet against ground truth")
    e.add_argument("outlet", help="outlet directory")
    e.add_argument("--verdicts", help="verdict log (default: <outlet>/verdicts.csv)")
    e.add_argument("--truth", help="truth.csv (default: <outlet>/truth.csv)")
    e.add_argument("--timeline", help="timeline CSV outlet_id,dt_s,dt_m,dt_g,dt_e")
    e.add_argument("--outlet-id", dest="outlet_id", help="id to look up in the timeline")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rank", parents=[common], help="rank fleet outlets by door-routine similarity")
    r.add_argument("outlet", help="new outlet directory")
    r.add_argument("fleet", help="fleet directory")
    r.set_defaults(func=cmd_rank)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _err(f"usage: {exc}")
        return EXIT_USAGE
    except InsufficientDataError as exc:
        _err(f"insufficient data: {exc}")
        return EXIT_INSUFFICIENT
    except StateCorruptionError as exc:
        _err(f"state corruption: {exc}")
        return EXIT_STATE
    except (DataError, ThermalInstabilityError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except GreinaError as exc:
        _err(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
