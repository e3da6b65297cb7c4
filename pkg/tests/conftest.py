from __future__ import annotations

import functools
from datetime import timedelta

import pytest

from greina.learning import fit_outlet
from greina.series import OutletRecord
from greina.simulator import ScenarioConfig, scenario_library, simulate_outlet, with_seed

TRAIN_DAYS = 14


@functools.lru_cache(maxsize=None)
def ground_truth(config: ScenarioConfig):
    return simulate_outlet(config)


def fixture_config(name: str, index: int = 0, seed: int | None = None) -> ScenarioConfig:
    cfg = scenario_library()[name][index]
    return cfg if seed is None else with_seed(cfg, seed)


def record_of(gt, lo: int = 0, hi: int | None = None, with_state: bool = True) -> OutletRecord:
    hi = len(gt.room_temp) if hi is None else hi
    parts = [s.slice(lo, hi) for s in (gt.room_temp, gt.external_temp, gt.door_state, gt.unit_state)]
    return OutletRecord(gt.config.outlet_id, parts[0], parts[1], parts[2], parts[3] if with_state else None)


@functools.lru_cache(maxsize=None)
def trained(config: ScenarioConfig, days: int = TRAIN_DAYS):
    """Ground truth plus params fitted on its first ``days`` days."""
    gt = ground_truth(config)
    n = int(days * 86400 / config.tau)
    return gt, fit_outlet(record_of(gt, 0, n)).params


def monitor_start(config: ScenarioConfig, days: int = TRAIN_DAYS):
    return config.start + timedelta(days=days)


@pytest.fixture
def canonical():
    return ScenarioConfig()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
