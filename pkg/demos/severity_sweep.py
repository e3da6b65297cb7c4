"""Detection delay against leak severity, using the library directly."""
from dataclasses import replace
from datetime import timedelta

from greina.learning import fit_outlet
from greina.monitoring import first_label_hour, run_monitor
from greina.series import OutletRecord
from greina.simulator import FaultInjection, scenario_library, simulate_outlet

base = scenario_library()["leak-slow"][0]
onset = base.leak_onset
train = 14 * 1440

for decay in (0.08, 0.15, 0.25, 0.5, 1.0):
    gt = simulate_outlet(replace(base, duration_days=22, faults=(FaultInjection(onset, decay),)))
    series = (gt.room_temp, gt.external_temp, gt.door_state, gt.unit_state)
    fit_rec = OutletRecord(base.outlet_id, *(s.slice(0, train) for s in series))
    params = fit_outlet(fit_rec).params
    run = run_monitor(OutletRecord(base.outlet_id, *series), params, start=base.start + timedelta(days=14))
    hit = first_label_hour(run.verdicts)
    delay = "missed" if hit is None else f"{(hit - onset) / timedelta(hours=1):.0f} h"
    print(f"decay {decay:>4}/day  leaking label after {delay}")
