"""Simulate normal traffic, learn the intention model, then watch a lane blockage.

Run with ``python3 demos/end_to_end.py [out_dir]``. Writes the model, the
alerts and two risk-map frames under ``out_dir`` (default ``demo_out``).
"""

import sys
from dataclasses import replace
from pathlib import Path

from lanewatch import (
    Blockage,
    CellId,
    Corridor,
    DetectorConfig,
    ScenarioConfig,
    discretize_trajectories,
    estimate_intention,
    run_stream,
    save_model,
    simulate,
)
from lanewatch.detect import tick_index, write_alerts, write_snapshot


def main(out: Path) -> None:
    base = ScenarioConfig()
    corridor = Corridor(base.corridor)

    history, _ = simulate(replace(base, seed=999, duration=3600.0, penetration=1.0))
    model = estimate_intention(
        discretize_trajectories(history, corridor),
        corridor_id=corridor.corridor_id,
        lane_count=corridor.lane_count,
    )
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    print(f"model: {len(model.counts)} source cells from {len(history)} records")

    blk = Blockage(CellId(2, 20), t_onset=300.0, t_clear=1200.0)
    records, _ = simulate(replace(base, seed=7, blockage=blk))
    cfg = DetectorConfig()
    frames = {tick_index(t, cfg.tick): t for t in (290.0, 900.0)}
    res = run_stream(records, corridor, model, cfg, snapshot_ticks=frames)
    write_alerts(res.alerts, corridor.corridor_id, out / "alerts.jsonl")
    for k, t in frames.items():
        if k in res.snapshots:
            write_snapshot(res.snapshots[k], out / f"snapshot_t{t:g}.csv")

    print(f"blockage at lane {blk.cell.lane}, segment {blk.cell.segment}, t={blk.t_onset:g}s")
    print(f"{len(records)} CV records, peak accumulated risk {res.max_risk:.1f}")
    for a in res.alerts[:10]:
        print(f"  alert t={a.t:7.1f}s lane={a.cell.lane} seg={a.cell.segment:2d} "
              f"score={a.score:5.1f} (p={a.p_sum:.1f} s={a.s_sum:.1f} l={a.l_sum:.1f})")
    if not res.alerts:
        print("  no alerts")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out"))
