import json
from collections import defaultdict
from dataclasses import replace

import pytest

from lanewatch.discretize import CellId
from lanewatch.errors import ConfigurationError
from lanewatch.records import write_records
from lanewatch.sim import Blockage, ScenarioConfig, make_suite, scenario_config_to_dict, simulate


def test_same_seed_same_bytes(tmp_path, base_cfg):
    cfg = replace(base_cfg, seed=42, duration=300.0, penetration=0.2)
    for name in ("a", "b"):
        records, truth = simulate(cfg)
        write_records(records, tmp_path / f"{name}.jsonl")
        truth.write_csv(tmp_path / f"{name}.csv")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    other, _ = simulate(replace(cfg, seed=43))
    assert other != simulate(cfg)[0]


@pytest.fixture(scope="module")
def blocked_run(base_cfg):
    blk = Blockage(CellId(2, 20), 200.0, 700.0)
    cfg = replace(base_cfg, seed=8, duration=800.0, penetration=1.0, blockage=blk)
    return cfg, *simulate(cfg)


def test_blocked_cell_stays_empty(blocked_run):
    cfg, _, truth = blocked_run
    blk = cfg.blockage
    inside = [r for r in truth.rows if blk.active(r.t) and r.lane == blk.cell.lane and r.segment == blk.cell.segment]
    assert inside == []
    s0 = blk.cell.segment * cfg.segment_length
    assert truth.occupancy, "blocked lane never occupied during the window"
    assert all(not (s0 <= s < s0 + cfg.segment_length) for _, _, s in truth.occupancy)


def test_no_collisions(blocked_run):
    _, _, truth = blocked_run
    assert truth.min_gap_per_step and min(truth.min_gap_per_step) > 0


def test_blocked_lane_vehicles_merge_upstream(blocked_run):
    cfg, _, truth = blocked_run
    blk = cfg.blockage
    rows = defaultdict(list)
    for r in truth.rows:
        rows[r.vehicle_id].append(r)
    changers = 0
    for seq in rows.values():
        if not blk.active(seq[0].t) or seq[0].lane != blk.cell.lane:
            continue
        for a, b in zip(seq, seq[1:]):
            if a.lane == blk.cell.lane and b.lane != a.lane and b.segment <= blk.cell.segment:
                changers += 1
                break
    assert changers >= 1


def test_emission_interval_and_truth_alignment(base_cfg):
    records, truth = simulate(replace(base_cfg, seed=4, duration=300.0, penetration=0.3))
    assert len(records) == len(truth.rows)
    assert all((r.vehicle_id, r.t) == (g.vehicle_id, g.t) for r, g in zip(records, truth.rows))
    times = defaultdict(list)
    for r in records:
        times[r.vehicle_id].append(r.t)
    gaps = {round(b - a, 9) for ts in times.values() for a, b in zip(ts, ts[1:])}
    assert gaps == {3.0}
    assert all(0.0 <= r.t <= 300.0 for r in records)


def test_penetration_fraction(base_cfg):
    records, _ = simulate(replace(base_cfg, seed=12, duration=1200.0, penetration=0.06))
    full, _ = simulate(replace(base_cfg, seed=12, duration=1200.0, penetration=1.0))
    share = len({r.vehicle_id for r in records}) / len({r.vehicle_id for r in full})
    assert 0.02 < share < 0.12


def test_config_errors(base_cfg):
    for bad in ({"penetration": 0.0}, {"penetration": 1.5}, {"demand": 0.0}, {"duration": -1.0}, {"gps_noise_sigma": -1.0}):
        with pytest.raises(ConfigurationError):
            replace(base_cfg, **bad)
    with pytest.raises(ConfigurationError):
        replace(base_cfg, blockage=Blockage(CellId(4, 3), 0.0, 10.0))
    with pytest.raises(ConfigurationError):
        replace(base_cfg, blockage=Blockage(CellId(2, 3), 10.0, 10.0))


def test_config_dict_is_json():
    d = scenario_config_to_dict(ScenarioConfig(blockage=Blockage(CellId(1, 2), 3.0, 4.0)))
    json.dumps(d)
    assert d["blockage"] == {"cell": [1, 2], "t_onset": 3.0, "t_clear": 4.0} and d["demand"] == 1200.0


def test_suite_without_crashes(tmp_path, base_cfg):
    cfg = replace(base_cfg, duration=120.0)
    m = make_suite(0, 3, cfg, seed=1, out_dir=tmp_path)
    assert [e["label"] for e in m] == ["non_crash"] * 3
    assert json.loads((tmp_path / "manifest.json").read_text()) == m


def test_suite_is_reproducible(tmp_path, base_cfg):
    cfg = replace(base_cfg, duration=120.0)
    a = make_suite(2, 2, cfg, seed=5, out_dir=tmp_path / "a", onset_range=(30.0, 60.0))
    b = make_suite(2, 2, cfg, seed=5, out_dir=tmp_path / "b", onset_range=(30.0, 60.0))
    assert a == b
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for e in a:
        assert (tmp_path / "a" / e["records_path"]).read_bytes() == (tmp_path / "b" / e["records_path"]).read_bytes()
    for e in a[:2]:
        lane, seg = e["crash_cell"]
        assert e["label"] == "crash" and 1 <= lane <= 3 and 12 <= seg <= 31
        assert 30.0 <= e["crash_window"][0] <= 60.0


def test_suite_rejects_negative_counts(tmp_path, base_cfg):
    with pytest.raises(ConfigurationError):
        make_suite(-1, 0, base_cfg, seed=0, out_dir=tmp_path)
