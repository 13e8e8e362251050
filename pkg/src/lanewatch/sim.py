"""Deterministic synthetic telematics for normal and lane-blockage scenarios.

The model is deliberately small: Poisson arrivals per lane, a Krauss-type
safe-speed car-following rule with bounded deceleration, gap-acceptance lane
changes, and a sparse subset of connected vehicles that report noisy GPS
fixes every few seconds. It exists to reproduce the qualitative crash
signature (slowdown and bypass lane changes upstream of a blocked lane),
not to be a calibrated traffic model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .discretize import CellId, Corridor, DiscretizeConfig
from .errors import ConfigurationError
from .geom import CorridorGeometry, lane_center_offset, local_to_latlon, straight_corridor
from .records import TelematicsRecord, write_records

VEHICLE_LENGTH = 4.5
MIN_GAP = 2.0
SIM_STEP = 0.5


def default_corridor() -> CorridorGeometry:
    """A gently curved, 400 m, three-lane one-way freeway section."""
    return straight_corridor(
        corridor_id="I94-EB-demo",
        length=400.0,
        lanes=3,
        lat0=43.0389,
        lon0=-87.9065,
        bearing_deg=80.0,
        curvature=1.0 / 2000.0,
    )


@dataclass(frozen=True)
class Blockage:
    cell: CellId
    t_onset: float
    t_clear: float

    def active(self, t: float) -> bool:
        return self.t_onset <= t < self.t_clear


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration: float = 1800.0
    corridor: CorridorGeometry = field(default_factory=default_corridor)
    demand: float = 1200.0
    free_flow_speed: float = 33.5
    speed_stddev: float = 2.0
    penetration: float = 0.06
    gps_noise_sigma: float = 1.0
    sample_interval: float = 3.0
    blockage: Optional[Blockage] = None
    segment_length: float = 10.0
    lead_in: float = 300.0
    warmup: float = 120.0
    look_ahead: float = 300.0
    comfort_decel: float = 1.5
    max_accel: float = 1.5
    max_decel: float = 6.0
    safety_headway: float = 1.0
    reaction_time: float = 1.0
    discretionary_rate: float = 0.02
    # drivers passing an active blockage in an open lane slow to this speed
    rubberneck_speed: float = 15.0
    rubberneck_upstream: float = 30.0
    rubberneck_downstream: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.penetration <= 1.0:
            raise ConfigurationError("penetration must lie in (0, 1]")
        if not self.demand > 0:
            raise ConfigurationError("demand must be positive")
        if not self.duration > 0:
            raise ConfigurationError("duration must be positive")
        if self.gps_noise_sigma < 0 or self.speed_stddev < 0:
            raise ConfigurationError("noise levels must be nonnegative")
        if self.blockage is not None:
            corridor = Corridor(self.corridor, DiscretizeConfig(segment_length=self.segment_length))
            if not corridor.contains(self.blockage.cell):
                raise ConfigurationError(f"blockage cell {self.blockage.cell} is outside the corridor")
            if not self.blockage.t_onset < self.blockage.t_clear:
                raise ConfigurationError("blockage must clear after its onset")

    @property
    def label(self) -> str:
        return "non_crash" if self.blockage is None else "crash"


@dataclass(frozen=True)
class TruthRow:
    vehicle_id: str
    t: float
    lane: int
    segment: int
    speed: float
    arclength: float


@dataclass
class GroundTruth:
    rows: List[TruthRow]
    blockage: Optional[Blockage]
    label: str
    # per simulation step: minimum same-lane bumper gap (m), for invariant checks
    min_gap_per_step: List[float] = field(default_factory=list)
    occupancy: List[Tuple[float, int, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vehicle_id", "t", "lane", "segment", "speed", "arclength"])
            for r in self.rows:
                w.writerow([r.vehicle_id, r.t, r.lane, r.segment, r.speed, r.arclength])


class _Vehicle:
    __slots__ = ("vid", "lane", "s", "v", "v0", "cv", "next_emit", "cooldown", "number")

    def __init__(self, number, lane, s, v, v0, cv, next_emit):
        self.number = number
        self.vid = f"v{number:06d}"
        self.lane = lane
        self.s = s
        self.v = v
        self.v0 = v0
        self.cv = cv
        self.next_emit = next_emit
        self.cooldown = 0.0


class _Road:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.corridor = Corridor(cfg.corridor, DiscretizeConfig(segment_length=cfg.segment_length))
        self.ref = self.corridor.ref
        self.n_lanes = self.ref.effective_lane_count
        self.length = self.ref.length
        self.n_seg = self.corridor.segment_count

    def position(self, s: float, lane: int) -> np.ndarray:
        ref = self.ref
        theta = ref.bearing_at(s)
        right = np.array([math.cos(theta), -math.sin(theta)])
        return ref.point_at(s) + lane_center_offset(lane, ref.effective_width, ref.lane_width) * right

    def segment(self, s: float) -> int:
        return min(max(int(s // self.cfg.segment_length), 0), self.n_seg - 1)


def _safe_speed(v: float, v_lead: float, gap: float, tau: float, b: float) -> float:
    """Krauss safe speed for a net gap ``gap`` to a leader driving ``v_lead``."""
    return v_lead + (gap - v_lead * tau) / ((v + v_lead) / (2.0 * b) + tau)


def _desired_speed(rng: np.random.Generator, cfg: ScenarioConfig) -> float:
    lo = max(0.5 * cfg.free_flow_speed, cfg.free_flow_speed - 2.5 * cfg.speed_stddev)
    hi = cfg.free_flow_speed + 2.5 * cfg.speed_stddev
    while True:
        v = rng.normal(cfg.free_flow_speed, cfg.speed_stddev) if cfg.speed_stddev > 0 else cfg.free_flow_speed
        if lo <= v <= hi:
            return float(v)


def simulate(cfg: ScenarioConfig) -> Tuple[List[TelematicsRecord], GroundTruth]:
    """Run one scenario. Output depends only on ``cfg`` (including its seed)."""
    road = _Road(cfg)
    ss = np.random.SeedSequence(cfg.seed)
    rng_arrive, rng_driver, rng_noise, rng_lc = (np.random.default_rng(s) for s in ss.spawn(4))
    dt = SIM_STEP
    rate = cfg.demand / 3600.0
    lanes: Dict[int, List[_Vehicle]] = {k: [] for k in range(1, road.n_lanes + 1)}
    next_arrival = {k: float(rng_arrive.exponential(1.0 / rate)) - cfg.warmup for k in lanes}
    waiting: Dict[int, int] = {k: 0 for k in lanes}
    counter = 0
    records: List[TelematicsRecord] = []
    truth = GroundTruth([], cfg.blockage, cfg.label)
    blk = cfg.blockage
    blk_s0 = blk.cell.segment * cfg.segment_length if blk else 0.0
    blk_s1 = blk_s0 + cfg.segment_length if blk else 0.0
    start = int(round(-cfg.warmup / dt))
    stop = int(round(cfg.duration / dt))

    for step in range(start, stop + 1):
        t = step * dt
        blocked = blk is not None and blk.active(t)

        if blocked and blk.t_onset <= t < blk.t_onset + dt:
            # vehicles inside the blocked cell at onset are the crash itself
            lanes[blk.cell.lane] = [
                v for v in lanes[blk.cell.lane] if not (blk_s0 <= v.s < blk_s1 + VEHICLE_LENGTH)
            ]

        # arrivals
        for k in lanes:
            while next_arrival[k] <= t:
                waiting[k] += 1
                next_arrival[k] += float(rng_arrive.exponential(1.0 / rate))
            if waiting[k]:
                v0 = _desired_speed(rng_driver, cfg)
                cv = bool(rng_driver.random() < cfg.penetration)
                phase = float(rng_driver.integers(0, int(round(cfg.sample_interval / dt)))) * dt
                s_in = -cfg.lead_in
                v_in = v0
                if lanes[k]:
                    last = lanes[k][-1]
                    gap = last.s - VEHICLE_LENGTH - s_in
                    v_in = min(v0, last.v)
                    if gap < MIN_GAP + cfg.safety_headway * v_in:
                        continue
                counter += 1
                lanes[k].append(_Vehicle(counter, k, s_in, v_in, v0, cv, t + phase))
                waiting[k] -= 1

        _lane_changes(lanes, road, cfg, t, blocked, blk_s0, rng_lc)

        # longitudinal update, front to back
        min_gap = math.inf
        for k, vs in lanes.items():
            lead_s, lead_v = math.inf, 0.0
            if blocked and k == blk.cell.lane:
                obstacle = blk_s0
            else:
                obstacle = None
            slow_from = slow_to = None
            if blocked and k != blk.cell.lane and cfg.rubberneck_speed > 0:
                slow_from = blk_s0 - cfg.rubberneck_upstream
                slow_to = blk_s1 + cfg.rubberneck_downstream
            for veh in vs:
                if obstacle is not None and veh.s < obstacle and obstacle < lead_s - VEHICLE_LENGTH:
                    l_s, l_v = obstacle + VEHICLE_LENGTH, 0.0
                else:
                    l_s, l_v = lead_s, lead_v
                target = min(veh.v0, veh.v + cfg.max_accel * dt)
                if l_s < math.inf:
                    gap = l_s - VEHICLE_LENGTH - veh.s - MIN_GAP
                    target = min(target, _safe_speed(veh.v, l_v, gap, cfg.reaction_time, cfg.max_decel))
                if obstacle is not None and 0 < obstacle - veh.s <= cfg.look_ahead:
                    d = max(0.0, obstacle - veh.s - MIN_GAP)
                    target = min(target, math.sqrt(2 * cfg.comfort_decel * d))
                if slow_from is not None and veh.s < slow_to:
                    d = max(0.0, slow_from - veh.s)
                    target = min(target, math.sqrt(cfg.rubberneck_speed**2 + 2 * cfg.comfort_decel * d))
                v_new = max(0.0, target, veh.v - cfg.max_decel * dt)
                s_new = veh.s + v_new * dt
                hard = l_s - VEHICLE_LENGTH - 0.5
                if s_new > hard:
                    s_new = max(veh.s, hard)
                    v_new = min(v_new, l_v)
                veh.s, veh.v = s_new, v_new
                if lead_s < math.inf:
                    min_gap = min(min_gap, lead_s - VEHICLE_LENGTH - veh.s)
                lead_s, lead_v = veh.s, veh.v
            lanes[k] = [v for v in vs if v.s <= road.length + 200.0]
        if t >= 0:
            truth.min_gap_per_step.append(min_gap)
            if blocked:
                for veh in lanes[blk.cell.lane]:
                    truth.occupancy.append((t, veh.lane, veh.s))

        # emissions
        for k, vs in lanes.items():
            for veh in vs:
                if not veh.cv or t + 1e-9 < veh.next_emit:
                    continue
                veh.next_emit += cfg.sample_interval
                if t < 0 or not (0.0 <= veh.s < road.length):
                    continue
                p = road.position(veh.s, veh.lane)
                # cells are planar regions, so the true segment comes from the
                # foot of the noise-free position (differs from veh.s by cm on bends)
                seg = road.segment(road.ref.nearest_point(p)[1])
                if cfg.gps_noise_sigma > 0:
                    p = p + rng_noise.normal(0.0, cfg.gps_noise_sigma, size=2)
                lat, lon = local_to_latlon((float(p[0]), float(p[1])), road.corridor.frame)
                heading = math.degrees(road.ref.bearing_at(veh.s)) % 360.0
                records.append(TelematicsRecord(veh.vid, t, lat, lon, round(veh.v, 6), round(heading, 3)))
                truth.rows.append(TruthRow(veh.vid, t, veh.lane, seg, veh.v, veh.s))
    return records, truth


def _neighbours(vs: List[_Vehicle], s: float):
    """(leader, follower) around position ``s`` in a front-to-back lane list."""
    lead = follow = None
    for v in vs:
        if v.s >= s:
            lead = v
        else:
            follow = v
            break
    return lead, follow


def _gap_ok(lead, follow, veh: _Vehicle, cfg: ScenarioConfig) -> Tuple[bool, float]:
    h = cfg.safety_headway
    lead_gap = math.inf if lead is None else lead.s - VEHICLE_LENGTH - veh.s
    lag_gap = math.inf if follow is None else veh.s - VEHICLE_LENGTH - follow.s
    need_lead = MIN_GAP + h * max(0.0, veh.v - (lead.v if lead else veh.v))
    need_lag = MIN_GAP + h * (follow.v if follow else 0.0) + 2.0 * max(0.0, (follow.v if follow else 0.0) - veh.v)
    return lead_gap >= need_lead and lag_gap >= need_lag, min(lead_gap, lag_gap)


def _lane_changes(lanes, road: _Road, cfg: ScenarioConfig, t, blocked, blk_s0, rng):
    blk = cfg.blockage
    moves = []
    for k, vs in lanes.items():
        for i, veh in enumerate(vs):
            if veh.cooldown > t:
                continue
            mandatory = blocked and k == blk.cell.lane and 0 < blk_s0 - veh.s <= cfg.look_ahead
            if not mandatory:
                if cfg.discretionary_rate <= 0 or i == 0:
                    continue
                leader = vs[i - 1]
                slowed = leader.v < veh.v0 - 3.0 and leader.s - veh.s < 3.0 * max(veh.v, 5.0)
                if not slowed or rng.random() >= cfg.discretionary_rate:
                    continue
            best = None
            for k2 in (k - 1, k + 1):
                if k2 not in lanes:
                    continue
                if blocked and k2 == blk.cell.lane and -cfg.segment_length < blk_s0 - veh.s <= cfg.look_ahead:
                    continue
                lead, follow = _neighbours(lanes[k2], veh.s)
                ok, room = _gap_ok(lead, follow, veh, cfg)
                if not mandatory and lead is not None and lead.v < veh.v + 2.0:
                    ok = False
                if ok and (best is None or room > best[1]):
                    best = (k2, room)
            if best is not None:
                moves.append((veh, k, best[0]))
    for veh, k, k2 in moves:
        # re-check against moves already applied this step
        lead, follow = _neighbours(lanes[k2], veh.s)
        if not _gap_ok(lead, follow, veh, cfg)[0]:
            continue
        lanes[k].remove(veh)
        veh.lane = k2
        veh.cooldown = t + 3.0
        target = lanes[k2]
        idx = 0
        while idx < len(target) and target[idx].s >= veh.s:
            idx += 1
        target.insert(idx, veh)


def scenario_config_to_dict(cfg: ScenarioConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("corridor", "blockage")}
    d["corridor"] = cfg.corridor.to_dict()
    if cfg.blockage is not None:
        b = cfg.blockage
        d["blockage"] = {"cell": [b.cell.lane, b.cell.segment], "t_onset": b.t_onset, "t_clear": b.t_clear}
    return d


def make_suite(
    n_crash: int,
    n_normal: int,
    base_cfg: ScenarioConfig,
    seed: int,
    out_dir,
    onset_range: Tuple[float, float] = (300.0, 600.0),
    blockage_duration: float = 900.0,
    segment_margin: Tuple[int, int] = (12, 8),
) -> List[dict]:
    """Generate a labeled scenario suite and write files plus ``manifest.json``.

    Blockage lanes are uniform over all lanes; blockage segments are drawn so
    that at least ``segment_margin[0]`` segments are observed upstream and
    ``segment_margin[1]`` downstream.
    """
    if n_crash < 0 or n_normal < 0:
        raise ConfigurationError("scenario counts must be nonnegative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    road = Corridor(base_cfg.corridor, DiscretizeConfig(segment_length=base_cfg.segment_length))
    lo, hi = segment_margin[0], road.segment_count - 1 - segment_margin[1]
    if hi < lo:
        raise ConfigurationError("corridor too short for the requested segment margins")
    rng = np.random.default_rng(seed)
    plan = []
    for i in range(n_crash):
        cell = CellId(int(rng.integers(1, road.lane_count + 1)), int(rng.integers(lo, hi + 1)))
        onset = float(np.round(rng.uniform(*onset_range)))
        plan.append((f"crash_{i:03d}", Blockage(cell, onset, onset + blockage_duration)))
    for i in range(n_normal):
        plan.append((f"normal_{i:03d}", None))
    seeds = rng.integers(0, 2**31 - 1, size=len(plan))
    manifest = []
    for (sid, blk), s in zip(plan, seeds):
        cfg = replace(base_cfg, seed=int(s), blockage=blk)
        records, truth = simulate(cfg)
        rec_path = out / f"{sid}.jsonl"
        write_records(records, rec_path)
        truth.write_csv(out / f"{sid}_truth.csv")
        entry = {
            "scenario_id": sid,
            "records_path": rec_path.name,
            "label": cfg.label,
            "crash_window": None if blk is None else [blk.t_onset, blk.t_clear],
            "crash_cell": None if blk is None else [blk.cell.lane, blk.cell.segment],
            "seed": int(s),
            "duration": cfg.duration,
        }
        manifest.append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
