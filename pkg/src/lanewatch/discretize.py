"""Turn raw telematics records into lane/segment cell states."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, GeometryError, StreamOrderError, ZeroMotionError
from .geom import (
    CorridorGeometry,
    LocalFrame,
    ReferenceLine,
    build_reference_line,
    haversine,
    lane_index,
    locate,
    project_to_local,
    wrap_angle,
)
from .records import TelematicsRecord


class CellId(NamedTuple):
    """One lane x one longitudinal segment. Corridor scoping lives on the container."""

    lane: int
    segment: int

    @property
    def key(self) -> str:
        return f"{self.lane}:{self.segment}"

    @classmethod
    def parse(cls, key: str) -> "CellId":
        x, y = key.split(":")
        return cls(int(x), int(y))


@dataclass(frozen=True)
class CellState:
    cell: CellId
    speed: float
    t: float
    vehicle_id: str

    @property
    def lane(self) -> int:
        return self.cell.lane

    @property
    def segment(self) -> int:
        return self.cell.segment


@dataclass(frozen=True)
class DiscretizeConfig:
    search_radius: float = 200.0
    segment_length: float = 10.0
    heading_tolerance: float = 90.0
    sample_interval: float = 3.0

    def __post_init__(self):
        for name in ("search_radius", "segment_length", "heading_tolerance", "sample_interval"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")


class Corridor:
    """A corridor geometry bundled with its local frame and reference line."""

    def __init__(self, geometry: CorridorGeometry, cfg: DiscretizeConfig = DiscretizeConfig()):
        self.geometry = geometry
        self.cfg = cfg
        self.frame: LocalFrame = geometry.frame()
        self.ref: ReferenceLine = build_reference_line(geometry, self.frame)

    @property
    def corridor_id(self) -> str:
        return self.geometry.corridor_id

    @property
    def lane_count(self) -> int:
        return self.ref.effective_lane_count

    @cached_property
    def segment_count(self) -> int:
        return max(1, math.ceil(self.ref.length / self.cfg.segment_length - 1e-9))

    def contains(self, cell: CellId) -> bool:
        return 1 <= cell.lane <= self.lane_count and 0 <= cell.segment < self.segment_count

    def cells(self) -> List[CellId]:
        return [CellId(x, y) for y in range(self.segment_count) for x in range(1, self.lane_count + 1)]


def _as_corridor(g, cfg: DiscretizeConfig) -> Corridor:
    if isinstance(g, Corridor):
        return g
    return Corridor(g, cfg)


def keep_record(rec: TelematicsRecord, corridor: Corridor) -> bool:
    """Proximity and (when present) heading test for one record."""
    g, cfg = corridor.geometry, corridor.cfg
    if haversine(rec.lat, rec.lon, *g.anchor) > cfg.search_radius:
        return False
    if rec.heading is None:
        return True
    try:
        q = project_to_local((rec.lat, rec.lon), corridor.frame)
    except GeometryError:
        return False
    i = corridor.ref.nearest_vertex(q)
    diff = wrap_angle(math.radians(rec.heading) - corridor.ref.bearing[i])
    return math.degrees(diff) <= cfg.heading_tolerance


def filter_records(records: Iterable[TelematicsRecord], g, cfg: DiscretizeConfig = DiscretizeConfig()):
    corridor = _as_corridor(g, cfg)
    return [r for r in records if keep_record(r, corridor)]


def _beyond_ends(pa: np.ndarray, ref: ReferenceLine, s: float) -> bool:
    v = ref.vertices
    if s <= 0.0:
        return float(np.dot(pa - v[0], v[1] - v[0])) < 0.0
    if s >= ref.length:
        return float(np.dot(pa - v[-1], v[-1] - v[-2])) > 0.0
    return False


def discretize_record(
    rec: TelematicsRecord,
    next_rec: TelematicsRecord,
    ref: ReferenceLine,
    frame: LocalFrame,
    cfg: DiscretizeConfig = DiscretizeConfig(),
    reverse: bool = False,
) -> Optional[CellState]:
    """Cell state for ``rec``, or ``None`` when the fix has to be skipped.

    ``next_rec`` supplies the motion direction. With ``reverse`` it is the
    vehicle's previous record instead.
    """
    try:
        fix = locate((rec.lat, rec.lon), (next_rec.lat, next_rec.lon), ref, frame, reverse=reverse)
    except ZeroMotionError:
        return None
    if math.degrees(fix.heading_alignment) > cfg.heading_tolerance:
        return None
    lane = lane_index(fix.signed_offset, ref.effective_width, ref.lane_width)
    if lane is None:
        return None
    if fix.arclength <= 0.0 or fix.arclength >= ref.length:
        pa = np.array(project_to_local((rec.lat, rec.lon), frame))
        if _beyond_ends(pa, ref, fix.arclength):
            return None
    n_seg = max(1, math.ceil(ref.length / cfg.segment_length - 1e-9))
    segment = min(int(fix.arclength // cfg.segment_length), n_seg - 1)
    return CellState(CellId(lane, segment), rec.speed, rec.t, rec.vehicle_id)


def _sort_key(r: TelematicsRecord):
    return (r.t, r.lat, r.lon, r.speed)


def _dedupe(recs: List[TelematicsRecord]) -> List[TelematicsRecord]:
    out = []
    for r in recs:
        if out and r.t == out[-1].t:
            continue
        out.append(r)
    return out


def _discretize_vehicle(recs, corridor: Corridor, pair_gap: Optional[float]) -> List[CellState]:
    ref, frame, cfg = corridor.ref, corridor.frame, corridor.cfg
    seq = []
    for i, r in enumerate(recs):
        nxt = recs[i + 1] if i + 1 < len(recs) else None
        if nxt is not None and (pair_gap is None or nxt.t - r.t <= pair_gap):
            state = discretize_record(r, nxt, ref, frame, cfg)
        elif i > 0:
            state = discretize_record(r, recs[i - 1], ref, frame, cfg, reverse=True)
        else:
            state = None
        if state is not None:
            seq.append(state)
    return seq


def discretize_trajectories(
    records: Iterable[TelematicsRecord],
    g,
    cfg: DiscretizeConfig = DiscretizeConfig(),
    pair_gap: Optional[float] = None,
) -> List[List[CellState]]:
    """Per-vehicle, time-ordered cell-state sequences.

    Each record takes its motion direction from the vehicle's next record. A
    record without a usable successor (the last one, or one whose successor is
    more than ``pair_gap`` seconds away) falls back to the previous record
    with the side inverted. Output is sorted by vehicle id.
    """
    corridor = _as_corridor(g, cfg)
    groups: Dict[str, List[TelematicsRecord]] = defaultdict(list)
    for r in records:
        if keep_record(r, corridor):
            groups[r.vehicle_id].append(r)
    out = []
    for vid in sorted(groups):
        recs = _dedupe(sorted(groups[vid], key=_sort_key))
        if len(recs) < 2:
            continue
        seq = _discretize_vehicle(recs, corridor, pair_gap)
        if seq:
            out.append(seq)
    return out


class StreamDiscretizer:
    """Online counterpart of :func:`discretize_trajectories`.

    Each accepted record is held until its successor arrives or ``pair_gap``
    seconds of stream time pass, then finalized. Output matches the batch
    function called with the same ``pair_gap``.
    """

    def __init__(self, corridor: Corridor, pair_gap: float):
        self.corridor = corridor
        self.pair_gap = pair_gap
        self._pending: Dict[str, TelematicsRecord] = {}
        self._previous: Dict[str, TelematicsRecord] = {}
        self._watermark = -math.inf

    def _finalize(self, rec: TelematicsRecord, nxt: Optional[TelematicsRecord]) -> Optional[CellState]:
        c = self.corridor
        if nxt is not None:
            return discretize_record(rec, nxt, c.ref, c.frame, c.cfg)
        prev = self._previous.get(rec.vehicle_id)
        if prev is None:
            return None
        return discretize_record(rec, prev, c.ref, c.frame, c.cfg, reverse=True)

    def push(self, rec: TelematicsRecord) -> List[CellState]:
        if rec.t < self._watermark:
            raise StreamOrderError(f"record at t={rec.t} arrived after t={self._watermark}")
        out = self.advance(rec.t)
        if not keep_record(rec, self.corridor):
            return out
        vid = rec.vehicle_id
        held = self._pending.get(vid)
        if held is not None:
            if rec.t == held.t:
                return out
            if rec.t - held.t <= self.pair_gap:
                state = self._finalize(held, rec)
            else:
                state = self._finalize(held, None)
            if state is not None:
                out.append(state)
            self._previous[vid] = held
        self._pending[vid] = rec
        return out

    def advance(self, now: float) -> List[CellState]:
        """Finalize every held record whose pairing window closed before ``now``."""
        self._watermark = max(self._watermark, now)
        out = []
        for vid in [v for v, r in self._pending.items() if now - r.t > self.pair_gap]:
            held = self._pending.pop(vid)
            state = self._finalize(held, None)
            if state is not None:
                out.append(state)
            self._previous[vid] = held
        return out

    def flush(self) -> List[CellState]:
        out = []
        for vid in sorted(self._pending):
            held = self._pending.pop(vid)
            state = self._finalize(held, None)
            if state is not None:
                out.append(state)
            self._previous[vid] = held
        return out


def write_cell_states_csv(sequences: Iterable[Sequence[CellState]], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "t", "x", "y", "v"])
        for seq in sequences:
            for s in seq:
                w.writerow([s.vehicle_id, s.t, s.lane, s.segment, s.speed])
