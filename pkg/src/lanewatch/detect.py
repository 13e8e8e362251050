"""Online crash detection: per-vehicle risks, accumulation, reset and alerts."""

from __future__ import annotations

import copy
import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .discretize import CellId, CellState, Corridor, DiscretizeConfig, StreamDiscretizer
from .errors import ConfigurationError, FormatError, GeometryError, StreamOrderError
from .model import IntentionModel
from .records import TelematicsRecord

MISSED_EXPECTATION = "missed_expectation"
OBSERVED_LITERAL = "observed_literal"
ANOMALY_GATED = "anomaly_gated"
ANY_TRAVERSAL = "any_traversal"

COMPONENTS = ("p", "s", "l")
MIN_COMPLEMENT = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    w_p: float = 3.0
    w_s: float = 2.0
    w_l: float = 4.0
    epsilon_p: float = 0.05
    threshold: float = 30.0
    tick: float = 1.0
    max_gap: float = 4.5
    transition_mode: str = MISSED_EXPECTATION
    reset_mode: str = ANOMALY_GATED
    reset_tolerance: float = 0.0

    def __post_init__(self):
        if min(self.w_p, self.w_s, self.w_l) < 0:
            raise ConfigurationError("risk weights must be nonnegative")
        if not 0.0 <= self.epsilon_p < 1.0:
            raise ConfigurationError("epsilon_p must lie in [0, 1)")
        if not self.threshold > 0:
            raise ConfigurationError("threshold must be positive")
        if not self.tick > 0:
            raise ConfigurationError("tick must be positive")
        if not self.max_gap > 0:
            raise ConfigurationError("max_gap must be positive")
        if self.transition_mode not in (MISSED_EXPECTATION, OBSERVED_LITERAL):
            raise ConfigurationError(f"unknown transition_mode {self.transition_mode!r}")
        if self.reset_mode not in (ANOMALY_GATED, ANY_TRAVERSAL):
            raise ConfigurationError(f"unknown reset_mode {self.reset_mode!r}")
        if self.reset_tolerance < 0:
            raise ConfigurationError("reset_tolerance must be nonnegative")

    @property
    def weights(self) -> Dict[str, float]:
        return {"p": self.w_p, "s": self.w_s, "l": self.w_l}


@dataclass(frozen=True)
class RiskContribution:
    cell: CellId
    component: str
    value: float
    vehicle_id: str = ""
    t: float = 0.0


@dataclass(frozen=True)
class Alert:
    cell: CellId
    t: float
    score: float
    p_sum: float
    s_sum: float
    l_sum: float

    def to_dict(self, corridor_id: str) -> dict:
        return {
            "corridor_id": corridor_id,
            "t": self.t,
            "lane": self.cell.lane,
            "segment": self.cell.segment,
            "score": self.score,
            "p_sum": self.p_sum,
            "s_sum": self.s_sum,
            "l_sum": self.l_sum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Alert":
        return cls(
            CellId(int(d["lane"]), int(d["segment"])),
            float(d["t"]),
            float(d["score"]),
            float(d.get("p_sum", 0.0)),
            float(d.get("s_sum", 0.0)),
            float(d.get("l_sum", 0.0)),
        )


@dataclass
class DetectorState:
    corridor_id: str
    lanes: int
    segments: int
    risk: Dict[CellId, float] = field(default_factory=dict)
    parts: Dict[CellId, List[float]] = field(default_factory=dict)
    last_seen: Dict[str, Tuple[CellId, float]] = field(default_factory=dict)
    latched: Set[CellId] = field(default_factory=set)
    current_tick: int = -1
    capped: int = 0

    @classmethod
    def for_corridor(cls, corridor: Corridor, start_tick: int = -1) -> "DetectorState":
        return cls(corridor.corridor_id, corridor.lane_count, corridor.segment_count, current_tick=start_tick)

    def contains(self, cell: CellId) -> bool:
        return 1 <= cell.lane <= self.lanes and 0 <= cell.segment < self.segments

    def max_risk(self, cells: Optional[Iterable[CellId]] = None) -> float:
        if cells is None:
            return max(self.risk.values(), default=0.0)
        return max((self.risk.get(c, 0.0) for c in cells), default=0.0)

    def matrix(self) -> np.ndarray:
        """Risk map as a (segments, lanes) array."""
        out = np.zeros((self.segments, self.lanes))
        for c, a in self.risk.items():
            if self.contains(c):
                out[c.segment, c.lane - 1] = a
        return out

    def snapshot(self) -> "DetectorState":
        return copy.deepcopy(self)


def surprisal(p: float) -> float:
    """-ln(1 - p), capped where ``1 - p`` underflows the floor."""
    return -math.log(max(1.0 - p, MIN_COMPLEMENT))


def transition_risk(
    prev: CellId,
    curr: CellId,
    model: IntentionModel,
    cfg: DetectorConfig = DetectorConfig(),
    vehicle_id: str = "",
    t: float = 0.0,
) -> List[RiskContribution]:
    """Position-transition risk for one observed move ``prev -> curr``.

    Source cells with fewer than ``model.min_departures`` recorded departures
    are treated as unmodeled. In missed-expectation mode every sufficiently likely destination that the
    vehicle did *not* reach is charged at that destination. In literal mode
    the observed move itself is charged at ``curr``.
    """
    dist = model.transitions(prev)
    if not dist or model.departures(prev) < model.min_departures:
        return []
    if cfg.transition_mode == OBSERVED_LITERAL:
        p = dist.get(curr, 0.0)
        if p > cfg.epsilon_p:
            return [RiskContribution(curr, "p", surprisal(p), vehicle_id, t)]
        return []
    return [
        RiskContribution(dst, "p", surprisal(p), vehicle_id, t)
        for dst, p in sorted(dist.items())
        if p > cfg.epsilon_p and dst != curr
    ]


def speed_risk(v: float, v_th: Optional[float]) -> float:
    if not v_th or v_th <= 0 or v > v_th:
        return 0.0
    return (v_th - v) / v_th


def lateral_risk(prev_lane: int, curr_lane: int) -> float:
    return 1.0 if prev_lane != curr_lane else 0.0


def tick_index(t: float, tick: float) -> int:
    return int(math.floor(t / tick))


def tick(
    state: DetectorState,
    batch: Sequence[CellState],
    model: IntentionModel,
    cfg: DetectorConfig = DetectorConfig(),
    index: Optional[int] = None,
) -> Tuple[DetectorState, List[Alert]]:
    """Advance the risk map by one tick. ``state`` is updated in place and returned."""
    k = state.current_tick + 1 if index is None else index
    if k <= state.current_tick:
        raise StreamOrderError(f"tick {k} is not after tick {state.current_tick}")
    start, end = k * cfg.tick, (k + 1) * cfg.tick
    w = cfg.weights

    agg: Dict[CellId, List[float]] = defaultdict(lambda: [0.0, 0.0, 0.0])
    own: Dict[CellId, float] = {}
    for s in sorted(batch, key=lambda c: (c.t, c.vehicle_id)):
        if tick_index(s.t, cfg.tick) != k:
            raise StreamOrderError(f"cell state at t={s.t} lies outside tick [{start}, {end})")
        if not state.contains(s.cell):
            raise GeometryError(f"cell {s.cell} is outside corridor {state.corridor_id!r}")
        prev = state.last_seen.get(s.vehicle_id)
        if prev is not None and s.t <= prev[1]:
            raise StreamOrderError(f"vehicle {s.vehicle_id}: t={s.t} does not follow t={prev[1]}")

        r_l = 0.0
        if prev is not None and s.t - prev[1] <= cfg.max_gap:
            for c in transition_risk(prev[0], s.cell, model, cfg, s.vehicle_id, s.t):
                if c.value >= -math.log(MIN_COMPLEMENT):
                    state.capped += 1
                agg[c.cell][0] += c.value
            r_l = lateral_risk(prev[0].lane, s.cell.lane)
        r_s = speed_risk(s.speed, model.baseline(s.cell))
        agg[s.cell][1] += r_s
        agg[s.cell][2] += r_l
        own[s.cell] = own.get(s.cell, 0.0) + w["s"] * r_s + w["l"] * r_l
        state.last_seen[s.vehicle_id] = (s.cell, s.t)

    alerts = []
    for cell in sorted(set(agg) | set(own)):
        rp, rs, rl = agg.get(cell, (0.0, 0.0, 0.0))
        inc = (w["p"] * rp, w["s"] * rs, w["l"] * rl)
        if cell in own and (cfg.reset_mode == ANY_TRAVERSAL or own[cell] <= cfg.reset_tolerance):
            state.risk.pop(cell, None)
            state.parts.pop(cell, None)
            state.latched.discard(cell)
            continue
        a = state.risk.get(cell, 0.0) + sum(inc)
        if a <= 0.0:
            continue
        state.risk[cell] = a
        parts = state.parts.setdefault(cell, [0.0, 0.0, 0.0])
        for i in range(3):
            parts[i] += inc[i]
        if a >= cfg.threshold and cell not in state.latched:
            state.latched.add(cell)
            alerts.append(Alert(cell, end, a, *parts))
    state.current_tick = k
    return state, alerts


@dataclass
class StreamResult:
    corridor_id: str
    alerts: List[Alert]
    ticks: List[int]
    trace: List[float]
    watch_trace: List[float] = field(default_factory=list)
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    state: Optional[DetectorState] = None
    risk_history: List[Dict[CellId, float]] = field(default_factory=list)

    @property
    def max_risk(self) -> float:
        return max(self.trace, default=0.0)


class _TickDriver:
    """Feeds ordered cell states through :func:`tick` and records traces."""

    def __init__(self, corridor, model, cfg, watch, snapshot_ticks, keep_history):
        self.corridor = corridor
        self.model = model
        self.cfg = cfg
        self.watch = None if watch is None else list(watch)
        self.snapshot_ticks = set(snapshot_ticks or ())
        self.keep_history = keep_history
        self.state: Optional[DetectorState] = None
        self.buckets: Dict[int, List[CellState]] = defaultdict(list)
        self.result = StreamResult(corridor.corridor_id, [], [], [])

    def add(self, states: Iterable[CellState]) -> None:
        for s in states:
            k = tick_index(s.t, self.cfg.tick)
            if self.state is not None and k <= self.state.current_tick:
                raise StreamOrderError(f"cell state at t={s.t} arrived after its tick was closed")
            self.buckets[k].append(s)

    def start(self, k0: int) -> None:
        if self.state is None:
            self.state = DetectorState.for_corridor(self.corridor, start_tick=k0 - 1)

    def run_until(self, k_last: int) -> None:
        """Process every tick up to and including ``k_last``."""
        if self.state is None:
            return
        while self.state.current_tick < k_last:
            k = self.state.current_tick + 1
            _, alerts = tick(self.state, self.buckets.pop(k, []), self.model, self.cfg, k)
            r = self.result
            r.alerts.extend(alerts)
            r.ticks.append(k)
            r.trace.append(self.state.max_risk())
            if self.watch is not None:
                r.watch_trace.append(self.state.max_risk(self.watch))
            if k in self.snapshot_ticks:
                r.snapshots[k] = self.state.matrix()
            if self.keep_history:
                r.risk_history.append(dict(self.state.risk))

    def finish(self) -> StreamResult:
        self.result.state = self.state
        return self.result


def _prepare(g, model: IntentionModel, disc_cfg: Optional[DiscretizeConfig]) -> Corridor:
    corridor = g if isinstance(g, Corridor) else Corridor(g, disc_cfg or DiscretizeConfig())
    model.check_corridor(corridor.corridor_id)
    return corridor


def run_stream(
    records: Iterable[TelematicsRecord],
    g,
    model: IntentionModel,
    cfg: DetectorConfig = DetectorConfig(),
    disc_cfg: Optional[DiscretizeConfig] = None,
    t_start: Optional[float] = None,
    t_end: Optional[float] = None,
    watch: Optional[Iterable[CellId]] = None,
    snapshot_ticks: Iterable[int] = (),
    keep_history: bool = False,
) -> StreamResult:
    """Run the detector over a time-ordered record stream.

    Records are discretized as they arrive; a tick is closed once the stream
    has moved more than ``max_gap`` past its end, so every record in it has
    been paired. The trace holds max accumulated risk per tick; ``watch``
    adds a second trace restricted to the given cells.
    """
    corridor = _prepare(g, model, disc_cfg)
    sd = StreamDiscretizer(corridor, cfg.max_gap)
    driver = _TickDriver(corridor, model, cfg, watch, snapshot_ticks, keep_history)
    last_t = -math.inf
    if t_start is not None:
        driver.start(tick_index(t_start, cfg.tick))
    for rec in records:
        if rec.t < last_t:
            raise StreamOrderError(f"records out of order: t={rec.t} after t={last_t}")
        last_t = rec.t
        driver.start(tick_index(rec.t, cfg.tick))
        driver.add(sd.push(rec))
        # ticks ending at or before rec.t - max_gap are complete
        closable = math.ceil((rec.t - cfg.max_gap) / cfg.tick) - 2
        driver.run_until(closable)
    driver.add(sd.flush())
    ends = [t for t in (last_t, t_end) if t is not None and t > -math.inf]
    if ends:
        driver.start(tick_index(min(ends), cfg.tick))
        driver.run_until(tick_index(max(ends), cfg.tick))
    return driver.finish()


def replay(
    sequences: Iterable[Sequence[CellState]],
    g,
    model: IntentionModel,
    cfg: DetectorConfig = DetectorConfig(),
    disc_cfg: Optional[DiscretizeConfig] = None,
    t_start: Optional[float] = None,
    t_end: Optional[float] = None,
    watch: Optional[Iterable[CellId]] = None,
    snapshot_ticks: Iterable[int] = (),
    keep_history: bool = False,
) -> StreamResult:
    """Tick-by-tick replay of pre-discretized cell states (the batch path)."""
    corridor = _prepare(g, model, disc_cfg)
    states = sorted((s for seq in sequences for s in seq), key=lambda s: (s.t, s.vehicle_id))
    driver = _TickDriver(corridor, model, cfg, watch, snapshot_ticks, keep_history)
    times = [s.t for s in states] + [t for t in (t_start, t_end) if t is not None]
    if not times:
        return driver.finish()
    driver.start(tick_index(min(times), cfg.tick))
    driver.add(states)
    driver.run_until(tick_index(max(times), cfg.tick))
    return driver.finish()


def write_alerts(alerts: Iterable[Alert], corridor_id: str, path, scenario_id: Optional[str] = None, mode="w") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode) as fh:
        for a in alerts:
            d = a.to_dict(corridor_id)
            if scenario_id is not None:
                d["scenario_id"] = scenario_id
            fh.write(json.dumps(d) + "\n")


def read_alerts(path) -> List[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                Alert.from_dict(d)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad alert record ({exc})") from None
            out.append(d)
    return out


def write_trace(result: StreamResult, path, tick: float = 1.0) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "max_risk"])
        for k, a in zip(result.ticks, result.trace):
            w.writerow([(k + 1) * tick, repr(a)])


def write_snapshot(matrix: np.ndarray, path) -> None:
    """Risk-map frame: one row per segment, one column per lane."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment"] + [f"lane_{i + 1}" for i in range(matrix.shape[1])])
        for y, row in enumerate(matrix):
            w.writerow([y] + [repr(float(v)) for v in row])
