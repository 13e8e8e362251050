"""Vehicle intention distribution and per-cell speed baselines.

The estimator is a plain count fold, so shards can be estimated separately
and merged before the model is finalized.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .discretize import CellId, CellState
from .errors import ConfigurationError, FormatError


@dataclass(frozen=True)
class EstimationConfig:
    max_gap: float = 4.5
    min_departures: int = 20
    speed_percentile: float = 0.25
    window_days: int = 7

    def __post_init__(self):
        if not self.max_gap > 0:
            raise ConfigurationError("max_gap must be positive")
        if not 0.0 <= self.speed_percentile <= 1.0:
            raise ConfigurationError("speed_percentile must lie in [0, 1]")
        if self.min_departures < 0:
            raise ConfigurationError("min_departures must be nonnegative")


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: element ``ceil(q*N)`` (1-based) of the sorted sample."""
    if not values:
        raise ValueError("nearest_rank of an empty sample")
    ordered = sorted(values)
    k = min(max(math.ceil(q * len(ordered)), 1), len(ordered))
    return ordered[k - 1]


@dataclass
class IntentionModel:
    corridor_id: str
    counts: Dict[CellId, Dict[CellId, int]]
    speed_baseline: Dict[CellId, float]
    exits: Dict[CellId, int] = field(default_factory=dict)
    default_baseline: Optional[float] = None
    segment_length: float = 10.0
    lane_count: int = 0
    min_departures: int = 20
    window_days: int = 7
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._probs: Dict[CellId, Dict[CellId, float]] = {}
        self._departures: Dict[CellId, int] = {}
        for src in set(self.counts) | set(self.exits):
            row = self.counts.get(src, {})
            total = sum(row.values()) + self.exits.get(src, 0)
            if total > 0:
                self._probs[src] = {dst: k / total for dst, k in row.items() if k > 0}
                self._departures[src] = total

    def departures(self, src: CellId) -> int:
        return self._departures.get(src, 0)

    def transitions(self, src: CellId) -> Dict[CellId, float]:
        """Destination distribution for ``src`` over grid cells (empty when unmodeled).

        Sums to ``1 - exit_probability(src)``.
        """
        return self._probs.get(src, {})

    def exit_probability(self, src: CellId) -> float:
        total = self._departures.get(src, 0)
        return self.exits.get(src, 0) / total if total else 0.0

    def probability(self, src: CellId, dst: CellId) -> float:
        return self._probs.get(src, {}).get(dst, 0.0)

    def baseline(self, cell: CellId) -> Optional[float]:
        return self.speed_baseline.get(cell, self.default_baseline)

    @property
    def max_probability(self) -> float:
        return max((p for row in self._probs.values() for p in row.values()), default=0.0)

    def __eq__(self, other):
        if not isinstance(other, IntentionModel):
            return NotImplemented
        return (
            self.corridor_id == other.corridor_id
            and _clean(self.counts) == _clean(other.counts)
            and {c: k for c, k in self.exits.items() if k} == {c: k for c, k in other.exits.items() if k}
            and self.speed_baseline == other.speed_baseline
            and self.default_baseline == other.default_baseline
            and self.segment_length == other.segment_length
            and self.lane_count == other.lane_count
        )

    def check_corridor(self, corridor_id: str) -> None:
        if self.corridor_id != corridor_id:
            raise ConfigurationError(
                f"model is for corridor {self.corridor_id!r}, not {corridor_id!r}"
            )


def _clean(counts):
    return {s: {d: k for d, k in row.items() if k} for s, row in counts.items() if any(row.values())}


def _excluded(t: float, windows) -> bool:
    return any(a <= t <= b for a, b in windows)


class IntentionEstimator:
    """Accumulates transition counts and per-cell speeds."""

    def __init__(
        self,
        corridor_id: str,
        cfg: EstimationConfig = EstimationConfig(),
        segment_length: float = 10.0,
        lane_count: int = 0,
    ):
        self.corridor_id = corridor_id
        self.cfg = cfg
        self.segment_length = segment_length
        self.lane_count = lane_count
        self.counts: Dict[CellId, Counter] = defaultdict(Counter)
        self.exits: Counter = Counter()
        self.speeds: Dict[CellId, List[float]] = defaultdict(list)

    def update(
        self,
        sequences: Iterable[Sequence[CellState]],
        exclude: Iterable[Tuple[float, float]] = (),
    ) -> "IntentionEstimator":
        windows = list(exclude)
        for seq in sequences:
            for i, s in enumerate(seq):
                if _excluded(s.t, windows):
                    continue
                self.speeds[s.cell].append(s.speed)
                nxt = seq[i + 1] if i + 1 < len(seq) else None
                if nxt is not None and _excluded(nxt.t, windows):
                    continue
                if nxt is not None and nxt.t - s.t <= self.cfg.max_gap:
                    self.counts[s.cell][nxt.cell] += 1
                else:
                    # no observed successor: the vehicle left the grid
                    self.exits[s.cell] += 1
        return self

    def merge(self, other: "IntentionEstimator") -> "IntentionEstimator":
        if other.corridor_id != self.corridor_id:
            raise ConfigurationError("cannot merge estimators of different corridors")
        for src, row in other.counts.items():
            self.counts[src].update(row)
        self.exits.update(other.exits)
        for cell, v in other.speeds.items():
            self.speeds[cell].extend(v)
        return self

    def finalize(self) -> IntentionModel:
        q = self.cfg.speed_percentile
        everything = [v for vs in self.speeds.values() for v in vs]
        default = nearest_rank(everything, q) if everything else None
        baselines = {}
        for cell, vs in self.speeds.items():
            vth = nearest_rank(vs, q) if len(vs) >= self.cfg.min_departures else default
            if vth is not None and vth > 0:
                baselines[cell] = vth
        if default is not None and default <= 0:
            default = None
        return IntentionModel(
            corridor_id=self.corridor_id,
            counts={s: dict(row) for s, row in sorted(self.counts.items()) if row},
            speed_baseline=dict(sorted(baselines.items())),
            exits=dict(sorted((c, k) for c, k in self.exits.items() if k)),
            default_baseline=default,
            segment_length=self.segment_length,
            lane_count=self.lane_count,
            min_departures=self.cfg.min_departures,
            window_days=self.cfg.window_days,
            config={
                "max_gap": self.cfg.max_gap,
                "min_departures": self.cfg.min_departures,
                "speed_percentile": self.cfg.speed_percentile,
            },
        )


def estimate_intention(
    sequences: Iterable[Sequence[CellState]],
    cfg: EstimationConfig = EstimationConfig(),
    corridor_id: str = "",
    exclude: Iterable[Tuple[float, float]] = (),
    segment_length: float = 10.0,
    lane_count: int = 0,
) -> IntentionModel:
    """Estimate transition probabilities and speed baselines in one pass.

    ``exclude`` lists (t_start, t_end) windows, typically labeled crash
    periods, whose records take no part in the estimate.
    """
    est = IntentionEstimator(corridor_id, cfg, segment_length, lane_count)
    return est.update(sequences, exclude).finalize()


def model_to_dict(m: IntentionModel) -> dict:
    return {
        "corridor_id": m.corridor_id,
        "L_seg": m.segment_length,
        "lanes": m.lane_count,
        "window_days": m.window_days,
        "min_departures": m.min_departures,
        "transitions": {
            src.key: [{"to": dst.key, "count": k} for dst, k in sorted(row.items())]
            for src, row in sorted(m.counts.items())
        },
        "exits": {c.key: k for c, k in sorted(m.exits.items())},
        "baselines": {c.key: v for c, v in sorted(m.speed_baseline.items())},
        "default_baseline": m.default_baseline,
        "config": m.config,
    }


def model_from_dict(doc: dict, source: str = "<model>") -> IntentionModel:
    def fail(where, msg):
        raise FormatError(f"{source}: {where}: {msg}")

    if not isinstance(doc, dict):
        fail("top level", "expected a JSON object")
    for key in ("corridor_id", "transitions", "baselines"):
        if key not in doc:
            fail(key, "missing field")
    counts: Dict[CellId, Dict[CellId, int]] = {}
    for src_key, row in doc["transitions"].items():
        try:
            src = CellId.parse(src_key)
        except ValueError:
            fail(f"transitions[{src_key!r}]", "bad cell key, expected 'x:y'")
        if not isinstance(row, list):
            fail(f"transitions[{src_key!r}]", "expected a list")
        dests = {}
        for j, item in enumerate(row):
            try:
                dst = CellId.parse(item["to"])
                k = item["count"]
            except (KeyError, TypeError, ValueError, AttributeError):
                fail(f"transitions[{src_key!r}][{j}]", "expected {'to': 'x:y', 'count': k}")
            if not isinstance(k, int) or k < 0:
                fail(f"transitions[{src_key!r}][{j}].count", "must be a nonnegative integer")
            dests[dst] = k
        counts[src] = dests
    baselines = {}
    for key, v in doc["baselines"].items():
        try:
            baselines[CellId.parse(key)] = float(v)
        except (TypeError, ValueError):
            fail(f"baselines[{key!r}]", "bad cell key or value")
    exits = {}
    for key, k in doc.get("exits", {}).items():
        try:
            cell = CellId.parse(key)
        except ValueError:
            fail(f"exits[{key!r}]", "bad cell key, expected 'x:y'")
        if not isinstance(k, int) or k < 0:
            fail(f"exits[{key!r}]", "must be a nonnegative integer")
        exits[cell] = k
    default = doc.get("default_baseline")
    return IntentionModel(
        corridor_id=str(doc["corridor_id"]),
        counts=counts,
        speed_baseline=baselines,
        exits=exits,
        default_baseline=None if default is None else float(default),
        segment_length=float(doc.get("L_seg", 10.0)),
        lane_count=int(doc.get("lanes", 0)),
        min_departures=int(doc.get("min_departures", 20)),
        window_days=int(doc.get("window_days", 7)),
        config=dict(doc.get("config", {})),
    )


def save_model(m: IntentionModel, path) -> None:
    """Write the model atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(model_to_dict(m), fh)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> IntentionModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return model_from_dict(doc, str(path))
