"""Threshold calibration and detection metrics over labeled scenarios."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .detect import Alert, DetectorConfig, run_stream
from .discretize import CellId, Corridor
from .errors import ConfigurationError, FormatError, LanewatchError
from .model import IntentionModel
from .records import iter_records

CRASH = "crash"
NON_CRASH = "non_crash"
DEFAULT_GRACE = 600.0
LANE_TOLERANCE = 1
SEGMENT_TOLERANCE = 3


@dataclass(frozen=True)
class LabeledScenario:
    scenario_id: str
    records_path: Path
    label: str
    crash_window: Optional[Tuple[float, float]] = None
    crash_cell: Optional[CellId] = None

    def __post_init__(self):
        if self.label not in (CRASH, NON_CRASH):
            raise ConfigurationError(f"{self.scenario_id}: label must be 'crash' or 'non_crash'")
        if self.label == CRASH:
            if self.crash_window is None:
                raise ConfigurationError(f"{self.scenario_id}: crash scenario needs a crash_window")
            if not self.crash_window[0] < self.crash_window[1]:
                raise ConfigurationError(f"{self.scenario_id}: crash_window must have t_start < t_end")

    @property
    def is_crash(self) -> bool:
        return self.label == CRASH


def load_manifest(path) -> List[LabeledScenario]:
    """Read a scenario manifest; record paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, list):
        raise FormatError(f"{path}: manifest must be a JSON list")
    out = []
    for i, e in enumerate(doc):
        try:
            window = e.get("crash_window")
            cell = e.get("crash_cell")
            out.append(
                LabeledScenario(
                    scenario_id=str(e["scenario_id"]),
                    records_path=path.parent / e["records_path"],
                    label=e["label"],
                    crash_window=None if window is None else (float(window[0]), float(window[1])),
                    crash_cell=None if cell is None else CellId(int(cell[0]), int(cell[1])),
                )
            )
        except (KeyError, TypeError, IndexError, ValueError, AttributeError) as exc:
            raise FormatError(f"{path}: entry {i}: {exc}") from None
    return out


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def compute_metrics(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    """Precision, recall, F1 and accuracy. Undefined ratios come back as 0 and flagged."""
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("confusion counts must be nonnegative")
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("confusion matrix is empty")
    p_def, r_def = tp + fp > 0, tp + fn > 0
    p = tp / (tp + fp) if p_def else 0.0
    r = tp / (tp + fn) if r_def else 0.0
    return Metrics(
        precision=p,
        recall=r,
        f1=f1_score(p, r),
        accuracy=(tp + tn) / total,
        precision_undefined=not p_def,
        recall_undefined=not r_def,
        f1_undefined=p + r == 0,
    )


@dataclass(frozen=True)
class ScenarioScore:
    scenario_id: str
    label: str
    score: float
    error: Optional[str] = None


def neighbourhood(cell: CellId, lanes: int, segments: int) -> List[CellId]:
    """Cells within the localization tolerance of ``cell``, clipped to the grid."""
    return [
        CellId(x, y)
        for x in range(max(1, cell.lane - LANE_TOLERANCE), min(lanes, cell.lane + LANE_TOLERANCE) + 1)
        for y in range(max(0, cell.segment - SEGMENT_TOLERANCE), min(segments - 1, cell.segment + SEGMENT_TOLERANCE) + 1)
    ]


def localized(alert_cell: CellId, crash_cell: CellId) -> bool:
    return (
        abs(alert_cell.lane - crash_cell.lane) <= LANE_TOLERANCE
        and abs(alert_cell.segment - crash_cell.segment) <= SEGMENT_TOLERANCE
    )


def score_scenario(
    sc: LabeledScenario,
    g,
    model: IntentionModel,
    cfg: DetectorConfig = DetectorConfig(),
    grace: float = DEFAULT_GRACE,
) -> ScenarioScore:
    """Maximum accumulated risk for one scenario with alerting disabled."""
    corridor = g if isinstance(g, Corridor) else Corridor(g)
    cfg = replace(cfg, threshold=math.inf)
    try:
        watch = None
        if sc.is_crash and sc.crash_cell is not None:
            watch = neighbourhood(sc.crash_cell, corridor.lane_count, corridor.segment_count)
        t_end = sc.crash_window[1] + grace if sc.is_crash else None
        res = run_stream(iter_records(sc.records_path), corridor, model, cfg, t_end=t_end, watch=watch)
    except (OSError, LanewatchError, ValueError) as exc:
        return ScenarioScore(sc.scenario_id, sc.label, math.nan, f"{type(exc).__name__}: {exc}")
    if not sc.is_crash:
        return ScenarioScore(sc.scenario_id, sc.label, max(res.trace, default=0.0))
    lo, hi = sc.crash_window[0], sc.crash_window[1] + grace
    trace = res.watch_trace if watch is not None else res.trace
    best = 0.0
    for k, a in zip(res.ticks, trace):
        t_close = (k + 1) * cfg.tick
        if lo <= t_close <= hi:
            best = max(best, a)
    return ScenarioScore(sc.scenario_id, sc.label, best)


def score_scenarios(
    scenarios: Iterable[LabeledScenario],
    g,
    model: IntentionModel,
    cfg: DetectorConfig = DetectorConfig(),
    grace: float = DEFAULT_GRACE,
) -> List[ScenarioScore]:
    corridor = g if isinstance(g, Corridor) else Corridor(g)
    return [score_scenario(sc, corridor, model, cfg, grace) for sc in scenarios]


@dataclass(frozen=True)
class ThresholdRow:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class EvaluationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    threshold: float
    per_threshold: List[ThresholdRow] = field(default_factory=list)
    errors: List[ScenarioScore] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "TP": self.tp,
            "FP": self.fp,
            "FN": self.fn,
            "TN": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "threshold": self.threshold,
            "per_threshold": [asdict(r) for r in self.per_threshold],
            "errors": [{"scenario_id": e.scenario_id, "error": e.error} for e in self.errors],
        }
        d.update(self.extra)
        return d


def _confusion(scores: Sequence[Tuple[float, bool]], t: float) -> Tuple[int, int, int, int]:
    tp = fp = fn = tn = 0
    for s, crash in scores:
        hit = s >= t
        if crash:
            tp, fn = tp + hit, fn + (not hit)
        else:
            fp, tn = fp + hit, tn + (not hit)
    return tp, fp, fn, tn


def sweep_thresholds(scores: Iterable) -> EvaluationReport:
    """F1-maximizing threshold over the observed maxima (plus 0).

    ``scores`` holds :class:`ScenarioScore` objects or ``(score, is_crash)``
    pairs. Entries carrying an error are set aside in ``report.errors``.
    Ties in F1 go to the larger threshold.
    """
    pairs: List[Tuple[float, bool]] = []
    errors = []
    for s in scores:
        if isinstance(s, ScenarioScore):
            if s.error is not None:
                errors.append(s)
                continue
            pairs.append((float(s.score), s.label == CRASH))
        else:
            pairs.append((float(s[0]), bool(s[1])))
    if not any(c for _, c in pairs) or all(c for _, c in pairs):
        raise ValueError("threshold sweep needs at least one crash and one non-crash scenario")
    candidates = sorted({0.0} | {s for s, _ in pairs})
    rows = []
    best = None
    for t in candidates:
        tp, fp, fn, tn = _confusion(pairs, t)
        m = compute_metrics(tp, fp, fn, tn)
        row = ThresholdRow(t, m.precision, m.recall, m.f1, tp, fp, fn, tn)
        rows.append(row)
        if best is None or m.f1 >= best[1].f1:
            best = (row, m)
    row, m = best
    return EvaluationReport(
        tp=row.tp, fp=row.fp, fn=row.fn, tn=row.tn,
        precision=m.precision, recall=m.recall, f1=m.f1, accuracy=m.accuracy,
        threshold=row.threshold, per_threshold=rows, errors=errors,
    )


@dataclass(frozen=True)
class ScenarioOutcome:
    scenario_id: str
    label: str
    detected: bool
    first_alert: Optional[Alert] = None
    latency: Optional[float] = None
    localized: Optional[bool] = None


def judge_scenario(sc: LabeledScenario, alerts: Sequence[Alert], grace: float = DEFAULT_GRACE) -> ScenarioOutcome:
    """Crash scenarios are credited for alerts inside the crash window (plus grace);
    any alert in a non-crash scenario is a false alarm."""
    ordered = sorted(alerts, key=lambda a: (a.t, a.cell))
    if not sc.is_crash:
        return ScenarioOutcome(sc.scenario_id, sc.label, bool(ordered), ordered[0] if ordered else None)
    lo, hi = sc.crash_window[0], sc.crash_window[1] + grace
    inside = [a for a in ordered if lo <= a.t <= hi]
    if not inside:
        return ScenarioOutcome(sc.scenario_id, sc.label, False)
    first = inside[0]
    loc = None if sc.crash_cell is None else localized(first.cell, sc.crash_cell)
    return ScenarioOutcome(sc.scenario_id, sc.label, True, first, first.t - sc.crash_window[0], loc)


def evaluate_alerts(
    scenarios: Sequence[LabeledScenario],
    alerts: Dict[str, Sequence[Alert]],
    threshold: float = math.nan,
    grace: float = DEFAULT_GRACE,
) -> Tuple[EvaluationReport, List[ScenarioOutcome]]:
    """Confusion matrix, localization rate and latency from alert sets."""
    outcomes = [judge_scenario(sc, alerts.get(sc.scenario_id, ()), grace) for sc in scenarios]
    tp = sum(o.detected for o in outcomes if o.label == CRASH)
    fn = sum(not o.detected for o in outcomes if o.label == CRASH)
    fp = sum(o.detected for o in outcomes if o.label == NON_CRASH)
    tn = sum(not o.detected for o in outcomes if o.label == NON_CRASH)
    m = compute_metrics(tp, fp, fn, tn)
    judged = [o.localized for o in outcomes if o.detected and o.localized is not None]
    latencies = [o.latency for o in outcomes if o.detected and o.latency is not None]
    extra = {
        "localization_rate": sum(judged) / len(judged) if judged else None,
        "median_latency_s": statistics.median(latencies) if latencies else None,
        "false_alarm_scenarios": fp,
    }
    report = EvaluationReport(tp, fp, fn, tn, m.precision, m.recall, m.f1, m.accuracy, threshold, extra=extra)
    return report, outcomes


def write_report(report: EvaluationReport, json_path, csv_path=None) -> None:
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "f1"])
            for r in report.per_threshold:
                w.writerow([f"{r.threshold:.3f}", f"{r.precision:.3f}", f"{r.recall:.3f}", f"{r.f1:.3f}"])
