"""``lanewatch`` command line: offline model building and calibration, online detection."""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .calibrate import evaluate_alerts, load_manifest, score_scenarios, sweep_thresholds, write_report
from .config import Settings, resolve_settings
from .detect import Alert, read_alerts, run_stream, tick_index, write_alerts, write_snapshot, write_trace
from .discretize import Corridor, discretize_trajectories
from .errors import ConfigurationError, LanewatchError
from .geom import load_geometry, save_geometry
from .model import IntentionEstimator, load_model, save_model
from .records import iter_records, write_records
from .sim import default_corridor, make_suite, scenario_config_to_dict, simulate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"status": "error", "error": kind, "message": message})


@contextmanager
def staged_output(out_dir: Path):
    """Write into a scratch directory and move files into ``out_dir`` only on success."""
    out_dir = Path(out_dir)
    parent = out_dir.parent
    parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".lanewatch-", dir=parent))
    try:
        yield scratch
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in sorted(scratch.rglob("*")):
            if item.is_file():
                dest = out_dir / item.relative_to(scratch)
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(item, dest)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _require(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: {p} does not exist")
    return p


def _settings(args) -> Settings:
    s = resolve_settings(args.config, args.set or ())
    extra = {}
    if args.seed is not None:
        extra["sim.seed"] = args.seed
    if args.mode is not None:
        extra["detector.transition_mode"] = args.mode
    if args.reset is not None:
        extra["detector.reset_mode"] = args.reset
    s.update(extra)
    s.detector()  # validate early
    return s


def _corridor(args, settings: Settings) -> Corridor:
    return Corridor(load_geometry(_require(args.geometry, "--geometry")), settings.discretize())


def cmd_simulate(args, settings: Settings) -> dict:
    geometry = load_geometry(_require(args.geometry, "--geometry")) if args.geometry else default_corridor()
    cfg = settings.scenario(geometry)
    out = Path(args.out)
    with staged_output(out) as tmp:
        save_geometry(geometry, tmp / "geometry.json")
        n_crash, n_normal = settings["suite.n_crash"], settings["suite.n_normal"]
        if n_crash or n_normal:
            manifest = make_suite(
                n_crash,
                n_normal,
                replace(cfg, blockage=None),
                seed=cfg.seed,
                out_dir=tmp,
                onset_range=(settings["suite.onset_min"], settings["suite.onset_max"]),
                blockage_duration=settings["suite.blockage_duration"],
                segment_margin=(settings["suite.margin_upstream"], settings["suite.margin_downstream"]),
            )
            return {"scenarios": len(manifest), "manifest": str(out / "manifest.json")}
        records, truth = simulate(cfg)
        write_records(records, tmp / "records.jsonl")
        truth.write_csv(tmp / "truth.csv")
        (tmp / "scenario.json").write_text(json.dumps(scenario_config_to_dict(cfg), indent=2, default=str) + "\n")
    return {"records": len(records), "label": cfg.label}


def cmd_build_model(args, settings: Settings) -> dict:
    corridor = _corridor(args, settings)
    # (path, excluded windows); labeled crash windows never enter the estimate
    sources = [(_require(p, "--records"), []) for p in (args.records or [])]
    if args.manifest:
        for sc in load_manifest(_require(args.manifest, "--manifest")):
            sources.append((_require(str(sc.records_path), "records_path"), [sc.crash_window] if sc.is_crash else []))
    if not sources:
        raise UsageError("--records or --manifest is required")
    est = IntentionEstimator(
        corridor.corridor_id, settings.estimation(), corridor.cfg.segment_length, corridor.lane_count
    )
    for p, exclude in sources:
        est.update(discretize_trajectories(iter_records(p), corridor), exclude=exclude)
    model = est.finalize()
    with staged_output(Path(args.out)) as tmp:
        save_model(model, tmp / "model.json")
    return {"sources": len(model.counts), "model": str(Path(args.out) / "model.json")}


def cmd_calibrate(args, settings: Settings) -> dict:
    corridor = _corridor(args, settings)
    model = load_model(_require(args.model, "--model"))
    scenarios = load_manifest(_require(args.manifest, "--manifest"))
    scores = score_scenarios(scenarios, corridor, model, settings.detector(), settings["calibrate.grace"])
    report = sweep_thresholds(scores)
    report.extra["scores"] = [
        {"scenario_id": s.scenario_id, "label": s.label, "score": s.score} for s in scores if s.error is None
    ]
    with staged_output(Path(args.out)) as tmp:
        write_report(report, tmp / "report.json", tmp / "thresholds.csv")
    return {"threshold": report.threshold, "f1": report.f1, "errors": len(report.errors)}


def _detect_one(records_path: Path, corridor, model, settings, trace_path=None):
    cfg = settings.detector()
    res = run_stream(iter_records(records_path), corridor, model, cfg)
    if trace_path is not None:
        write_trace(res, trace_path, cfg.tick)
    return res


def cmd_detect(args, settings: Settings) -> dict:
    corridor = _corridor(args, settings)
    model = load_model(_require(args.model, "--model"))
    n = 0
    with staged_output(Path(args.out)) as tmp:
        alerts_path = tmp / "alerts.jsonl"
        alerts_path.touch()
        if args.manifest:
            for sc in load_manifest(_require(args.manifest, "--manifest")):
                trace = tmp / "traces" / f"{sc.scenario_id}.csv" if args.trace else None
                res = _detect_one(sc.records_path, corridor, model, settings, trace)
                write_alerts(res.alerts, corridor.corridor_id, alerts_path, sc.scenario_id, mode="a")
                n += len(res.alerts)
        else:
            paths = args.records or []
            if len(paths) != 1:
                raise UsageError("detect takes exactly one --records file (or --manifest)")
            trace = tmp / "trace.csv" if args.trace else None
            res = _detect_one(_require(paths[0], "--records"), corridor, model, settings, trace)
            write_alerts(res.alerts, corridor.corridor_id, alerts_path)
            n = len(res.alerts)
    return {"alerts": n}


def cmd_evaluate(args, settings: Settings) -> dict:
    scenarios = load_manifest(_require(args.manifest, "--manifest"))
    grouped = defaultdict(list)
    for d in read_alerts(_require(args.alerts, "--alerts")):
        if "scenario_id" not in d:
            raise ConfigurationError("alerts must carry scenario_id (run detect with --manifest)")
        grouped[d["scenario_id"]].append(Alert.from_dict(d))
    report, outcomes = evaluate_alerts(
        scenarios, grouped, settings["detector.threshold"], settings["calibrate.grace"]
    )
    report.extra["scenarios"] = [
        {
            "scenario_id": o.scenario_id,
            "label": o.label,
            "detected": o.detected,
            "latency_s": o.latency,
            "localized": o.localized,
            "first_alert": None if o.first_alert is None else [o.first_alert.cell.lane, o.first_alert.cell.segment, o.first_alert.t],
        }
        for o in outcomes
    ]
    with staged_output(Path(args.out)) as tmp:
        write_report(report, tmp / "evaluation.json")
    return {"TP": report.tp, "FP": report.fp, "FN": report.fn, "TN": report.tn, "f1": report.f1}


def cmd_snapshot(args, settings: Settings) -> dict:
    corridor = _corridor(args, settings)
    model = load_model(_require(args.model, "--model"))
    if not args.records or len(args.records) != 1:
        raise UsageError("snapshot takes exactly one --records file")
    if not args.at:
        raise UsageError("--at is required (comma-separated times in seconds)")
    cfg = settings.detector()
    try:
        times = [float(x) for x in args.at.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--at: bad time list {args.at!r}") from None
    ticks = {tick_index(t, cfg.tick): t for t in times}
    res = run_stream(
        iter_records(_require(args.records[0], "--records")),
        corridor,
        model,
        cfg,
        t_end=max(times),
        snapshot_ticks=ticks,
    )
    with staged_output(Path(args.out)) as tmp:
        for k, t in sorted(ticks.items()):
            if k not in res.snapshots:
                raise ConfigurationError(f"time {t} lies before the first record")
            write_snapshot(res.snapshots[k], tmp / f"snapshot_t{t:g}.csv")
    return {"frames": len(ticks)}


COMMANDS = {
    "simulate": cmd_simulate,
    "build-model": cmd_build_model,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "snapshot": cmd_snapshot,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--geometry", help="corridor geometry JSON")
    common.add_argument("--model", help="intention model JSON")
    common.add_argument("--records", action="append", help="telematics JSONL (repeatable for build-model)")
    common.add_argument("--manifest", help="scenario manifest JSON")
    common.add_argument("--alerts", help="alert JSONL (evaluate)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="JSON config file (default: $LANEWATCH_CONFIG)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["missed_expectation", "observed_literal"])
    common.add_argument("--reset", choices=["anomaly_gated", "any_traversal"])
    common.add_argument("--trace", action="store_true", help="detect: also write per-tick max-risk CSV")
    common.add_argument("--at", help="snapshot: comma-separated times (s)")

    parser = _Parser(prog="lanewatch", description="Lane-level crash detection from sparse telematics.")
    parser.add_argument("--version", action="version", version=f"lanewatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        settings = _settings(args)
        summary = COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(_error_line("usage", str(exc)), file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(_error_line("missing_file", str(exc)), file=sys.stderr)
        return EXIT_FAILURE
    except (LanewatchError, ValueError, OSError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps({"status": "ok", "command": args.command, **summary}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
