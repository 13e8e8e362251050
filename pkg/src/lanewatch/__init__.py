"""Lane-level freeway crash detection from sparse connected-vehicle telematics."""

__version__ = "0.1.0"

from .calibrate import (
    EvaluationReport,
    LabeledScenario,
    Metrics,
    compute_metrics,
    evaluate_alerts,
    f1_score,
    load_manifest,
    score_scenarios,
    sweep_thresholds,
)
from .detect import Alert, DetectorConfig, DetectorState, replay, run_stream, tick
from .discretize import CellId, CellState, Corridor, DiscretizeConfig, discretize_trajectories
from .errors import ConfigurationError, FormatError, GeometryError, LanewatchError, StreamOrderError
from .geom import CorridorGeometry, build_reference_line, lane_index, load_geometry, locate
from .model import EstimationConfig, IntentionEstimator, IntentionModel, estimate_intention, load_model, save_model
from .records import TelematicsRecord, read_records, write_records
from .sim import Blockage, ScenarioConfig, default_corridor, make_suite, simulate

__all__ = [name for name in dir() if not name.startswith("_")]
