"""One flat, documented schema for every numeric default.

Keys are ``section.name``. Values resolve in order: built-in defaults, then
a JSON config file (``--config`` or the ``LANEWATCH_CONFIG`` variable), then
``--set key=value`` overrides.
"""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

from .detect import DetectorConfig
from .discretize import CellId, DiscretizeConfig
from .errors import ConfigurationError, FormatError
from .geom import CorridorGeometry
from .model import EstimationConfig
from .sim import Blockage, ScenarioConfig

ENV_VAR = "LANEWATCH_CONFIG"

_SIM_SKIP = {"corridor", "blockage", "segment_length"}


def _section(prefix: str, obj) -> Dict[str, object]:
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj)}


def default_schema() -> Dict[str, object]:
    schema: Dict[str, object] = {}
    schema.update(_section("detector", DetectorConfig()))
    schema.update(_section("discretize", DiscretizeConfig()))
    schema.update(_section("estimation", EstimationConfig()))
    sim = ScenarioConfig()
    schema.update({f"sim.{f.name}": getattr(sim, f.name) for f in fields(sim) if f.name not in _SIM_SKIP})
    schema.update(
        {
            # single-scenario blockage; lane 0 means none
            "sim.blockage_lane": 0,
            "sim.blockage_segment": 0,
            "sim.blockage_onset": 300.0,
            "sim.blockage_duration": 900.0,
            "suite.n_crash": 0,
            "suite.n_normal": 0,
            "suite.onset_min": 300.0,
            "suite.onset_max": 600.0,
            "suite.blockage_duration": 900.0,
            "suite.margin_upstream": 12,
            "suite.margin_downstream": 8,
            "calibrate.grace": 600.0,
        }
    )
    return schema


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot use {value!r} as {type(default).__name__}") from None


def _flatten(doc: Mapping, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class Settings:
    """Resolved configuration values with typed accessors."""

    def __init__(self, values: Optional[Mapping[str, object]] = None):
        self.schema = default_schema()
        self.values = dict(self.schema)
        if values:
            self.update(values)

    def update(self, values: Mapping[str, object]) -> "Settings":
        for key, v in values.items():
            if key not in self.schema:
                raise ConfigurationError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, v, self.schema[key])
        return self

    def apply_overrides(self, pairs: Iterable[str]) -> "Settings":
        parsed = {}
        for item in pairs:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not key=value")
            parsed[key.strip()] = value.strip()
        return self.update(parsed)

    def __getitem__(self, key: str):
        return self.values[key]

    def _build(self, prefix: str, cls):
        kwargs = {f.name: self.values[f"{prefix}.{f.name}"] for f in fields(cls) if f"{prefix}.{f.name}" in self.values}
        return cls(**kwargs)

    def detector(self) -> DetectorConfig:
        return self._build("detector", DetectorConfig)

    def discretize(self) -> DiscretizeConfig:
        return self._build("discretize", DiscretizeConfig)

    def estimation(self) -> EstimationConfig:
        return self._build("estimation", EstimationConfig)

    def scenario(self, corridor: Optional[CorridorGeometry] = None) -> ScenarioConfig:
        kwargs = {
            f.name: self.values[f"sim.{f.name}"]
            for f in fields(ScenarioConfig)
            if f.name not in _SIM_SKIP
        }
        kwargs["segment_length"] = self.values["discretize.segment_length"]
        if corridor is not None:
            kwargs["corridor"] = corridor
        lane = self.values["sim.blockage_lane"]
        if lane:
            onset = self.values["sim.blockage_onset"]
            kwargs["blockage"] = Blockage(
                CellId(lane, self.values["sim.blockage_segment"]),
                onset,
                onset + self.values["sim.blockage_duration"],
            )
        return ScenarioConfig(**kwargs)

    def to_dict(self) -> Dict[str, object]:
        return dict(sorted(self.values.items()))


def load_config_file(path) -> Dict[str, object]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return _flatten(doc)


def resolve_settings(config_path=None, overrides: Iterable[str] = (), env: Optional[Mapping[str, str]] = None) -> Settings:
    env = os.environ if env is None else env
    settings = Settings()
    path = config_path or env.get(ENV_VAR)
    if path:
        settings.update(load_config_file(path))
    return settings.apply_overrides(overrides)
