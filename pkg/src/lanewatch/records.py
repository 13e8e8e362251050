"""Raw telematics records and their JSONL representation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

from .errors import FormatError


@dataclass(frozen=True)
class TelematicsRecord:
    vehicle_id: str
    t: float
    lat: float
    lon: float
    speed: float
    heading: Optional[float] = None

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError(f"non-finite timestamp for {self.vehicle_id}")
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinates out of range: ({self.lat}, {self.lon})")
        if not self.speed >= 0:
            raise ValueError(f"negative or NaN speed {self.speed}")

    def to_dict(self) -> dict:
        d = {
            "vehicle_id": self.vehicle_id,
            "t": self.t,
            "lat": self.lat,
            "lon": self.lon,
            "speed_mps": self.speed,
        }
        if self.heading is not None:
            d["heading_deg"] = self.heading
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TelematicsRecord":
        heading = d.get("heading_deg")
        return cls(
            vehicle_id=str(d["vehicle_id"]),
            t=float(d["t"]),
            lat=float(d["lat"]),
            lon=float(d["lon"]),
            speed=float(d["speed_mps"]),
            heading=None if heading is None else float(heading),
        )


def iter_records(path) -> Iterator[TelematicsRecord]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield TelematicsRecord.from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None


def read_records(path) -> List[TelematicsRecord]:
    return list(iter_records(path))


def write_records(records: Iterable[TelematicsRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")
