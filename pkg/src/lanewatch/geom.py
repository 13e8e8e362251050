"""Corridor geometry: local projection, reference lines and lane matching.

All planar coordinates are (east, north) in meters relative to a per-corridor
origin. Bearings are compass bearings in radians, clockwise from north.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, FormatError, GeometryError, ZeroMotionError

EARTH_RADIUS_M = 6_371_008.8
DEFAULT_LANE_WIDTH = 3.7
DENSIFY_SPACING = 1.0

LEFT = "left"
RIGHT = "right"

LatLon = Tuple[float, float]


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on the mean-radius sphere."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def wrap_angle(a: float) -> float:
    """Absolute angular difference folded into [0, pi]."""
    a = math.fmod(abs(a), 2 * math.pi)
    return 2 * math.pi - a if a > math.pi else a


@dataclass(frozen=True)
class LocalFrame:
    lat0: float
    lon0: float
    meters_per_degree_lat: float
    meters_per_degree_lon: float

    @classmethod
    def at(cls, lat0: float, lon0: float) -> "LocalFrame":
        m_lat = EARTH_RADIUS_M * math.pi / 180.0
        return cls(lat0, lon0, m_lat, m_lat * math.cos(math.radians(lat0)))

    def __post_init__(self):
        if not (self.meters_per_degree_lat > 0 and self.meters_per_degree_lon > 0):
            raise GeometryError("local frame scale factors must be positive")


def _check_domain(lat: float, lon: float, frame: LocalFrame) -> None:
    if not (abs(lat - frame.lat0) < 1.0 and abs(lon - frame.lon0) < 1.0):
        raise GeometryError(
            f"point ({lat}, {lon}) is more than 1 degree from frame origin "
            f"({frame.lat0}, {frame.lon0})"
        )


def project_to_local(p: LatLon, frame: LocalFrame) -> Tuple[float, float]:
    """Equirectangular projection of ``(lat, lon)`` to ``(east, north)``."""
    lat, lon = p
    _check_domain(lat, lon, frame)
    return (
        (lon - frame.lon0) * frame.meters_per_degree_lon,
        (lat - frame.lat0) * frame.meters_per_degree_lat,
    )


def local_to_latlon(q: Tuple[float, float], frame: LocalFrame) -> LatLon:
    """Inverse of :func:`project_to_local`."""
    east, north = q
    return (
        frame.lat0 + north / frame.meters_per_degree_lat,
        frame.lon0 + east / frame.meters_per_degree_lon,
    )


@dataclass(frozen=True)
class CorridorGeometry:
    corridor_id: str
    centerline: Tuple[LatLon, ...]
    oneway: bool
    dual_carriageway: bool
    lanes: int
    anchor: LatLon
    lane_width: float = DEFAULT_LANE_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "centerline", tuple((float(a), float(b)) for a, b in self.centerline))
        object.__setattr__(self, "anchor", (float(self.anchor[0]), float(self.anchor[1])))
        if len(self.centerline) < 2:
            raise GeometryError("centerline needs at least two vertices")
        for p, q in zip(self.centerline, self.centerline[1:]):
            if p == q:
                raise GeometryError(f"repeated centerline vertex {p}")
        if self.lanes < 1:
            raise ConfigurationError("lane count must be positive")
        if not self.lane_width > 0:
            raise ConfigurationError("lane width must be positive")
        if not self.directional and self.lanes % 2:
            raise ConfigurationError(
                f"bidirectional corridor {self.corridor_id!r} has an odd lane count {self.lanes}"
            )

    @property
    def directional(self) -> bool:
        """True when the centerline itself serves as the reference line."""
        return self.oneway or self.dual_carriageway

    def frame(self) -> LocalFrame:
        return LocalFrame.at(*self.anchor)

    @classmethod
    def from_dict(cls, d: dict) -> "CorridorGeometry":
        try:
            width = d.get("lane_width_m")
            return cls(
                corridor_id=str(d["corridor_id"]),
                centerline=tuple(tuple(p) for p in d["centerline"]),
                oneway=bool(d["oneway"]),
                dual_carriageway=bool(d["dual_carriageway"]),
                lanes=int(d["lanes"]),
                anchor=tuple(d["anchor"]),
                lane_width=DEFAULT_LANE_WIDTH if width is None else float(width),
            )
        except KeyError as exc:
            raise FormatError(f"geometry file missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, (GeometryError, ConfigurationError)):
                raise
            raise FormatError(f"geometry file has a malformed field: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "corridor_id": self.corridor_id,
            "centerline": [list(p) for p in self.centerline],
            "oneway": self.oneway,
            "dual_carriageway": self.dual_carriageway,
            "lanes": self.lanes,
            "lane_width_m": self.lane_width,
            "anchor": list(self.anchor),
        }


def load_geometry(path) -> CorridorGeometry:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return CorridorGeometry.from_dict(doc)


def save_geometry(g: CorridorGeometry, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class ReferenceLine:
    vertices: np.ndarray
    arclength: np.ndarray
    bearing: np.ndarray
    effective_width: float
    effective_lane_count: int
    lane_width: float
    corridor_id: str = ""

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def nearest_vertex(self, q) -> int:
        d2 = ((self.vertices - np.asarray(q, dtype=float)) ** 2).sum(axis=1)
        return int(np.argmin(d2))

    def nearest_point(self, q) -> Tuple[np.ndarray, float, int]:
        """Foot of the perpendicular from ``q``: (point, arclength, segment index)."""
        return _nearest_on_polyline(self.vertices, self.arclength, np.asarray(q, dtype=float))

    def point_at(self, s: float) -> np.ndarray:
        """Planar point at arclength ``s``; linear extrapolation outside [0, length]."""
        v, arc = self.vertices, self.arclength
        if s <= 0:
            d = v[1] - v[0]
            return v[0] + d / np.hypot(*d) * s
        if s >= arc[-1]:
            d = v[-1] - v[-2]
            return v[-1] + d / np.hypot(*d) * (s - arc[-1])
        i = int(np.searchsorted(arc, s, side="right")) - 1
        f = (s - arc[i]) / (arc[i + 1] - arc[i])
        return v[i] + f * (v[i + 1] - v[i])

    def bearing_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.arclength, s, side="right") - 1, 0, len(self.bearing) - 1))
        return float(self.bearing[i])


def _nearest_on_polyline(v: np.ndarray, arc: np.ndarray, q: np.ndarray):
    p0 = v[:-1]
    d = v[1:] - p0
    seg2 = (d**2).sum(axis=1)
    t = np.clip(((q - p0) * d).sum(axis=1) / seg2, 0.0, 1.0)
    feet = p0 + t[:, None] * d
    dist2 = ((feet - q) ** 2).sum(axis=1)
    j = int(np.argmin(dist2))
    return feet[j], float(arc[j] + t[j] * math.sqrt(seg2[j])), j


def _bearings(v: np.ndarray) -> np.ndarray:
    d = np.diff(v, axis=0)
    b = np.arctan2(d[:, 0], d[:, 1])
    return np.append(b, b[-1])


def _arclength(v: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(v, axis=0).T))])


def densify(v: np.ndarray, spacing: float = DENSIFY_SPACING) -> np.ndarray:
    out = [v[:1]]
    for a, b in zip(v[:-1], v[1:]):
        k = max(1, math.ceil(math.hypot(*(b - a)) / spacing))
        f = np.arange(1, k + 1)[:, None] / k
        out.append(a + f * (b - a))
    return np.vstack(out)


def offset_polyline(v: np.ndarray, d: float) -> np.ndarray:
    """Shift a polyline ``d`` meters to its left (negative ``d`` shifts right)."""
    seg = np.diff(v, axis=0)
    seg /= np.hypot(*seg.T)[:, None]
    left = np.column_stack([-seg[:, 1], seg[:, 0]])
    normals = np.empty_like(v)
    normals[0], normals[-1] = left[0], left[-1]
    if len(v) > 2:
        mid = left[:-1] + left[1:]
        norm = np.hypot(*mid.T)[:, None]
        mid = mid / np.where(norm > 1e-12, norm, 1.0)
        # miter scaling keeps the offset parallel at bends
        cos_half = np.clip((mid * left[:-1]).sum(axis=1), 0.2, 1.0)
        normals[1:-1] = mid / cos_half[:, None]
    return v + d * normals


def build_reference_line(
    g: CorridorGeometry,
    frame: Optional[LocalFrame] = None,
    spacing: float = DENSIFY_SPACING,
) -> ReferenceLine:
    """Reference line for the carriageway that contains the anchor.

    Directional corridors use the centerline as is. Bidirectional ones offset
    the centerline by a quarter of the full width to both sides and keep the
    copy nearer to the anchor, halving the width and lane count.
    """
    frame = frame or g.frame()
    c = np.array([project_to_local(p, frame) for p in g.centerline])
    if np.any(np.hypot(*np.diff(c, axis=0).T) < 1e-9):
        raise GeometryError("centerline has coincident vertices after projection")
    total = g.lane_width * g.lanes
    if g.directional:
        line, width, count = c, total, g.lanes
    else:
        d = total / 4
        anchor = np.array(project_to_local(g.anchor, frame))
        candidates = [offset_polyline(c, +d), offset_polyline(c, -d)]
        dists = [
            np.hypot(*(_nearest_on_polyline(x, _arclength(x), anchor)[0] - anchor)) for x in candidates
        ]
        line = candidates[int(np.argmin(dists))]
        width, count = total / 2, g.lanes // 2
    line = densify(line, spacing)
    return ReferenceLine(
        vertices=line,
        arclength=_arclength(line),
        bearing=_bearings(line),
        effective_width=width,
        effective_lane_count=count,
        lane_width=g.lane_width,
        corridor_id=g.corridor_id,
    )


@dataclass(frozen=True)
class LateralFix:
    foot_point: Tuple[float, float]
    arclength: float
    signed_offset: float
    side: str
    heading_alignment: float


def locate(
    a: LatLon,
    b: LatLon,
    ref: ReferenceLine,
    frame: LocalFrame,
    reverse: bool = False,
) -> LateralFix:
    """Signed lateral offset of ``a`` using the motion ``a -> b`` for side.

    With ``reverse`` set, ``b`` is the *previous* sample and the side decided
    by the cross product is inverted (travel direction is ``b -> a``).
    """
    pa = np.array(project_to_local(a, frame))
    pb = np.array(project_to_local(b, frame))
    ab = pb - pa
    if not np.any(ab):
        raise ZeroMotionError("zero motion vector: sample and its neighbour coincide")
    foot, s, seg = ref.nearest_point(pa)
    ca = pa - foot
    z = ca[0] * ab[1] - ca[1] * ab[0]
    if reverse:
        right = z < 0
        travel = -ab
    else:
        right = z > 0
        travel = ab
    dist = float(math.hypot(*ca))
    if dist == 0.0:
        right = True
    heading = math.atan2(travel[0], travel[1])
    return LateralFix(
        foot_point=(float(foot[0]), float(foot[1])),
        arclength=s,
        signed_offset=dist if right else -dist,
        side=RIGHT if right else LEFT,
        heading_alignment=wrap_angle(heading - float(ref.bearing[seg])),
    )


def lane_index(delta: float, effective_width: float, lane_width: float) -> Optional[int]:
    """1-based lane from the signed offset, or ``None`` off the carriageway."""
    half = effective_width / 2
    if not (-half <= delta < half):
        return None
    n_lanes = max(1, round(effective_width / lane_width))
    return min(int(math.floor((delta + half) / lane_width)) + 1, n_lanes)


def lane_center_offset(lane: int, effective_width: float, lane_width: float) -> float:
    """Signed offset of a lane's centre line (inverse of :func:`lane_index`)."""
    return -effective_width / 2 + (lane - 0.5) * lane_width


def straight_corridor(
    corridor_id: str = "corridor",
    length: float = 400.0,
    lanes: int = 3,
    lat0: float = 43.05,
    lon0: float = -87.95,
    bearing_deg: float = 0.0,
    curvature: float = 0.0,
    oneway: bool = True,
    dual_carriageway: bool = False,
    lane_width: float = DEFAULT_LANE_WIDTH,
    vertex_spacing: float = 25.0,
) -> CorridorGeometry:
    """Synthetic corridor centred on ``(lat0, lon0)``.

    ``curvature`` (1/m) bends the alignment into a circular arc.
    """
    frame = LocalFrame.at(lat0, lon0)
    n = max(2, math.ceil(length / vertex_spacing) + 1)
    s = np.linspace(-length / 2, length / 2, n)
    theta = math.radians(bearing_deg) + curvature * s
    if curvature:
        th0 = math.radians(bearing_deg)
        east = (np.cos(th0) - np.cos(theta)) / curvature
        north = (np.sin(theta) - np.sin(th0)) / curvature
    else:
        east = s * math.sin(theta[0])
        north = s * math.cos(theta[0])
    pts = tuple(local_to_latlon((e, nn), frame) for e, nn in zip(east, north))
    return CorridorGeometry(
        corridor_id=corridor_id,
        centerline=pts,
        oneway=oneway,
        dual_carriageway=dual_carriageway,
        lanes=lanes,
        anchor=(lat0, lon0),
        lane_width=lane_width,
    )


__all__ = [
    "CorridorGeometry",
    "LateralFix",
    "LocalFrame",
    "ReferenceLine",
    "build_reference_line",
    "haversine",
    "lane_center_offset",
    "lane_index",
    "load_geometry",
    "local_to_latlon",
    "locate",
    "project_to_local",
    "save_geometry",
    "straight_corridor",
]
