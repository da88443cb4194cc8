"""Geometry, RSU/vehicle specs, mobility traces and coverage queries."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_008.8


class ConfigurationError(ValueError):
    pass


class TraceParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class TraceValidationError(ValueError):
    def __init__(self, vehicle_id: int, msg: str):
        super().__init__(f"vehicle {vehicle_id}: {msg}")
        self.vehicle_id = vehicle_id


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


def distance(a: Position, b: Position) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class RsuSpec:
    id: int
    position: Position
    coverage_radius: float  # m
    uplink_bandwidth: float  # Hz
    downlink_bandwidth: float  # Hz
    gpu_capacity: float  # cycles/s
    max_workload: float  # cycles
    cloud_uplink_bandwidth: float  # bits/s
    noise_power: float  # W
    migration_bandwidth_to: dict = field(default_factory=dict)  # rsu id -> bits/s

    def __post_init__(self):
        for name in ("coverage_radius", "uplink_bandwidth", "downlink_bandwidth", "gpu_capacity",
                     "max_workload", "cloud_uplink_bandwidth", "noise_power"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"RSU {self.id}: {name} must be positive")
        if any(bw <= 0 for bw in self.migration_bandwidth_to.values()):
            raise ConfigurationError(f"RSU {self.id}: migration bandwidths must be positive")

    def covers(self, p: Position) -> bool:
        return distance(self.position, p) <= self.coverage_radius


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    transmit_power: float  # W
    cycles_per_bit: float
    mode: str = "urban"  # or "remote"

    def __post_init__(self):
        if not self.transmit_power > 0 or not self.cycles_per_bit > 0:
            raise ConfigurationError(f"vehicle {self.id}: power and cycles_per_bit must be positive")
        if self.mode not in ("urban", "remote"):
            raise ConfigurationError(f"vehicle {self.id}: mode must be urban or remote")


@dataclass
class MobilityTrace:
    vehicle_id: int
    times: np.ndarray  # (n,) seconds
    xy: np.ndarray  # (n, 2) meters

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(self.times) != len(self.xy):
            raise TraceValidationError(self.vehicle_id, "times and positions differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise TraceValidationError(self.vehicle_id, "timestamps are not strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def samples(self) -> list[tuple[float, Position]]:
        return [(float(t), Position(float(x), float(y))) for t, (x, y) in zip(self.times, self.xy)]


@dataclass
class WorldState:
    slot: int
    vehicle_positions: dict  # id -> Position
    rsu_workloads: dict  # id -> cycles
    serving: dict  # vehicle id -> rsu id


# -- lat/lon ingestion ---------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    """Equirectangular projection around a reference point."""
    ref_lat: float
    ref_lon: float

    def to_xy(self, lat, lon):
        lat, lon = np.asarray(lat, dtype=float), np.asarray(lon, dtype=float)
        x = EARTH_RADIUS_M * np.radians(lon - self.ref_lon) * math.cos(math.radians(self.ref_lat))
        y = EARTH_RADIUS_M * np.radians(lat - self.ref_lat)
        return x, y

    def to_latlon(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        lat = self.ref_lat + np.degrees(y / EARTH_RADIUS_M)
        lon = self.ref_lon + np.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(self.ref_lat))))
        return lat, lon


TRACE_HEADER = ["vehicle_id", "timestamp", "lat", "lon"]


def load_traces(source, projection: Projection) -> list[MobilityTrace]:
    """Parse trace CSV (``vehicle_id,timestamp,lat,lon``) from text or a binary stream.

    Rows of one vehicle must appear with strictly increasing timestamps;
    vehicles may be interleaved. Traces come back ordered by vehicle id.
    """
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TraceParseError(1, "empty file") from None
    if [h.strip() for h in header] != TRACE_HEADER:
        raise TraceParseError(1, f"expected header {','.join(TRACE_HEADER)}")
    rows: dict[int, list] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise TraceParseError(line_no, f"expected 4 fields, got {len(row)}")
        try:
            vid = int(row[0])
            t, lat, lon = (float(c) for c in row[1:])
        except ValueError as exc:
            raise TraceParseError(line_no, str(exc)) from None
        if not all(math.isfinite(v) for v in (t, lat, lon)):
            raise TraceParseError(line_no, "non-finite value")
        samples = rows.setdefault(vid, [])
        if samples and t <= samples[-1][0]:
            raise TraceValidationError(vid, f"timestamp {t} at line {line_no} does not increase")
        samples.append((t, lat, lon))
    traces = []
    for vid in sorted(rows):
        arr = np.array(rows[vid])
        x, y = projection.to_xy(arr[:, 1], arr[:, 2])
        traces.append(MobilityTrace(vid, arr[:, 0], np.stack([x, y], axis=1)))
    return traces


def dump_traces(traces: Iterable[MobilityTrace], projection: Projection) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for tr in traces:
        lat, lon = projection.to_latlon(tr.xy[:, 0], tr.xy[:, 1])
        for t, la, lo in zip(tr.times, lat, lon):
            w.writerow([tr.vehicle_id, repr(float(t)), repr(float(la)), repr(float(lo))])
    return out.getvalue()


# -- synthetic routes ----------------------------------------------------------

@dataclass
class RouteConfig:
    polyline: Sequence[Sequence[float]]
    speed: float  # m/s
    n_slots: int
    slot_duration: float = 1.0
    start_offset: float | None = 0.0  # m along the path; None draws it from the seed
    reverse: bool = False
    vehicle_id: int = 0


def synth_route(cfg: RouteConfig, seed: int) -> MobilityTrace:
    """Constant-speed motion along a polyline, one sample per slot.

    The vehicle bounces back at either end of the polyline.
    """
    pts = np.asarray(cfg.polyline, dtype=float)
    if cfg.reverse:
        pts = pts[::-1]
    if pts.ndim != 2 or len(pts) < 2:
        raise ConfigurationError("route polyline needs at least two points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg.sum())
    if total <= 0:
        raise ConfigurationError("route polyline has zero length")
    if cfg.speed < 0 or cfg.n_slots < 1 or cfg.slot_duration <= 0:
        raise ConfigurationError("route needs speed >= 0, n_slots >= 1, slot_duration > 0")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0.0, total) if cfg.start_offset is None else float(cfg.start_offset)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    times = np.arange(cfg.n_slots) * cfg.slot_duration
    s = start + cfg.speed * times
    # fold arc length into [0, total] (ping-pong)
    period = 2.0 * total
    s = np.mod(s, period)
    s = np.where(s > total, period - s, s)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[k] > 0, (s - cum[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
    xy = pts[k] + frac[:, None] * (pts[k + 1] - pts[k])
    return MobilityTrace(cfg.vehicle_id, times, xy)


# -- coverage ------------------------------------------------------------------

def serving_rsu(p: Position, rsus: Sequence[RsuSpec]) -> int:
    """Nearest covering RSU, else nearest overall; ties go to the smaller id."""
    if not rsus:
        raise ConfigurationError("no RSUs")
    ranked = sorted((distance(p, r.position), r.id, r) for r in rsus)
    for d, rid, r in ranked:
        if d <= r.coverage_radius:
            return rid
    return ranked[0][1]


def candidate_rsus(p: Position, heading: np.ndarray, serving: int, rsus: Sequence[RsuSpec],
                   mode: str, candidate_radius: float, limit: int | None = None) -> list[int]:
    """Pre-migration targets for a vehicle at ``p``.

    urban: every RSU within ``candidate_radius`` except the serving one, by id.
    If ``limit`` is given the nearest ``limit`` are kept (still listed by id).
    remote: the nearest RSU ahead of the vehicle (positive projection on its
    heading), or nothing.
    """
    others = [r for r in rsus if r.id != serving]
    if mode == "remote":
        h = np.asarray(heading, dtype=float)
        if not np.any(h):
            return []
        ahead = [(distance(p, r.position), r.id) for r in others
                 if float(np.dot(r.position.as_array() - p.as_array(), h)) > 0]
        return [min(ahead)[1]] if ahead else []
    near = sorted((distance(p, r.position), r.id) for r in others
                  if distance(p, r.position) <= candidate_radius)
    if limit is not None:
        near = near[:limit]
    return sorted(rid for _, rid in near)


def exit_distance(p: Position, heading: np.ndarray, center: Position, radius: float) -> float:
    """Distance along unit ``heading`` from ``p`` to the boundary of a disk (0 if outside)."""
    d = p.as_array() - center.as_array()
    dd = float(d @ d)
    if dd > radius * radius:
        return 0.0
    u = np.asarray(heading, dtype=float)
    b = float(d @ u)
    disc = b * b - (dd - radius * radius)
    return max(0.0, -b + math.sqrt(max(disc, 0.0)))


def dwell_time(p: Position, velocity: np.ndarray, rsu: RsuSpec, cap: float) -> float:
    """Seconds until a vehicle at ``p`` with ``velocity`` leaves ``rsu``'s coverage."""
    if not rsu.covers(p):
        return 0.0
    speed = float(np.hypot(*velocity))
    if speed == 0.0:
        return cap
    return exit_distance(p, np.asarray(velocity) / speed, rsu.position, rsu.coverage_radius) / speed


def slot_velocities(xy: np.ndarray, slot_duration: float) -> np.ndarray:
    """Per-sample velocity: backward difference, forward difference for the first sample."""
    xy = np.asarray(xy, dtype=float)
    if len(xy) < 2:
        return np.zeros_like(xy)
    v = np.empty_like(xy)
    v[1:] = np.diff(xy, axis=0) / slot_duration
    v[0] = v[1]
    return v
