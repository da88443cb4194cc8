"""Scenario configuration: YAML/dict in, resolved :class:`Scenario` out."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from premig.latency import ChannelParams, CloudSpec
from premig.units import quantity
from premig.world import ConfigurationError, Position, Projection, RsuSpec, VehicleSpec

# Urban road, 6 RSUs on alternating sides, 10 vehicles.
DEFAULT_SCENARIO: dict = {
    "name": "urban-6rsu-10veh",
    "scenario_seed": 7,
    "slot_duration": "12 s",
    "horizon": 30,
    "history": 12,
    "candidate_radius": "700 m",
    "candidate_slots": 2,
    "dwell_cap": "120 s",
    "t_clip": "60 s",
    "map": {"bounds": [0.0, -100.0, 3000.0, 100.0]},
    "projection": {"ref_lat": 22.5312, "ref_lon": 114.0439},
    "channel": {"gain": 4.11, "carrier_frequency": "2.0 GHz"},
    "cloud": {"gpu_capacity": "75 GHz", "vehicle_downlink_rate": "200 Mbps"},
    "rho": 1.0,
    "task": {
        "input_size": ["12 MB", "20 MB"],
        "task_size": ["50 MB", "250 MB"],
        "cycles_per_unit": "0.5 Gcycles/MB",
    },
    "initial_workload": [0.0, 0.2],
    "rsu_defaults": {
        "coverage_radius": "300 m",
        "uplink_bandwidth": ["200 MHz", "600 MHz"],
        "downlink_bandwidth": ["200 MHz", "600 MHz"],
        "gpu_capacity": ["10 GHz", "30 GHz"],
        "max_workload": "600 Gcycles",
        "migration_bandwidth": ["500 Mbps", "900 Mbps"],
        "cloud_uplink_bandwidth": "1 Gbps",
        "noise_power": "-80 dBm",
    },
    "rsus": [
        {"id": 1, "position": [250.0, 20.0]},
        {"id": 2, "position": [750.0, -20.0]},
        {"id": 3, "position": [1250.0, 20.0]},
        {"id": 4, "position": [1750.0, -20.0]},
        {"id": 5, "position": [2250.0, 20.0]},
        {"id": 6, "position": [2750.0, -20.0]},
    ],
    "vehicle_defaults": {"transmit_power": "0.2 W", "mode": "urban"},
    "vehicles": 10,
    "mobility": {
        "kind": "synthetic",
        "road": [[0.0, 0.0], [3000.0, 0.0]],
        "speed": ["10 m/s", "25 m/s"],
        # vehicles travel in groups, so they contend for the same RSUs
        "platoons": 2,
        "platoon_spread": "100 m",
    },
    "zeta": None,
    "prediction": True,
    "forecaster": {"hidden": 32, "dropout": 0.05, "epochs": 60, "batch": 40, "episodes": 24},
}


def _num(v, kind):
    return quantity(v, kind)


def _draw(v, kind, rng: np.random.Generator) -> float:
    if isinstance(v, (list, tuple)):
        lo, hi = (_num(x, kind) for x in v)
        return float(rng.uniform(lo, hi)) if hi > lo else lo
    return _num(v, kind)


def _range(v, kind) -> tuple[float, float]:
    if isinstance(v, (list, tuple)):
        lo, hi = (_num(x, kind) for x in v)
    else:
        lo = hi = _num(v, kind)
    if hi < lo:
        raise ConfigurationError(f"range {v} is reversed")
    return lo, hi


def _mobility(m: dict) -> dict:
    kind = m.get("kind", "synthetic")
    if kind == "trace":
        if "path" not in m:
            raise ConfigurationError("trace mobility needs a path")
        return {"kind": "trace", "path": str(m["path"])}
    if kind != "synthetic":
        raise ConfigurationError(f"unknown mobility kind {kind!r}")
    road = [[float(a), float(b)] for a, b in m["road"]]
    if len(road) < 2:
        raise ConfigurationError("mobility road needs at least two points")
    return {"kind": "synthetic", "road": road, "speed": _range(m["speed"], "speed"),
            "platoons": int(m.get("platoons", 0) or 0),
            "platoon_spread": _num(m.get("platoon_spread", 0.0), "length")}


@dataclass
class Scenario:
    raw: dict
    rsus: list[RsuSpec]
    vehicles: list[VehicleSpec]
    slot_duration: float
    horizon: int
    history: int
    candidate_radius: float
    candidate_slots: int
    dwell_cap: float
    t_clip: float
    bounds: tuple[float, float, float, float]
    projection: Projection
    channel: ChannelParams
    cloud: CloudSpec
    rho: float
    input_size: tuple[float, float]
    task_size: tuple[float, float]
    initial_workload: tuple[float, float]
    mobility: dict
    zeta: float
    prediction: bool
    forecaster: dict = field(default_factory=dict)

    def rsu(self, rid: int) -> RsuSpec:
        return self._by_id[rid]

    def __post_init__(self):
        self._by_id = {r.id: r for r in self.rsus}

    @property
    def cycles_per_bit(self) -> float:
        return self.vehicles[0].cycles_per_bit

    def fingerprint(self) -> str:
        return fingerprint(self.raw)


def fingerprint(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg: dict, path: str, value) -> dict:
    """Copy of ``cfg`` with the dotted ``path`` set to ``value``."""
    out = copy.deepcopy(cfg)
    node = out
    keys = path.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigurationError(f"sweep path {path!r}: {k!r} is not a section")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigurationError(f"sweep path {path!r} does not exist")
    node[keys[-1]] = value
    return out


def get_path(cfg: dict, path: str):
    node = cfg
    for k in path.split("."):
        node = node[k]
    return node


def load_config_file(path) -> dict:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def build_scenario(cfg: dict | None = None) -> Scenario:
    """Resolve a (partial) scenario mapping on top of :data:`DEFAULT_SCENARIO`."""
    raw = merge(DEFAULT_SCENARIO, cfg or {})
    rng = np.random.default_rng(int(raw["scenario_seed"]))
    d = raw["rsu_defaults"]
    e_v = _num(raw["task"]["cycles_per_unit"], "density")
    specs = []
    mig = {}
    entries = raw["rsus"]
    if not entries:
        raise ConfigurationError("scenario has no RSUs")
    ids = [int(r["id"]) for r in entries]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate RSU ids")
    for r in entries:
        merged = {**d, **r}
        specs.append(dict(
            id=int(r["id"]),
            position=Position(*map(float, r["position"])),
            coverage_radius=_draw(merged["coverage_radius"], "length", rng),
            uplink_bandwidth=_draw(merged["uplink_bandwidth"], "frequency", rng),
            downlink_bandwidth=_draw(merged["downlink_bandwidth"], "frequency", rng),
            gpu_capacity=_draw(merged["gpu_capacity"], "compute", rng),
            max_workload=_draw(merged["max_workload"], "cycles", rng),
            cloud_uplink_bandwidth=_draw(merged["cloud_uplink_bandwidth"], "rate", rng),
            noise_power=_draw(merged["noise_power"], "power", rng),
        ))
        mig[int(r["id"])] = r.get("migration_bandwidth_to", {})
    # symmetric backhaul unless a pair is given explicitly
    pair_bw = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            explicit = mig[a].get(b, mig[b].get(a))
            bw = _draw(explicit if explicit is not None else d["migration_bandwidth"], "rate", rng)
            pair_bw[(a, b)] = pair_bw[(b, a)] = bw
    rsus = [RsuSpec(**s, migration_bandwidth_to={b: pair_bw[(s["id"], b)] for b in ids if b != s["id"]})
            for s in specs]

    vd = raw["vehicle_defaults"]
    ventries = raw["vehicles"]
    if isinstance(ventries, int):
        ventries = [{"id": k} for k in range(ventries)]
    if not ventries:
        raise ConfigurationError("scenario has no vehicles")
    vehicles = []
    for v in ventries:
        merged = {**vd, **v}
        vehicles.append(VehicleSpec(int(v["id"]), _num(merged["transmit_power"], "power"), e_v,
                                    merged.get("mode", "urban")))
    task_size = _range(raw["task"]["task_size"], "size")
    zeta = raw.get("zeta")
    zeta = _num(zeta, "cycles") if zeta is not None else 0.5 * (task_size[0] + task_size[1]) * e_v
    horizon = int(raw["horizon"])
    slots = int(raw["candidate_slots"])
    if horizon < 1 or slots < 1:
        raise ConfigurationError("horizon and candidate_slots must be >= 1")
    return Scenario(
        raw=raw,
        rsus=sorted(rsus, key=lambda r: r.id),
        vehicles=sorted(vehicles, key=lambda v: v.id),
        slot_duration=_num(raw["slot_duration"], "time"),
        horizon=horizon,
        history=int(raw["history"]),
        candidate_radius=_num(raw["candidate_radius"], "length"),
        candidate_slots=slots,
        dwell_cap=_num(raw["dwell_cap"], "time"),
        t_clip=_num(raw["t_clip"], "time"),
        bounds=tuple(float(b) for b in raw["map"]["bounds"]),
        projection=Projection(float(raw["projection"]["ref_lat"]), float(raw["projection"]["ref_lon"])),
        channel=ChannelParams(float(raw["channel"]["gain"]), _num(raw["channel"]["carrier_frequency"], "frequency")),
        cloud=CloudSpec(_num(raw["cloud"]["gpu_capacity"], "compute"),
                        _num(raw["cloud"]["vehicle_downlink_rate"], "rate")),
        rho=float(raw["rho"]),
        input_size=_range(raw["task"]["input_size"], "size"),
        task_size=task_size,
        initial_workload=tuple(float(x) for x in raw["initial_workload"]),
        mobility=_mobility(raw["mobility"]),
        zeta=zeta,
        prediction=bool(raw["prediction"]),
        forecaster=raw.get("forecaster", {}),
    )
