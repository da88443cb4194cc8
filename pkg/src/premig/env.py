"""Multi-vehicle pre-migration environment.

One episode = ``horizon`` slots. In each slot every vehicle uploads a task to
its serving RSU and picks a hybrid action: a discrete index (0 = keep it all,
j = pre-migrate to the j-th candidate) and a fraction to pre-migrate. Arrivals
are applied in ascending vehicle id, so later vehicles see the work queued by
earlier ones. Reward is the negated total latency of the vehicle's task.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from premig.config import Scenario
from premig.forecast import ForecastModel, predict_positions, predict_workload, region_assign
from premig.latency import LatencyBreakdown, LinkEnd, SlotContext, TaskSpec, evaluate
from premig.numerics import ContractViolation
from premig.world import (
    ConfigurationError,
    Position,
    candidate_rsus,
    distance,
    dwell_time,
    load_traces,
    serving_rsu,
    slot_velocities,
)


@dataclass(frozen=True)
class HybridAction:
    discrete: int = 0
    continuous: float = 0.0

    def __post_init__(self):
        if int(self.discrete) < 0:
            raise ContractViolation(f"discrete index {self.discrete} < 0")
        if not 0.0 <= float(self.continuous) <= 1.0:
            raise ContractViolation(f"fraction {self.continuous} outside [0, 1]")


NO_MIGRATE = HybridAction(0, 0.0)


@dataclass
class EnvConfig:
    slot_duration: float
    horizon: int
    candidate_slots: int
    workload_decay: float = 1.0  # multiplier on C_m * slot_duration drained per slot
    t_clip: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.candidate_slots < 1:
            raise ConfigurationError("horizon and candidate_slots must be >= 1")
        if self.slot_duration <= 0 or self.t_clip <= 0 or self.workload_decay < 0:
            raise ConfigurationError("slot_duration, t_clip must be > 0 and workload_decay >= 0")


@dataclass
class Observation:
    position: np.ndarray  # normalized (x, y)
    serving_workload_pred: float
    candidate_workload_preds: np.ndarray  # padded with 1.0
    last_total_latency: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, [self.serving_workload_pred],
                               self.candidate_workload_preds, [self.last_total_latency]])

    @classmethod
    def from_array(cls, a) -> "Observation":
        a = np.asarray(a, dtype=float)
        return cls(a[:2], float(a[2]), a[3:-1], float(a[-1]))


@dataclass
class StepResult:
    observations: np.ndarray  # (V, N_obs)
    rewards: np.ndarray  # (V,)
    breakdowns: list[LatencyBreakdown]
    done: bool
    infeasibility_flags: np.ndarray  # (V,) bool
    actions: list[HybridAction] = field(default_factory=list)  # after enforcement


# -- one slot, frozen ----------------------------------------------------------

@dataclass
class SlotSnapshot:
    """Everything needed to price any joint action in one slot."""
    scenario: Scenario
    slot: int
    positions: np.ndarray  # (V, 2)
    serving: list[int]
    candidates: list[list[int]]
    dwell: np.ndarray
    input_size: np.ndarray
    task_size: np.ndarray
    workloads: dict  # rsu id -> cycles at slot start

    @property
    def n_vehicles(self) -> int:
        return len(self.serving)

    def _link(self, v: int, rid: int, W: dict) -> LinkEnd:
        r = self.scenario.rsu(rid)
        d = distance(Position(*self.positions[v]), r.position)
        return LinkEnd(d, r.uplink_bandwidth, r.downlink_bandwidth, r.noise_power, r.gpu_capacity, W[rid])

    def target_of(self, v: int, a: HybridAction) -> int | None:
        c = self.candidates[v]
        return c[a.discrete - 1] if 1 <= a.discrete <= len(c) else None

    def enforce(self, v: int, a: HybridAction, W: dict | None = None) -> tuple[HybridAction, bool]:
        """Feasible version of ``a`` against workloads ``W`` plus an adjustment flag."""
        W = self.workloads if W is None else W
        sc = self.scenario
        flag = False
        if a.discrete > len(self.candidates[v]):
            a, flag = NO_MIGRATE, True
        if a.discrete == 0 and a.continuous != 0.0:
            a = NO_MIGRATE
        f = a.continuous
        demand = self.task_size[v] * sc.cycles_per_bit
        p = self.target_of(v, a)
        if p is not None and f > 0 and demand > 0:
            room = max(sc.rsu(p).max_workload - W[p], 0.0)
            if W[p] + f * demand > sc.rsu(p).max_workload:
                f = min(f, room / demand) * (1.0 - 1e-12)
                a, flag = HybridAction(a.discrete, f), True
        m = self.serving[v]
        if W[m] + (1.0 - f) * demand > sc.rsu(m).max_workload:
            flag = True  # the excess spills to the cloud when priced
        return a, flag

    def context(self, v: int, W: dict) -> SlotContext:
        sc = self.scenario
        m = sc.rsu(self.serving[v])
        veh = sc.vehicles[v]
        return SlotContext(TaskSpec(float(self.input_size[v]), float(self.task_size[v])),
                           veh.transmit_power, veh.cycles_per_bit, self._link(v, m.id, W),
                           float(self.dwell[v]), m.cloud_uplink_bandwidth, sc.cloud, sc.channel,
                           sc.rho, serving_cap=m.max_workload)

    def price(self, v: int, a: HybridAction, W: dict | None = None) -> LatencyBreakdown:
        """Latency of (already feasible) action ``a`` for vehicle ``v`` against ``W``."""
        W = self.workloads if W is None else W
        p = self.target_of(v, a)
        ctx = self.context(v, W)
        if p is None or a.continuous == 0.0:
            return evaluate(ctx)
        link = self.scenario.rsu(self.serving[v]).migration_bandwidth_to[p]
        return evaluate(ctx, a.continuous, self._link(v, p, W), link)

    def advance(self, v: int, a: HybridAction, W: dict):
        """Apply vehicle ``v``'s arrival on top of ``W``.

        Returns ``(enforced action, breakdown, flag, new workload map)``.
        """
        sc = self.scenario
        e_v = sc.cycles_per_bit
        a, flag = self.enforce(v, a, W)
        b = self.price(v, a, W)
        m, p = self.serving[v], self.target_of(v, a)
        f = a.continuous if p is not None else 0.0
        W = dict(W)
        W[m] = min(max(W[m] + ((1.0 - f) * self.task_size[v] - b.cloud_residual) * e_v, 0.0),
                   sc.rsu(m).max_workload)
        if p is not None and f > 0:
            W[p] = min(W[p] + f * self.task_size[v] * e_v, sc.rsu(p).max_workload)
        return a, b, flag, W

    def play(self, joint: list[HybridAction]):
        """Enforce and price a joint action with arrivals in ascending vehicle id.

        Returns ``(actions, breakdowns, flags, W)`` where ``W`` is the workload
        map after all arrivals (before the end-of-slot drain).
        """
        W = dict(self.workloads)
        acts, bds, flags = [], [], np.zeros(self.n_vehicles, dtype=bool)
        for v in range(self.n_vehicles):
            a, b, flags[v], W = self.advance(v, joint[v], W)
            acts.append(a)
            bds.append(b)
        return acts, bds, flags, W


# -- mobility ------------------------------------------------------------------

def episode_tracks(sc: Scenario, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """(V, n_samples, 2) positions, one per slot."""
    mob = sc.mobility
    V = len(sc.vehicles)
    dt = sc.slot_duration
    if mob.get("kind", "synthetic") == "trace":
        return _trace_tracks(sc, rng, n_samples)
    road = np.asarray(mob["road"], dtype=float)
    seg = np.linalg.norm(np.diff(road, axis=0), axis=1)
    total = float(seg.sum())
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    lo, hi = mob["speed"]
    platoons = int(mob.get("platoons", 0) or 0)
    spread = float(mob.get("platoon_spread", 0.0))
    if platoons > 0:
        anchors = rng.uniform(0, total, size=platoons)
        dirs = rng.choice([-1.0, 1.0], size=platoons)
        pspeed = rng.uniform(lo, hi, size=platoons)
        member = rng.integers(0, platoons, size=V)
        start = anchors[member] + rng.uniform(-spread, spread, size=V)
        direction = dirs[member]
        speed = pspeed[member] * rng.uniform(0.95, 1.05, size=V)
    else:
        start = rng.uniform(0, total, size=V)
        direction = rng.choice([-1.0, 1.0], size=V)
        speed = rng.uniform(lo, hi, size=V)
    t = np.arange(n_samples) * dt
    s = start[:, None] + direction[:, None] * speed[:, None] * t[None, :]
    period = 2 * total
    s = np.mod(s, period)
    s = np.where(s > total, period - s, s)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg[k]
    return road[k] + frac[..., None] * (road[k + 1] - road[k])


_TRACE_CACHE: dict = {}


def _trace_tracks(sc: Scenario, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    path = sc.mobility["path"]
    if path not in _TRACE_CACHE:
        with open(path, "rb") as fh:
            _TRACE_CACHE[path] = load_traces(fh, sc.projection)
    traces = _TRACE_CACHE[path]
    span = (n_samples - 1) * sc.slot_duration
    usable = [tr for tr in traces if tr.times[-1] - tr.times[0] >= span]
    if len(usable) < len(sc.vehicles):
        raise ConfigurationError(f"{path}: only {len(usable)} traces cover {span:.0f} s, "
                                 f"need {len(sc.vehicles)}")
    pick = rng.choice(len(usable), size=len(sc.vehicles), replace=False)
    out = []
    for i in pick:
        tr = usable[int(i)]
        t0 = rng.uniform(tr.times[0], tr.times[-1] - span)
        ts = t0 + np.arange(n_samples) * sc.slot_duration
        out.append(np.stack([np.interp(ts, tr.times, tr.xy[:, 0]), np.interp(ts, tr.times, tr.xy[:, 1])], 1))
    return np.stack(out)


# -- environment ---------------------------------------------------------------

class AvatarEnv:
    """Decentralized-observation, per-vehicle-reward environment over a :class:`Scenario`.

    ``forecaster`` supplies next-slot position forecasts for the workload
    entries of observations. With prediction on and no forecaster the true
    positions stand in for the forecast.
    """

    def __init__(self, scenario: Scenario, forecaster: ForecastModel | None = None,
                 prediction: bool | None = None, seed: int = 0, record: bool = False,
                 workload_decay: float = 1.0):
        if not scenario.vehicles or not scenario.rsus:
            raise ConfigurationError("scenario needs at least one vehicle and one RSU")
        self.sc = scenario
        self.cfg = EnvConfig(scenario.slot_duration, scenario.horizon, scenario.candidate_slots,
                             workload_decay, scenario.t_clip, seed)
        self.forecaster = forecaster
        self.prediction = scenario.prediction if prediction is None else bool(prediction)
        self.record = record
        self.log: list[dict] = []
        self.vehicle_ids = [v.id for v in scenario.vehicles]
        self._rsu_ids = [r.id for r in scenario.rsus]
        self._bounds = np.array(scenario.bounds, dtype=float)
        self.slot = 0
        self.done = True

    @property
    def n_agents(self) -> int:
        return len(self.vehicle_ids)

    @property
    def obs_dim(self) -> int:
        return 4 + self.cfg.candidate_slots

    @property
    def n_actions(self) -> int:
        return 1 + self.cfg.candidate_slots

    # -- episode lifecycle

    def reset(self, seed: int | None = None) -> np.ndarray:
        seed = self.cfg.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        sc, T, H = self.sc, self.cfg.horizon, self.sc.history
        V = self.n_agents
        self.tracks = episode_tracks(sc, rng, H + T)
        self.vel = np.stack([slot_velocities(tr, sc.slot_duration) for tr in self.tracks])
        lo, hi = sc.initial_workload
        self.workloads = {r.id: float(rng.uniform(lo, hi) * r.max_workload) for r in sc.rsus}
        self.input_size = rng.uniform(*sc.input_size, size=(T, V))
        self.task_size = rng.uniform(*sc.task_size, size=(T, V))
        # predicted per-RSU counts for each slot, from histories ending one slot earlier
        if self.forecaster is not None:
            hist = np.stack([self.tracks[:, t:t + H] for t in range(T)], 1)  # (V, T, H, 2)
            pred = predict_positions(self.forecaster, hist.reshape(V * T, H, 2)).reshape(V, T, 2)
        else:
            pred = self.tracks[:, H:H + T]
        regions = region_assign(pred.transpose(1, 0, 2).reshape(-1, 2), sc.rsus).reshape(T, V)
        self.pred_counts = np.stack([np.bincount(r[r >= 0], minlength=len(sc.rsus)) for r in regions])
        self.last_latency = np.zeros(V)
        self.slot = 1
        self.done = False
        self.log = []
        self._snap = None
        return self.observe_all()

    def _index(self) -> int:
        return self.sc.history + self.slot - 1

    def snapshot(self) -> SlotSnapshot:
        """Frozen view of the current slot (cached until the next step)."""
        if self.done:
            raise ContractViolation("episode finished; call reset()")
        if self._snap is not None:
            return self._snap
        sc, k, t = self.sc, self._index(), self.slot - 1
        pos = self.tracks[:, k]
        serving, cands, dwell = [], [], []
        for v, veh in enumerate(sc.vehicles):
            p = Position(*pos[v])
            m = serving_rsu(p, sc.rsus)
            serving.append(m)
            cands.append(candidate_rsus(p, self.vel[v, k], m, sc.rsus, veh.mode,
                                        sc.candidate_radius, limit=self.cfg.candidate_slots))
            dwell.append(dwell_time(p, self.vel[v, k], sc.rsu(m), sc.dwell_cap))
        self._snap = SlotSnapshot(sc, self.slot, pos.copy(), serving, cands, np.array(dwell),
                                  self.input_size[t].copy(), self.task_size[t].copy(), dict(self.workloads))
        return self._snap

    def predicted_workloads(self) -> dict:
        """Workload figures agents see: forecast-adjusted with prediction on, else current."""
        if not self.prediction:
            return dict(self.workloads)
        z = self.pred_counts[self.slot - 1]
        return {r.id: predict_workload(self.workloads[r.id], self.sc.zeta, int(z[i]), r.max_workload)
                for i, r in enumerate(self.sc.rsus)}

    def observe(self, v: int) -> Observation:
        """Observation of the vehicle at index ``v`` (position in ``vehicle_ids``)."""
        return self._observe(v, self.snapshot(), self.predicted_workloads())

    def _observe(self, v: int, snap: SlotSnapshot, pred: dict) -> Observation:
        sc = self.sc
        b = self._bounds
        xy = np.clip((snap.positions[v] - b[:2]) / (b[2:] - b[:2]), 0.0, 1.0)
        m = snap.serving[v]
        cand = np.ones(self.cfg.candidate_slots)
        for j, p in enumerate(snap.candidates[v]):
            cand[j] = pred[p] / sc.rsu(p).max_workload
        return Observation(xy, pred[m] / sc.rsu(m).max_workload, cand,
                           float(np.clip(self.last_latency[v], 0.0, self.cfg.t_clip)))

    def observe_all(self) -> np.ndarray:
        snap, pred = self.snapshot(), self.predicted_workloads()
        return np.stack([self._observe(v, snap, pred).as_array() for v in range(self.n_agents)])

    def action_mask(self) -> np.ndarray:
        """(V, 1 + candidate_slots) bool: which discrete indices exist this slot."""
        snap = self.snapshot()
        mask = np.zeros((self.n_agents, self.n_actions), dtype=bool)
        mask[:, 0] = True
        for v, c in enumerate(snap.candidates):
            mask[v, 1:1 + len(c)] = True
        return mask

    def enforce_constraints(self, v: int, a: HybridAction) -> tuple[HybridAction, bool]:
        return self.snapshot().enforce(v, a)

    def _joint_list(self, joint) -> list[HybridAction]:
        if isinstance(joint, dict):
            unknown = set(joint) - set(self.vehicle_ids)
            if unknown:
                raise ContractViolation(f"actions for unknown vehicle(s) {sorted(unknown)}")
            missing = set(self.vehicle_ids) - set(joint)
            if missing:
                raise ContractViolation(f"no action for vehicle(s) {sorted(missing)}")
            return [joint[i] for i in self.vehicle_ids]
        joint = list(joint)
        if len(joint) != self.n_agents:
            raise ContractViolation(f"expected {self.n_agents} actions, got {len(joint)}")
        return joint

    def step(self, joint) -> StepResult:
        snap = self.snapshot()
        acts, bds, flags, W = snap.play(self._joint_list(joint))
        rewards = np.array([-b.total for b in bds])
        drain = self.cfg.workload_decay * self.cfg.slot_duration
        for r in self.sc.rsus:
            self.workloads[r.id] = min(max(W[r.id] - r.gpu_capacity * drain, 0.0), r.max_workload)
        if self.record:
            for v, (a, b) in enumerate(zip(acts, bds)):
                self.log.append({"slot": self.slot, "vehicle": self.vehicle_ids[v], "serving": snap.serving[v],
                                 "target": snap.target_of(v, a), "discrete": a.discrete,
                                 "fraction": a.continuous, "breakdown": asdict(b),
                                 "reward": float(rewards[v]), "infeasible": bool(flags[v])})
        self.last_latency = np.array([b.total for b in bds])
        self._snap = None
        if self.slot >= self.cfg.horizon:
            self.done = True
            obs = np.zeros((self.n_agents, self.obs_dim))
        else:
            self.slot += 1
            obs = self.observe_all()
        return StepResult(obs, rewards, bds, self.done, flags, acts)

    def export_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def episode_return(rewards) -> tuple[np.ndarray, float]:
    """Sum over slots per agent and its mean over agents; ``rewards`` is (T, V)."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    per_agent = r.sum(axis=0)
    return per_agent, float(per_agent.mean())
