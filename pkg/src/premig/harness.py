"""Experiment orchestration: cells of (sweep value, seed), metric files, comparison, plot data.

Every deterministic output is written with sorted keys and ``repr`` floats so
that the same (config, seed) reproduces files byte for byte. Wall-clock time
goes to a separate ``timing.json`` per cell.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from premig.baselines import POLICIES, DEFAULT_GRID, baseline_actions
from premig.config import build_scenario, fingerprint, get_path, load_config_file, merge, set_path, Scenario
from premig.env import AvatarEnv, episode_tracks
from premig.forecast import (
    ForecastModel,
    denormalize,
    eval_metrics,
    load_forecaster,
    predict_batch,
    save_forecaster,
    train_forecaster,
    window_dataset,
)
from premig.mappo import TrainConfig, load_learner, rollout, save_learner, train, write_curve
from premig.numerics import ContractViolation
from premig.world import ConfigurationError, MobilityTrace

log = logging.getLogger(__name__)

OUT_ENV = "PREMIG_OUT"
ALL_POLICIES = ("hybrid-mappo",) + POLICIES + ("oracle",)
COMPONENTS = ("upload", "local_processing", "migration", "premigrated_processing", "cloud", "download")
FIGURES = {
    "reward-curve": None,
    "task-size": "task.task_size",
    "wireless-bw": "rsu_defaults.uplink_bandwidth",
    "migration-bw": "rsu_defaults.migration_bandwidth",
    "edge-compute": "rsu_defaults.gpu_capacity",
    "cloud-compute": "cloud.gpu_capacity",
}
# evaluation episodes draw from their own seed range, disjoint from training
EVAL_SEED_BASE = 7_000_000
FORECAST_SEED_BASE = 9_000_000


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "premig-out"))


@dataclass
class ExperimentConfig:
    scenario: dict = field(default_factory=dict)  # overrides on the default scenario
    policy: str = "greedy"
    prediction: bool = True
    seeds: list = field(default_factory=lambda: [0])
    sweep: dict | None = None  # {"path": "task.task_size", "values": [...]}
    output_dir: str | None = None
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    eval_episodes: int = 10
    deterministic_eval: bool = True
    forecaster: str = "lstm"  # or "perfect": true next positions
    forecaster_seed: int | None = None  # None trains one forecaster per run seed
    checkpoint: str | None = None  # evaluate a saved policy instead of training

    def __post_init__(self):
        if self.policy not in ALL_POLICIES:
            raise ConfigurationError(f"unknown policy {self.policy!r}; choose from {', '.join(ALL_POLICIES)}")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        if self.eval_episodes < 1:
            raise ConfigurationError("eval_episodes must be >= 1")
        if self.forecaster not in ("lstm", "perfect"):
            raise ConfigurationError("forecaster must be lstm or perfect")
        TrainConfig(**self.train)  # validates field names and ranges
        if self.sweep is not None:
            if not {"path", "values"} <= set(self.sweep) or not self.sweep["values"]:
                raise ConfigurationError("sweep needs a path and a non-empty value list")
            base = merge(build_scenario().raw, self.scenario)
            try:
                current = get_path(base, self.sweep["path"])
            except (KeyError, TypeError):
                raise ConfigurationError(f"sweep path {self.sweep['path']!r} does not exist") from None
            for v in self.sweep["values"]:
                _check_type(self.sweep["path"], current, v)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown experiment keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_config_file(path))

    def cells(self) -> list[tuple[object, int]]:
        values = self.sweep["values"] if self.sweep else [None]
        return [(v, s) for v in values for s in self.seeds]

    def cell_scenario(self, value) -> dict:
        sc = copy.deepcopy(self.scenario)
        if self.sweep is not None:
            sc = set_path(merge(build_scenario().raw, sc), self.sweep["path"], value)
        return sc


def _check_type(path, current, value):
    """Sweep values must look like the entry they replace."""
    def kind(x):
        if isinstance(x, bool):
            return "bool"
        if isinstance(x, (int, float)):
            return "number"
        if isinstance(x, str):
            return "quantity"
        if isinstance(x, (list, tuple)):
            return "range"
        return type(x).__name__
    ok = {kind(current), kind(value)}
    if len(ok) > 1 and ok != {"quantity", "range"} and ok != {"number", "quantity"}:
        raise ConfigurationError(f"sweep {path}: value {value!r} does not match {current!r}")


@dataclass
class MetricsRecord:
    fingerprint: str  # of the resolved scenario
    policy: str
    prediction: bool
    seed: int
    sweep_path: str | None
    sweep_value: object
    mean_episode_reward: float  # per agent, averaged over evaluation episodes
    mean_system_latency: float  # per agent-slot, seconds
    components: dict  # component -> mean seconds per agent-slot
    infeasibility_rate: float
    episode_rewards: list
    wall_clock: float = 0.0

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


# -- forecaster ----------------------------------------------------------------

def scenario_traces(sc: Scenario, episodes: int, seed: int) -> list[MobilityTrace]:
    """Per-vehicle trajectories from ``episodes`` fresh mobility draws."""
    out = []
    n = sc.history + sc.horizon
    for k in range(episodes):
        tracks = episode_tracks(sc, np.random.default_rng(FORECAST_SEED_BASE + 1000 * seed + k), n)
        for v, xy in enumerate(tracks):
            out.append(MobilityTrace(k * len(tracks) + v, np.arange(n) * sc.slot_duration, xy))
    return out


def fit_forecaster(sc: Scenario, seed: int, cache_dir: Path | None = None) -> tuple[ForecastModel, dict]:
    """Train the position forecaster on the scenario's own mobility; returns (model, held-out metrics)."""
    fc = {"hidden": 32, "dropout": 0.05, "epochs": 60, "batch": 40, "episodes": 24, **sc.forecaster}
    key = fingerprint({"scenario": sc.raw, "seed": seed, "forecaster": fc})
    path = cache_dir / f"forecaster-{key}.npz" if cache_dir is not None else None
    ds = window_dataset(scenario_traces(sc, int(fc["episodes"]), seed), sc.history, bounds=sc.bounds)
    if path is not None and path.exists():
        model = load_forecaster(path)
    else:
        model, _ = train_forecaster(ds, epochs=int(fc["epochs"]), batch=int(fc["batch"]), seed=seed,
                                    hidden=int(fc["hidden"]), dropout=float(fc["dropout"]))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_forecaster(path, model, {"scenario": sc.fingerprint(), "seed": seed})
    X, Y = ds.test
    metrics = eval_metrics(denormalize(predict_batch(model, X), model.lo, model.hi), denormalize(Y, model.lo, model.hi))
    return model, metrics


# -- evaluation ----------------------------------------------------------------

def evaluate_policy(env: AvatarEnv, policy: str, seed: int, episodes: int, learner=None,
                    deterministic: bool = True, grid=DEFAULT_GRID) -> dict:
    """Roll ``episodes`` evaluation episodes; seeds depend only on ``seed``, not the policy."""
    rng = np.random.default_rng(seed)
    returns, lat, comp, infeas = [], [], {c: [] for c in COMPONENTS}, []
    for k in range(episodes):
        ep_seed = EVAL_SEED_BASE + 1000 * seed + k
        if policy == "hybrid-mappo":
            rewards, rate, bds = rollout(env, learner, rng, ep_seed, deterministic=deterministic)
            flat = [b for row in bds for b in row]
        else:
            env.reset(ep_seed)
            rows, flags, flat = [], [], []
            while not env.done:
                res = env.step(baseline_actions(policy, env.snapshot(), env.observe_all(), rng, grid))
                rows.append(res.rewards)
                flags.append(res.infeasibility_flags)
                flat.extend(res.breakdowns)
            rewards, rate = np.array(rows), float(np.mean(flags))
        returns.append(float(rewards.sum(0).mean()))
        lat.append(float(np.mean([b.total for b in flat])))
        for c in COMPONENTS:
            comp[c].append(float(np.mean([getattr(b, c) for b in flat])))
        infeas.append(rate)
    return {"mean_episode_reward": float(np.mean(returns)), "mean_system_latency": float(np.mean(lat)),
            "components": {c: float(np.mean(v)) for c, v in comp.items()},
            "infeasibility_rate": float(np.mean(infeas)), "episode_rewards": returns}


def _cell_dir(out: Path, cfg: ExperimentConfig, value, seed: int) -> Path:
    tag = "pred" if cfg.prediction else "nopred"
    name = f"{cfg.policy}-{tag}-seed{seed}"
    if cfg.sweep is not None:
        name = f"{cfg.sweep['path']}={_slug(value)}/" + name
    return out / name


def _slug(v) -> str:
    s = json.dumps(v, separators=(",", ""), default=str) if not isinstance(v, str) else v
    return "".join(c if c.isalnum() or c in "-._" else "_" for c in s)


def run_cell(cfg: ExperimentConfig, value, seed: int, out: Path, progress=None) -> MetricsRecord:
    t0 = time.perf_counter()
    scen_cfg = cfg.cell_scenario(value)
    sc = build_scenario(scen_cfg)
    cdir = _cell_dir(out, cfg, value, seed)
    cdir.mkdir(parents=True, exist_ok=True)
    forecaster = None
    if cfg.prediction and cfg.policy == "hybrid-mappo" and cfg.forecaster == "lstm":
        fseed = seed if cfg.forecaster_seed is None else int(cfg.forecaster_seed)
        forecaster, fmetrics = fit_forecaster(sc, fseed, out / "forecasters")
        _write_json(cdir / "forecast_metrics.json", fmetrics)
    env = AvatarEnv(sc, forecaster=forecaster, prediction=cfg.prediction)
    learner = None
    if cfg.policy == "hybrid-mappo":
        if cfg.checkpoint:
            learner = load_learner(cfg.checkpoint, env.n_agents, env.obs_dim)
        else:
            res = train(env, TrainConfig(**{**cfg.train, "seed": seed}), progress=progress)
            learner = res.learner
            write_curve(cdir / "curve.csv", res.curve)
            save_learner(cdir / "model.npz", learner, {"scenario": sc.fingerprint(), "seed": seed})
    ev = evaluate_policy(env, cfg.policy, seed, cfg.eval_episodes, learner, cfg.deterministic_eval)
    rec = MetricsRecord(sc.fingerprint(), cfg.policy, cfg.prediction, seed,
                        cfg.sweep["path"] if cfg.sweep else None, value, **ev,
                        wall_clock=time.perf_counter() - t0)
    _write_json(cdir / "metrics.json", rec.deterministic())
    _write_json(cdir / "timing.json", {"wall_clock": rec.wall_clock})
    return rec


def run(cfg: ExperimentConfig, out=None, progress=None) -> list[MetricsRecord]:
    """Run every (sweep value, seed) cell; writes per-cell files plus merged records."""
    out = Path(out or cfg.output_dir or default_out())
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {out} is not writable: {exc}") from None
    records, failures = [], []
    for value, seed in cfg.cells():
        try:
            records.append(run_cell(cfg, value, seed, out, progress))
        except (ConfigurationError, ContractViolation, FloatingPointError) as exc:
            log.error("cell value=%r seed=%d failed: %s", value, seed, exc)
            failures.append({"value": value, "seed": seed, "error": str(exc)})
    write_records(out, records)
    if failures:
        _write_json(out / "failures.json", failures)
        raise CellFailure(failures, records)
    return records


class CellFailure(RuntimeError):
    def __init__(self, failures, records):
        super().__init__(f"{len(failures)} cell(s) failed")
        self.failures = failures
        self.records = records


# -- files ---------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=str) + "\n", encoding="utf-8")


RECORD_FIELDS = ["fingerprint", "policy", "prediction", "seed", "sweep_path", "sweep_value",
                 "mean_episode_reward", "mean_system_latency", "infeasibility_rate"] + list(COMPONENTS)


def write_records(out: Path, records: list[MetricsRecord]) -> None:
    _write_json(out / "records.json", [r.deterministic() for r in records])
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            d = r.deterministic()
            d.update(d.pop("components"))
            w.writerow([_fmt(d[k]) for k in RECORD_FIELDS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, separators=(",", ":"))
    return "" if v is None else v


def load_records(paths) -> list[MetricsRecord]:
    """Records from ``records.json`` files, per-cell ``metrics.json`` files, or directories of either."""
    out = []
    for p in map(Path, paths):
        files = [p] if p.is_file() else sorted(p.rglob("metrics.json"))
        if p.is_dir() and (p / "records.json").exists():
            files = [p / "records.json"]
        for f in files:
            data = json.loads(f.read_text(encoding="utf-8"))
            for d in data if isinstance(data, list) else [data]:
                out.append(MetricsRecord(**d))
    return out


# -- comparison and plot data --------------------------------------------------

def _label(r: MetricsRecord) -> str:
    if r.policy == "hybrid-mappo":
        return f"hybrid-mappo{'+' if r.prediction else '-'}pred"
    return r.policy


def improvement(a: float, b: float) -> float:
    """Relative improvement of reward ``a`` over reward ``b``."""
    return (a - b) / abs(b)


def compare(records: list[MetricsRecord]) -> dict:
    """Mean-of-seeds ranking and pairwise relative improvements.

    Records must share a scenario fingerprint.
    """
    if not records:
        raise ContractViolation("no records to compare")
    fps = {r.fingerprint for r in records}
    if len(fps) > 1:
        raise ContractViolation(f"records come from different scenarios: {sorted(fps)}")
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(_label(r), []).append(r.mean_episode_reward)
    stats = {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v),
                 "se": float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0}
             for k, v in groups.items()}
    ranking = sorted(stats, key=lambda k: (-stats[k]["mean"], k))
    imp = {a: {b: improvement(stats[a]["mean"], stats[b]["mean"]) for b in ranking if b != a} for a in ranking}
    return {"fingerprint": fps.pop(), "ranking": ranking, "stats": stats, "improvement": imp}


def format_comparison(cmp: dict) -> str:
    lines = [f"scenario {cmp['fingerprint']}", f"{'rank':>4}  {'policy':<20} {'mean reward':>12} {'std':>9} {'n':>3}"]
    for i, k in enumerate(cmp["ranking"], 1):
        s = cmp["stats"][k]
        lines.append(f"{i:>4}  {k:<20} {s['mean']:>12.4f} {s['std']:>9.4f} {s['n']:>3}")
    top = cmp["ranking"][0]
    for b, v in cmp["improvement"][top].items():
        lines.append(f"{top} vs {b}: {100 * v:+.1f}%")
    return "\n".join(lines)


def emit_plot_data(records: list[MetricsRecord], figure: str, out: Path, curves: dict | None = None,
                   expected: dict | None = None) -> Path:
    """One CSV per figure: x column, then mean and std columns per policy.

    ``reward-curve`` reads learning curves from ``curves`` ({label: [curve, ...]}).
    ``expected`` ({label: [values]}) lists the cells the figure must cover.
    """
    if figure not in FIGURES:
        raise ConfigurationError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table: dict[str, dict] = {}
    if figure == "reward-curve":
        for label, runs in (curves or {}).items():
            for run_ in runs:
                for row in run_:
                    table.setdefault(label, {}).setdefault(int(row["episode"]), []).append(float(row["mean_return"]))
        xname = "episode"
    else:
        path = FIGURES[figure]
        for r in records:
            if r.sweep_path != path:
                continue
            table.setdefault(_label(r), {}).setdefault(json.dumps(r.sweep_value), []).append(r.mean_episode_reward)
        xname = path
    if not table:
        raise ConfigurationError(f"no records cover figure {figure!r}")
    xs = sorted({x for col in table.values() for x in col}, key=_sort_key)
    missing = [(label, x) for label, col in table.items() for x in xs if x not in col]
    for label, vals in (expected or {}).items():
        for v in vals:
            x = json.dumps(v)
            if x not in table.get(label, {}):
                missing.append((label, x))
    if missing:
        raise ConfigurationError("missing cells: " + ", ".join(f"{l} @ {x}" for l, x in missing))
    labels = sorted(table)
    dest = out / f"{figure}.csv"
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([xname] + [c for l in labels for c in (l, f"{l}_std")])
        for x in xs:
            row = [x if isinstance(x, int) else json.loads(x)]
            for l in labels:
                vals = table[l][x]
                row += [repr(float(np.mean(vals))), repr(float(np.std(vals)))]
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    return dest


def _sort_key(x):
    """Order sweep values by their leading number, e.g. "50 MB" before "100 MB"."""
    if isinstance(x, int):
        return (x, "")
    m = re.search(r"[-+]?\d+(\.\d*)?([eE][-+]?\d+)?", x)
    return (float(m.group(0)) if m else float("inf"), x)


def load_curve(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
