"""Command-line entry point: ``premig <subcommand> [flags]``.

Exit status: 0 on success, 1 if any experiment cell failed, 2 on a
configuration error (reported before any work starts).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from premig import harness
from premig.config import build_scenario, load_config_file
from premig.env import AvatarEnv
from premig.baselines import baseline_actions
from premig.forecast import denormalize, eval_metrics, predict_batch, save_forecaster, train_forecaster, window_dataset
from premig.numerics import ContractViolation
from premig.world import ConfigurationError, TraceParseError, TraceValidationError, load_traces

log = logging.getLogger("premig")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _assign(d: dict, path: str, value) -> None:
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _common(p: argparse.ArgumentParser, policy: str | None = None) -> None:
    p.add_argument("--config", help="experiment YAML (scenario, policy, seeds, train, ...)")
    p.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", help=f"output directory (default ${harness.OUT_ENV} or ./premig-out)")
    p.add_argument("--prediction", type=_on_off, help="on|off")
    if policy is None:
        p.add_argument("--policy", help="hybrid-mappo, greedy, random, fpm, npm or oracle")
    p.add_argument("--episodes", type=int, help="training episodes (hybrid-mappo)")
    p.add_argument("--eval-episodes", type=int, help="evaluation episodes per seed")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override any experiment entry, e.g. scenario.vehicles=4 or train.gae_lambda=0.5")


def _experiment(args, policy: str | None = None) -> harness.ExperimentConfig:
    d = load_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects PATH=VALUE, got {item!r}")
        path, raw = item.split("=", 1)
        _assign(d, path, yaml.safe_load(raw))
    if policy is not None:
        d["policy"] = policy
    elif args.policy:
        d["policy"] = args.policy
    if args.seed:
        d["seeds"] = args.seed
    if args.prediction is not None:
        d["prediction"] = args.prediction
    if args.episodes is not None:
        d.setdefault("train", {})["episodes"] = args.episodes
    if args.eval_episodes is not None:
        d["eval_episodes"] = args.eval_episodes
    if getattr(args, "checkpoint", None):
        d["checkpoint"] = args.checkpoint
    if getattr(args, "param", None):
        d["sweep"] = {"path": args.param, "values": yaml.safe_load(args.values)}
    return harness.ExperimentConfig.from_dict(d)


def _out(args, cfg=None) -> Path:
    return Path(args.out or (cfg.output_dir if cfg else None) or harness.default_out())


def _progress(row):
    log.info("episode %d  mean return %.3f  infeasible %.3f", row["episode"], row["mean_return"],
             row["infeasibility_rate"])


def _run(args, policy=None) -> int:
    cfg = _experiment(args, policy)
    out = _out(args, cfg)
    try:
        records = harness.run(cfg, out, progress=_progress)
    except harness.CellFailure as exc:
        print(f"{len(exc.failures)} cell(s) failed; see {out / 'failures.json'}", file=sys.stderr)
        return 1
    for r in records:
        print(f"{harness._label(r):<20} seed {r.seed:<4} value {r.sweep_value!s:<16} "
              f"reward {r.mean_episode_reward:.4f}  latency {r.mean_system_latency:.4f} s")
    print(f"wrote {out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _experiment(args)
    if cfg.policy == "hybrid-mappo":
        raise ConfigurationError("simulate runs fixed policies; use train or evaluate for hybrid-mappo")
    out = _out(args, cfg)
    rc = _run(args)
    if args.log:
        # one recorded episode per seed, for inspection
        sc = build_scenario(cfg.scenario)
        for seed in cfg.seeds:
            env = AvatarEnv(sc, prediction=cfg.prediction, record=True)
            rng = np.random.default_rng(seed)
            env.reset(harness.EVAL_SEED_BASE + 1000 * seed)
            while not env.done:
                env.step(baseline_actions(cfg.policy, env.snapshot(), env.observe_all(), rng))
            env.export_log(out / f"{cfg.policy}-seed{seed}.jsonl")
    return rc


def cmd_train(args) -> int:
    return _run(args, "hybrid-mappo")


def cmd_evaluate(args) -> int:
    return _run(args)


def cmd_sweep(args) -> int:
    return _run(args)


def cmd_predict(args) -> int:
    cfg = _experiment(args)
    sc = build_scenario(cfg.scenario)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for seed in cfg.seeds:
        if args.traces:
            with open(args.traces, "rb") as fh:
                traces = load_traces(fh, sc.projection)
            fc = {"hidden": 32, "dropout": 0.05, "epochs": 60, "batch": 40, **sc.forecaster}
            ds = window_dataset(traces, sc.history)
            model, _ = train_forecaster(ds, epochs=int(fc["epochs"]), batch=int(fc["batch"]), seed=seed,
                                        hidden=int(fc["hidden"]), dropout=float(fc["dropout"]))
            X, Y = ds.test
            metrics = eval_metrics(denormalize(predict_batch(model, X), model.lo, model.hi),
                                   denormalize(Y, model.lo, model.hi))
        else:
            model, metrics = harness.fit_forecaster(sc, seed)
        save_forecaster(out / f"forecaster-seed{seed}.npz", model, {"seed": seed})
        results[str(seed)] = metrics
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.6g}" if v is not None else f"{k} n/a"
                                           for k, v in metrics.items()))
    harness._write_json(out / "forecast_metrics.json", results)
    return 0


def cmd_compare(args) -> int:
    records = harness.load_records(args.records)
    cmp = harness.compare(records)
    print(harness.format_comparison(cmp))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        harness._write_json(Path(args.out) / "comparison.json", cmp)
    return 0


def cmd_emit_plots(args) -> int:
    records = harness.load_records(args.records)
    curves = {}
    if args.figure == "reward-curve":
        for p in args.records:
            for f in sorted(Path(p).rglob("curve.csv")):
                label = f.parent.name.rsplit("-seed", 1)[0].replace("-pred", "+pred").replace("-nopred", "-pred")
                curves.setdefault(label, []).append(harness.load_curve(f))
    dest = harness.emit_plot_data(records, args.figure, _out(args), curves)
    print(f"wrote {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="premig", description="Avatar task pre-migration experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a fixed policy and record metrics")
    _common(p)
    p.add_argument("--log", action="store_true", help="also write one JSONL episode log per seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train hybrid-mappo, then evaluate it")
    _common(p, policy="hybrid-mappo")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="train and score the trajectory forecaster")
    _common(p)
    p.add_argument("--traces", help="CSV trace file (vehicle_id, timestamp, lat, lon); default uses scenario mobility")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate any policy (hybrid-mappo trains unless --checkpoint)")
    _common(p)
    p.add_argument("--checkpoint", help="saved hybrid-mappo model.npz")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a policy over a list of values of one config entry")
    _common(p)
    p.add_argument("--param", help="dotted scenario path, e.g. task.task_size")
    p.add_argument("--values", help='YAML list, e.g. "[50 MB, 100 MB]"')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="rank policies from metric records")
    p.add_argument("records", nargs="+", help="records.json / metrics.json files or output directories")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("emit-plots", help="write figure CSVs (mean and std per policy)")
    p.add_argument("records", nargs="+")
    p.add_argument("--figure", required=True, choices=sorted(harness.FIGURES))
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit_plots)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation, TraceParseError, TraceValidationError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
