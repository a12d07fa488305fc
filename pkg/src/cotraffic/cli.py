"""Experiment runner: train, evaluate, baseline, sweep, report.

Every run writes into one output directory with a manifest.json carrying the
resolved configuration, seed, and config hash, enough to reproduce the run
exactly. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, metrics, ppo, rollout
from .env import cav_obs_dim, tl_obs_dim
from .methods import get_method, resolve_penetration
from .network import (ConfigError, grid_scenario, load_scenario,
                      parse_scenario_text, scenario_to_text)
from .policy import load_checkpoint, save_checkpoint

EVAL_SEED_OFFSET = 100_000


def _resolve_scenario(args, default_grid="1x1"):
    if getattr(args, "config", None):
        scenario = load_scenario(args.config)
    else:
        scenario = grid_scenario(getattr(args, "grid", None) or default_grid)
    overrides = {}
    if getattr(args, "horizon", None):
        overrides["horizon"] = args.horizon
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return scenario.with_overrides(**overrides) if overrides else scenario


def _profile_config(args):
    cfg = ppo.PROFILES[args.profile]()
    overrides = {}
    if getattr(args, "iterations", None):
        overrides["iterations"] = args.iterations
    if getattr(args, "train_episodes", None):
        overrides["episodes_per_iter"] = args.train_episodes
    if getattr(args, "horizon", None):
        overrides["horizon"] = args.horizon
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _manifest(args, scenario, method, extra):
    payload = {
        "version": __version__,
        "created_unix": int(time.time()),
        "command": " ".join(sys.argv),
        "method": method.name,
        "method_notes": method.notes,
        "seed": args.seed,
        "scenario_text": scenario_to_text(scenario),
    }
    payload.update(extra)
    digest_src = json.dumps(
        {k: v for k, v in payload.items() if k not in ("created_unix", "command")},
        sort_keys=True)
    payload["config_sha256"] = hashlib.sha256(digest_src.encode()).hexdigest()
    return payload


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args, default_name):
    out = Path(args.out or default_name)
    out.mkdir(parents=True, exist_ok=True)
    return out


class _maybe_trace:
    """Context manager for the optional --trace output file."""

    def __init__(self, args):
        self.path = getattr(args, "trace", None)
        self.fh = None

    def __enter__(self):
        if self.path:
            self.fh = open(self.path, "w", encoding="utf-8")
        return self.fh

    def __exit__(self, *exc):
        if self.fh:
            self.fh.close()
        return False


def cmd_train(args):
    method = get_method(args.method)
    if not method.rl:
        raise ConfigError(f"method {args.method} is not trainable; "
                          "use the baseline subcommand")
    scenario = _resolve_scenario(args)
    penetration = resolve_penetration(method, args.penetration,
                                      scenario.penetration_rate)
    scenario = scenario.with_overrides(penetration=penetration)
    cfg = _profile_config(args)
    out = _out_dir(args, f"runs/train-{args.method}")

    def progress(entry):
        msg = (f"iter {entry['iteration'] + 1}/{cfg.iterations} "
               f"tl_reward={entry['tl_reward']:.3f}")
        if np.isfinite(entry["cav_reward"]):
            msg += f" cav_reward={entry['cav_reward']:.3f}"
        print(msg, flush=True)

    result = ppo.train(scenario, method.env_cfg, cfg, seed=args.seed,
                       tl_plan=method.tl_plan, workers=args.workers,
                       progress=progress if args.verbose else None)

    curve_keys = sorted({k for c in result.curves for k in c})
    with open(out / "reward_curves.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(curve_keys) + "\n")
        for entry in result.curves:
            fh.write(",".join(_fmt(entry.get(k)) for k in curve_keys) + "\n")

    ckpt_meta = {
        "method": args.method,
        "seed": args.seed,
        "penetration": penetration,
        "profile": args.profile,
        "network": scenario.network.descriptor,
        "iterations": len(result.curves),
        "ppo": dataclasses.asdict(cfg),
    }
    checkpoints = {}
    if result.tl_params is not None:
        save_checkpoint(out / "checkpoint_tl.npz", result.tl_params, ckpt_meta)
        checkpoints["tl"] = "checkpoint_tl.npz"
    if result.cav_params is not None:
        save_checkpoint(out / "checkpoint_cav.npz", result.cav_params, ckpt_meta)
        checkpoints["cav"] = "checkpoint_cav.npz"

    manifest = _manifest(args, scenario, method, {
        "profile": args.profile,
        "penetration": penetration,
        "ppo": dataclasses.asdict(cfg),
        "checkpoints": checkpoints,
        "wall_time_s": result.wall_time_s,
        "halted_early": result.halted_early,
    })
    _write_json(out / "manifest.json", manifest)
    print(f"trained {args.method}: {len(result.curves)} iterations, "
          f"{result.wall_time_s:.1f}s, outputs in {out}")
    if result.halted_early:
        print("warning: training halted early on a non-finite loss",
              file=sys.stderr)
    return 0


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _load_run(checkpoint_dir):
    ckpt_dir = Path(checkpoint_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{checkpoint_dir} has no manifest.json")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    params = {}
    for kind in ("tl", "cav"):
        path = ckpt_dir / f"checkpoint_{kind}.npz"
        if path.exists():
            params[kind], _ = load_checkpoint(path)
    return manifest, params


def _eval_common(args, manifest, params):
    method = get_method(manifest["method"])
    scenario = parse_scenario_text(manifest["scenario_text"])
    if args.seed is not None:
        scenario = scenario.with_overrides(seed=args.seed)
    penetration = resolve_penetration(
        method, args.penetration, manifest.get("penetration",
                                               scenario.penetration_rate))
    scenario = scenario.with_overrides(penetration=penetration)

    env_cfg = method.env_cfg
    tl_params = params.get("tl")
    cav_params = params.get("cav")
    if env_cfg.tl_agents and tl_params is None:
        raise ConfigError("checkpoint directory lacks the signal-agent network")
    if env_cfg.cav_agents and cav_params is None:
        raise ConfigError("checkpoint directory lacks the vehicle-agent network")
    if tl_params is not None:
        want = tl_obs_dim(scenario.network, env_cfg.mode)
        if tl_params.obs_dim != want:
            raise ConfigError(
                f"signal checkpoint expects {tl_params.obs_dim} inputs but the "
                f"scenario/mode needs {want}")
    if cav_params is not None and cav_params.obs_dim != cav_obs_dim(env_cfg.mode):
        raise ConfigError("vehicle checkpoint does not match the mode")
    return method, scenario, env_cfg, tl_params, cav_params


def _write_eval_outputs(out, method, scenario, args, reports, label=""):
    prefix = f"{label}_" if label else ""
    aggregate = metrics.aggregate_reports(reports)
    for i, report in enumerate(reports):
        metrics.write_report_json(out / f"{prefix}episode_{i:02d}.json", report,
                                  extra={"episode": i})
    metrics.write_report_json(out / f"{prefix}aggregate.json", aggregate,
                              extra={"episodes": len(reports),
                                     "method": method.name,
                                     "method_notes": method.notes,
                                     "penetration": scenario.penetration_rate})
    metrics.write_travel_times_csv(out / f"{prefix}travel_times.csv", aggregate)
    return aggregate


def cmd_evaluate(args):
    manifest, params = _load_run(args.checkpoint_dir)
    method, scenario, env_cfg, tl_params, cav_params = _eval_common(
        args, manifest, params)
    out = _out_dir(args, f"runs/eval-{method.name}")
    base_seed = args.seed if args.seed is not None else manifest.get("seed", 0)
    seeds = [base_seed + EVAL_SEED_OFFSET + i for i in range(args.episodes)]
    with _maybe_trace(args) as trace_fh:
        reports = rollout.evaluate_policy(
            scenario, env_cfg, tl_params, cav_params, seeds,
            horizon=args.horizon or scenario.horizon, tl_plan=method.tl_plan,
            trace_fh=trace_fh)
    aggregate = _write_eval_outputs(out, method, scenario, args, reports)
    _write_json(out / "manifest.json", _manifest(
        args, scenario, method,
        {"checkpoint_dir": str(args.checkpoint_dir), "episodes": args.episodes,
         "penetration": scenario.penetration_rate, "eval_seeds": seeds,
         "greedy_actions": True}))
    print(f"evaluated {method.name}: mean travel time "
          f"{aggregate.mean_travel_time:.2f}s over {args.episodes} episodes; "
          f"outputs in {out}")
    return 0


def cmd_baseline(args):
    method = get_method(args.method)
    if method.rl:
        raise ConfigError(f"method {args.method} is learned; use train/evaluate")
    scenario = _resolve_scenario(args)
    penetration = resolve_penetration(method, args.penetration,
                                      scenario.penetration_rate)
    scenario = scenario.with_overrides(penetration=penetration)
    out = _out_dir(args, f"runs/baseline-{args.method}")
    base_seed = args.seed if args.seed is not None else scenario.seed
    seeds = [base_seed + EVAL_SEED_OFFSET + i for i in range(args.episodes)]
    with _maybe_trace(args) as trace_fh:
        reports = rollout.evaluate_baseline(
            scenario, args.method, seeds,
            horizon=args.horizon or scenario.horizon, trace_fh=trace_fh)
    aggregate = _write_eval_outputs(out, method, scenario, args, reports)
    _write_json(out / "manifest.json", _manifest(
        args, scenario, method,
        {"episodes": args.episodes, "penetration": scenario.penetration_rate,
         "eval_seeds": seeds}))
    print(f"baseline {args.method}: mean travel time "
          f"{aggregate.mean_travel_time:.2f}s over {args.episodes} episodes; "
          f"outputs in {out}")
    return 0


def cmd_sweep(args):
    manifest, params = _load_run(args.checkpoint_dir)
    rates = [float(r) for r in args.rates.split(",")]
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise ConfigError(f"penetration rate {rate} outside [0, 1]")
    out = _out_dir(args, "runs/sweep")
    rows = []
    for rate in rates:
        args.penetration = rate
        method, scenario, env_cfg, tl_params, cav_params = _eval_common(
            args, manifest, params)
        base_seed = args.seed if args.seed is not None else manifest.get("seed", 0)
        seeds = [base_seed + EVAL_SEED_OFFSET + i for i in range(args.episodes)]
        reports = rollout.evaluate_policy(
            scenario, env_cfg, tl_params, cav_params, seeds,
            horizon=args.horizon or scenario.horizon, tl_plan=method.tl_plan)
        aggregate = _write_eval_outputs(out, method, scenario, args, reports,
                                        label=f"rate{rate:0.2f}")
        rows.append((rate, aggregate))
        print(f"penetration {rate:.2f}: mean travel time "
              f"{aggregate.mean_travel_time:.2f}s")
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("penetration," + ",".join(metrics.EpisodeReport.METRIC_KEYS) + "\n")
        for rate, agg in rows:
            vals = agg.metrics()
            fh.write(f"{rate:.2f}," + ",".join(
                _fmt(vals[k]) for k in metrics.EpisodeReport.METRIC_KEYS) + "\n")
    _write_json(out / "manifest.json", _manifest(
        args, _resolve_scenario_from_manifest(manifest), get_method(manifest["method"]),
        {"rates": rates, "episodes": args.episodes,
         "checkpoint_dir": str(args.checkpoint_dir)}))
    print(f"sweep outputs in {out}")
    return 0


def _resolve_scenario_from_manifest(manifest):
    return parse_scenario_text(manifest["scenario_text"])


def cmd_report(args):
    runs = {}
    for spec in [args.baseline] + (args.run or []):
        if "=" not in spec:
            raise ConfigError(f"expected NAME=DIR, got {spec!r}")
        name, _, path = spec.partition("=")
        agg_path = Path(path) / "aggregate.json"
        if not agg_path.exists():
            raise ConfigError(f"{path} has no aggregate.json")
        with open(agg_path, encoding="utf-8") as fh:
            data = json.load(fh)
        values = {k: (float("nan") if data[k] is None else data[k])
                  for k in metrics.EpisodeReport.METRIC_KEYS}
        runs[name] = metrics.EpisodeReport(travel_times=[], **values)
    baseline_name = args.baseline.partition("=")[0]
    table = metrics.compare_table(runs, baseline_name)
    out = _out_dir(args, "runs/report")
    metrics.write_compare_csv(out / "comparison.csv", table, baseline_name)
    _write_json(out / "comparison.json",
                {m: {k: {"value": v, "pct_change": p} for k, (v, p) in row.items()}
                 for m, row in table.items()})
    for method in sorted(table):
        tt, pct = table[method]["mean_travel_time"]
        suffix = "" if method == baseline_name else f" ({pct:+.2f}%)"
        print(f"{method}: travel time {tt:.2f}s{suffix}")
    print(f"report outputs in {out}")
    return 0


def _add_common(p, with_scenario=True):
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--horizon", type=int, default=None,
                   help="override episode length in seconds")
    if with_scenario:
        p.add_argument("--config", default=None, help="scenario file path")
        p.add_argument("--grid", choices=["1x1", "1x6"], default=None,
                       help="built-in scenario (default 1x1)")
    p.add_argument("--penetration", type=float, default=None,
                   help="CAV fraction in [0, 1]")
    p.add_argument("--episodes", type=int, default=18,
                   help="evaluation episodes")
    p.add_argument("--trace", default=None, metavar="PATH",
                   help="write a per-step vehicle trace of the first episode")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cotraffic",
        description="Grid traffic control experiments: cooperative "
                    "signal+vehicle RL against classical baselines.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an RL method")
    p.add_argument("--method", required=True)
    p.add_argument("--profile", choices=sorted(ppo.PROFILES), default="ci")
    p.add_argument("--iterations", type=int, default=None,
                   help="override the profile's iteration count")
    p.add_argument("--train-episodes", type=int, default=None,
                   help="override the profile's parallel episodes per iteration")
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("COTRAFFIC_WORKERS", "1")))
    p.add_argument("--verbose", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    p.add_argument("--checkpoint-dir", required=True)
    _add_common(p, with_scenario=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="run a non-learned method")
    p.add_argument("--method", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", help="penetration-rate sweep of a checkpoint")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--rates", default="0,0.2,0.4,0.6,0.8,1.0")
    _add_common(p, with_scenario=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="comparison table from run directories")
    p.add_argument("--baseline", required=True, metavar="NAME=DIR")
    p.add_argument("--run", action="append", metavar="NAME=DIR")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
