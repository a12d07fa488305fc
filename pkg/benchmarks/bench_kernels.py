#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times each hot kernel on synthetic vehicle arrays at a few fleet sizes, then
times a full static-plan episode under each backend. The numpy path is the
one selected by COTRAFFIC_DISABLE_NUMBA=1; this script swaps backends
in-process so both are exercised in one run.

Usage: python benchmarks/bench_kernels.py [--repeats 2000] [--episode-steps 720]
"""
import argparse
import time

import numpy as np

from cotraffic import kernels
from cotraffic.network import grid_scenario
from cotraffic.rollout import run_baseline_episode


def synth(n, rng):
    return {
        "speed": rng.uniform(0, 15, n),
        "lead_speed": rng.uniform(0, 15, n),
        "gap": rng.uniform(0.5, 250, n),
        "has_lead": rng.random(n) < 0.8,
        "v_limit": np.full(n, 15.0),
        "is_cmd": rng.random(n) < 0.2,
        "cmd": rng.uniform(-3, 3, n),
        "accel": rng.uniform(-4.5, 3, n),
    }


def time_call(fn, repeats):
    fn()  # warm-up (JIT compile, cache touch)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for n in (16, 64, 256):
        d = synth(n, rng)
        calls = {
            "vehicle_accels": lambda b: b.vehicle_accels(
                d["speed"], d["lead_speed"], d["gap"], d["has_lead"],
                d["v_limit"], d["is_cmd"], d["cmd"], 1.0, 1.5, 4.0, 1.0, 2.0),
            "kinematics": lambda b: b.kinematics(
                d["speed"], d["accel"], d["v_limit"], 1.0),
            "ttc_events": lambda b: b.ttc_events(
                d["gap"], d["speed"], d["lead_speed"], d["has_lead"], 3.0),
            "fuel_co2": lambda b: b.fuel_co2(d["speed"], d["accel"]),
        }
        for name, call in calls.items():
            row = {"kernel": name, "n": n}
            for backend in filter(None, (kernels.NUMBA_BACKEND,
                                         kernels.NUMPY_BACKEND)):
                row[backend.name] = time_call(lambda: call(backend), repeats)
            rows.append(row)
    return rows


def bench_episode(steps):
    scenario = grid_scenario("1x1", penetration=0.0, seed=3)
    out = {}
    active = kernels.active_backend()
    try:
        for backend in filter(None, (kernels.NUMBA_BACKEND,
                                     kernels.NUMPY_BACKEND)):
            kernels.set_backend(backend)
            run_baseline_episode(scenario, "baseline-static", 3, horizon=30)
            t0 = time.perf_counter()
            run_baseline_episode(scenario, "baseline-static", 3, horizon=steps)
            out[backend.name] = time.perf_counter() - t0
    finally:
        kernels.set_backend(active)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=2000)
    ap.add_argument("--episode-steps", type=int, default=720)
    args = ap.parse_args()

    if kernels.NUMBA_BACKEND is None:
        print("numba unavailable: benchmarking the numpy path only")

    print(f"{'kernel':<16} {'n':>5} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
    for row in bench_kernels(args.repeats):
        nb = row.get("numba")
        np_ = row.get("numpy")
        speedup = f"{np_ / nb:6.1f}x" if nb and np_ else "     --"
        print(f"{row['kernel']:<16} {row['n']:>5} "
              f"{(nb or 0) * 1e6:>10.2f} {(np_ or 0) * 1e6:>10.2f} {speedup:>8}")

    episode = bench_episode(args.episode_steps)
    print(f"\nfull static episode ({args.episode_steps} steps, 70 vehicles):")
    for name, seconds in episode.items():
        print(f"  {name:<6} {seconds * 1000:8.1f} ms")
    if len(episode) == 2:
        print(f"  end-to-end speedup {episode['numpy'] / episode['numba']:.2f}x")


if __name__ == "__main__":
    main()
