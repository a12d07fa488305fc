"""Evaluation metrics and report files.

All trip means cover completed trips only. Fuel and CO2 are fleet-aggregate
ratios (total fuel over total distance), which stays stable when individual
trips are very short; the convention is stamped into every report.
"""
import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

FUEL_AGGREGATION = "fleet-aggregate"


def travel_time_stats(trips):
    """Mean and per-vehicle travel times over completed trips."""
    if not trips:
        raise ValueError("no completed trips")
    times = [float(t.travel_time) for t in trips]
    return float(np.mean(times)), times


def delay_stats(trips):
    """Mean and per-vehicle (actual - ideal) travel time."""
    if not trips:
        raise ValueError("no completed trips")
    delays = [float(t.travel_time - t.ideal_time) for t in trips]
    return float(np.mean(delays)), delays


def fuel_per_100km(trips):
    """Fleet fuel economy: 100,000 x total liters / total meters."""
    total_m = sum(t.distance_m for t in trips)
    if total_m <= 0:
        raise ValueError("no distance traveled")
    return 100_000.0 * sum(t.fuel_l for t in trips) / total_m


def co2_per_km(trips):
    """Fleet emission rate: 1,000 x total grams / total meters."""
    total_m = sum(t.distance_m for t in trips)
    if total_m <= 0:
        raise ValueError("no distance traveled")
    return 1_000.0 * sum(t.co2_g for t in trips) / total_m


@dataclass
class EpisodeReport:
    mean_travel_time: float
    mean_delay: float
    fuel_l_per_100km: float
    co2_g_per_km: float
    ttc_events: float
    completed: float
    inserted: float
    collided: float
    travel_times: list
    fuel_aggregation: str = FUEL_AGGREGATION

    METRIC_KEYS = ("mean_travel_time", "mean_delay", "fuel_l_per_100km",
                   "co2_g_per_km", "ttc_events", "completed", "inserted",
                   "collided")

    def metrics(self):
        return {k: getattr(self, k) for k in self.METRIC_KEYS}


def build_episode_report(sim):
    """Report for one finished episode; collided vehicles' partial fuel and
    distance are excluded from the efficiency ratios."""
    trips = sim.completed
    tt_mean, tt_all = travel_time_stats(trips) if trips else (float("nan"), [])
    delay_mean, _ = delay_stats(trips) if trips else (float("nan"), [])
    fuel = fuel_per_100km(trips) if trips else float("nan")
    co2 = co2_per_km(trips) if trips else float("nan")
    return EpisodeReport(
        mean_travel_time=tt_mean, mean_delay=delay_mean,
        fuel_l_per_100km=fuel, co2_g_per_km=co2,
        ttc_events=float(sim.ttc_event_count),
        completed=float(len(trips)), inserted=float(sim.inserted_count),
        collided=float(sim.collided_count), travel_times=tt_all)


def aggregate_reports(reports):
    """Mean of each metric across evaluation episodes; travel-time lists are
    concatenated for distribution export."""
    if not reports:
        raise ValueError("no reports to aggregate")
    agg = {k: float(np.mean([r.metrics()[k] for r in reports]))
           for k in EpisodeReport.METRIC_KEYS}
    times = [t for r in reports for t in r.travel_times]
    return EpisodeReport(travel_times=times, **agg)


def compare_table(reports, baseline_key):
    """Per-method metric values with percentage change against the baseline.

    Returns {method: {metric: (value, pct_change)}}; the baseline rows carry
    0.0. Percentage change is 100 * (method - baseline) / baseline.
    """
    if baseline_key not in reports:
        raise KeyError(f"baseline {baseline_key!r} missing from reports")
    base = reports[baseline_key].metrics()
    table = {}
    for method, report in reports.items():
        row = {}
        for key, value in report.metrics().items():
            ref = base[key]
            if ref:
                pct = 100.0 * (value - ref) / ref
            else:
                pct = 0.0 if value == ref else float("nan")
            row[key] = (value, pct)
        table[method] = row
    return table


def sanitize_json(value):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(value, float):
        return value if np.isfinite(value) else None
    if isinstance(value, dict):
        return {k: sanitize_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize_json(v) for v in value]
    return value


def report_to_dict(report):
    d = asdict(report)
    d.pop("travel_times")
    return d


def write_report_json(path, report, extra=None):
    payload = report_to_dict(report)
    payload["n_travel_times"] = len(report.travel_times)
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sanitize_json(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_travel_times_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["travel_time_s"])
        for t in report.travel_times:
            writer.writerow([f"{t:.6g}"])


def write_compare_csv(path, table, baseline_key):
    """Flat CSV: one row per method x metric with value and pct change."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "metric", "value", "pct_change_vs_baseline"])
        for method in sorted(table):
            for metric, (value, pct) in table[method].items():
                writer.writerow([method, metric, f"{value:.6g}",
                                 "" if method == baseline_key else f"{pct:.4f}"])
