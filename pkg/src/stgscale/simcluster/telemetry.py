"""Telemetry CSV persistence.

One row per (step, service).  Counter columns carry the Prometheus metric
names from Istio and cAdvisor and are cumulative; derived per-step gauges
follow.  Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

import csv

import numpy as np

from .simulator import FEATURE_CHANNELS, TelemetrySnapshot

CPU_PERIOD_US = 100_000

COUNTER_COLUMNS = [
    "istio_requests_total",
    "istio_request_duration_milliseconds_sum",
    "istio_request_duration_milliseconds_count",
    "container_spec_cpu_period",
    "container_spec_cpu_quota",
    "container_cpu_usage_seconds_total",
    "container_memory_usage_bytes",
    "container_spec_memory_limit_bytes",
]
DERIVED_COLUMNS = [
    "request_rate",
    "throughput",
    "latency_mean_ms",
    "latency_p95_ms",
    "cpu_usage_cores",
    "cpu_utilization",
    "cpu_quota_cores",
    "replicas",
    "rps",
    "e2e_latency_ms",
]
COLUMNS = ["step", "service"] + COUNTER_COLUMNS + DERIVED_COLUMNS


def _f(x) -> str:
    return repr(float(x))


def write_telemetry(path, snapshots: list[TelemetrySnapshot], names: list[str], period_s: float) -> None:
    n = len(names)
    req = np.zeros(n)
    dur = np.zeros(n)
    cnt = np.zeros(n)
    cpu = np.zeros(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for s in snapshots:
            req += s.request_rate * period_s
            cnt += s.throughput * period_s
            dur += s.throughput * period_s * s.latency_mean_ms
            cpu += s.cpu_usage_cores * period_s
            for i, name in enumerate(names):
                w.writerow(
                    [s.step, name, _f(req[i]), _f(dur[i]), _f(cnt[i]), CPU_PERIOD_US,
                     _f(s.cpu_quota_cores[i] * CPU_PERIOD_US), _f(cpu[i]), _f(s.memory_bytes[i]),
                     _f(s.memory_limit_bytes[i]), _f(s.request_rate[i]), _f(s.throughput[i]),
                     _f(s.latency_mean_ms[i]), _f(s.latency_p95_ms[i]), _f(s.cpu_usage_cores[i]),
                     _f(s.cpu_utilization[i]), _f(s.cpu_quota_cores[i]), int(s.replicas[i]),
                     _f(s.rps), _f(s.e2e_latency_ms)]
                )


def read_telemetry(path) -> dict:
    """Returns ``frames`` (T, N, C) in FEATURE_CHANNELS order plus per-step ``rps`` and ``e2e``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {"names": [], "frames": np.empty((0, 0, len(FEATURE_CHANNELS))), "rps": np.empty(0), "e2e": np.empty(0)}
    names: list[str] = []
    for r in rows:
        if r["service"] in names:
            break
        names.append(r["service"])
    n = len(names)
    if len(rows) % n:
        raise ValueError(f"{path}: row count {len(rows)} is not a multiple of {n} services")
    T = len(rows) // n
    frames = np.zeros((T, n, len(FEATURE_CHANNELS)))
    rps = np.zeros(T)
    e2e = np.zeros(T)
    for k, r in enumerate(rows):
        t, i = divmod(k, n)
        if r["service"] != names[i]:
            raise ValueError(f"{path}: row {k + 2} expected service {names[i]!r}")
        frames[t, i] = [float(r[c]) for c in FEATURE_CHANNELS]
        rps[t] = float(r["rps"])
        e2e[t] = float(r["e2e_latency_ms"])
    return {"names": names, "frames": frames, "rps": rps, "e2e": e2e}


def write_edge_counts(path, snapshots: list[TelemetrySnapshot], names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "src", "dst", "count"])
        for s in snapshots:
            for i, j in zip(*np.nonzero(s.edge_counts)):
                w.writerow([s.step, names[i], names[j], _f(s.edge_counts[i, j])])


def read_edge_counts(path, names: list[str]) -> tuple[np.ndarray, int]:
    """(cumulative counts, number of steps)."""
    idx = {name: i for i, name in enumerate(names)}
    counts = np.zeros((len(names), len(names)))
    steps = set()
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            counts[idx[r["src"]], idx[r["dst"]]] += float(r["count"])
            steps.add(int(r["step"]))
    return counts, len(steps)


def write_labels(path, labels: np.ndarray, names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + names)
        for t, row in enumerate(labels):
            w.writerow([t] + [int(x) for x in row])


def read_labels(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return np.array([[float(x) for x in r[1:]] for r in rows[1:]]).reshape(-1, len(names)), names
