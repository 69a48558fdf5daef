"""Discrete-time fluid/queueing microservice cluster.

Each step lasts ``period_s`` seconds.  Requests enter at the entry service and
propagate along call edges.  A service forwards calls only for the requests
it actually served, so a saturated caller shields its callees; scaling the
caller up then raises load downstream on the next step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..graphops import RequestTrace
from .topology import ServiceGraphSpec, critical_path_latency

RHO_CAP = 0.99
MEMORY_LIMIT_FACTOR = 2.0


@dataclass
class SimConfig:
    period_s: float = 30.0
    noise: float = 0.05
    provisioning_delay: int = 1
    queue_timeout_s: float = 10.0
    seed: int = 0


@dataclass
class ClusterState:
    replicas: np.ndarray
    backlog: np.ndarray
    clock: int = 0
    pending: list[tuple[int, np.ndarray]] = field(default_factory=list)


@dataclass
class TelemetrySnapshot:
    step: int
    rps: float
    request_rate: np.ndarray  # arrivals / s
    throughput: np.ndarray  # served / s
    latency_mean_ms: np.ndarray
    latency_p95_ms: np.ndarray
    cpu_usage_cores: np.ndarray
    cpu_utilization: np.ndarray
    cpu_quota_cores: np.ndarray
    memory_bytes: np.ndarray
    memory_limit_bytes: np.ndarray
    replicas: np.ndarray
    utilization_offered: np.ndarray  # rho before capping; not a telemetry channel
    e2e_latency_ms: float
    edge_counts: np.ndarray  # requests i -> j during the step


FEATURE_CHANNELS = [
    "request_rate",
    "latency_mean_ms",
    "latency_p95_ms",
    "cpu_usage_cores",
    "cpu_utilization",
    "cpu_quota_cores",
    "replicas",
]
REPLICA_CHANNEL = FEATURE_CHANNELS.index("replicas")


def snapshot_features(snap: TelemetrySnapshot) -> np.ndarray:
    """(N, C) raw feature frame in FEATURE_CHANNELS order."""
    return np.stack([np.asarray(getattr(snap, name), dtype=np.float64) for name in FEATURE_CHANNELS], axis=1)


class ClusterSimulator:
    def __init__(
        self,
        spec: ServiceGraphSpec,
        config: SimConfig | None = None,
        initial_replicas=None,
        request_mix: list[float] | None = None,
    ):
        self.spec = spec
        self.config = config or SimConfig()
        self.rng = np.random.default_rng(self.config.seed)
        n = spec.n
        reps = np.full(n, spec.min_replicas) if initial_replicas is None else np.asarray(initial_replicas)
        self.state = ClusterState(self._clamp(reps), np.zeros(n))
        self.calls = spec.call_matrix()
        self.order = spec.topological_order()
        self.entry = spec.index(spec.entry_service)
        self.cpu = np.array([s.cpu_per_request for s in spec.services])
        self.base = np.array([s.base_latency for s in spec.services])
        self.cores = np.array([s.cores_per_replica for s in spec.services])
        self.mem = np.array([s.memory_per_replica_mb * 2**20 for s in spec.services])
        self.set_request_mix(request_mix)
        self.history: list[TelemetrySnapshot] = []

    def set_request_mix(self, weights: list[float] | None) -> None:
        self.type_masks = self.spec.type_masks(weights)

    def _clamp(self, reps) -> np.ndarray:
        r = np.rint(np.asarray(reps, dtype=np.float64)).astype(np.int64)
        return np.clip(r, self.spec.min_replicas, self.spec.max_replicas)

    def apply(self, actions) -> None:
        """Schedule new replica targets; active ``provisioning_delay`` steps after the decision."""
        if actions is None:
            return
        effective = self.state.clock + self.config.provisioning_delay - 1
        self.state.pending.append((effective, self._clamp(actions)))

    def step(self, rps: float, actions=None) -> TelemetrySnapshot:
        """Apply ``actions`` (decided after the previous step) and advance one period."""
        self.apply(actions)
        st, cfg = self.state, self.config
        still = []
        for when, reps in st.pending:
            if when <= st.clock:
                st.replicas = reps
            else:
                still.append((when, reps))
        st.pending = still

        n, F = self.spec.n, cfg.period_s
        reps = st.replicas.astype(np.float64)
        capacity = reps * self.cores / np.where(self.cpu > 0, self.cpu, 1.0)  # req/s
        capacity = np.where(self.cpu > 0, capacity, np.inf)

        flows = np.zeros((len(self.type_masks), n))  # arrivals per request type
        for k, (w, _) in enumerate(self.type_masks):
            flows[k, self.entry] = w * rps
        arrivals = np.zeros(n)
        served_rate = np.zeros(n)
        new_backlog = np.zeros(n)
        edge_counts = np.zeros((n, n))
        for i in self.order:
            arrivals[i] = flows[:, i].sum()
            work = arrivals[i] * F + st.backlog[i]
            cap = capacity[i] * F
            served = min(work, cap)
            left = work - served
            if np.isfinite(capacity[i]):
                left = min(left, capacity[i] * cfg.queue_timeout_s)  # the rest time out
            new_backlog[i] = left
            served_rate[i] = served / F
            if arrivals[i] > 0:
                share = flows[:, i] / arrivals[i]
            else:
                share = np.zeros(len(self.type_masks))
            for k, (_, mask) in enumerate(self.type_masks):
                out = served_rate[i] * share[k]
                for j in np.nonzero(mask[i])[0]:
                    flows[k, j] += out * self.calls[i, j]
                    edge_counts[i, j] += out * self.calls[i, j] * F
        st.backlog = new_backlog

        rho = arrivals * self.cpu / (reps * self.cores)
        rho_c = np.minimum(rho, RHO_CAP)
        wait_ms = np.where(np.isfinite(capacity) & (capacity > 0), new_backlog / np.where(capacity > 0, capacity, 1) * 1000.0, 0.0)
        latency = self.base * (1.0 + rho_c / (1.0 - rho_c)) + wait_ms
        cpu_usage = served_rate * self.cpu
        if cfg.noise > 0:
            latency = latency * (1.0 + cfg.noise * self.rng.standard_normal(n))
            cpu_usage = cpu_usage * (1.0 + cfg.noise * self.rng.standard_normal(n))
        latency = np.maximum(latency, self.base)
        quota = reps * self.cores
        cpu_usage = np.clip(cpu_usage, 0.0, quota)
        p95 = self.base + (latency - self.base) * math.log(20.0)

        active = np.zeros((n, n), dtype=bool)
        for w, mask in self.type_masks:
            if w > 0:
                active |= mask
        e2e = critical_path_latency(latency, self.calls, active, self.order, self.entry)

        snap = TelemetrySnapshot(
            step=st.clock,
            rps=float(rps),
            request_rate=arrivals,
            throughput=served_rate,
            latency_mean_ms=latency,
            latency_p95_ms=p95,
            cpu_usage_cores=cpu_usage,
            cpu_utilization=cpu_usage / quota,
            cpu_quota_cores=quota,
            memory_bytes=reps * self.mem,
            memory_limit_bytes=reps * self.mem * MEMORY_LIMIT_FACTOR,
            replicas=st.replicas.copy(),
            utilization_offered=rho,
            e2e_latency_ms=float(e2e),
            edge_counts=edge_counts,
        )
        st.clock += 1
        self.history.append(snap)
        return snap


def label_oracle(
    spec: ServiceGraphSpec,
    rps,
    rho_target: float = 0.7,
    request_mix: list[float] | None = None,
) -> np.ndarray:
    """Smallest replicas per service keeping rho <= rho_target under next-step load.

    Row ``t`` is the requirement for step ``t + 1``; the last row repeats the
    final load.
    """
    rps = np.asarray(rps, dtype=np.float64)
    if len(rps) == 0:
        return np.empty((0, spec.n))
    nxt = np.concatenate([rps[1:], rps[-1:]])
    demand = np.outer(nxt, spec.visits(request_mix))
    cpu = np.array([s.cpu_per_request for s in spec.services])
    cores = np.array([s.cores_per_replica for s in spec.services])
    need = np.ceil(demand * cpu / (rho_target * cores) - 1e-9)
    return np.clip(need, spec.min_replicas, spec.max_replicas)


def request_trace(snapshots: list[TelemetrySnapshot]) -> RequestTrace:
    if not snapshots:
        raise ValueError("request_trace needs at least one completed step")
    return RequestTrace(np.sum([s.edge_counts for s in snapshots], axis=0), len(snapshots))
