"""MAPE control loop, action validation with a trust gate, and baseline policies.

Policies see only telemetry snapshots.  Baselines that need an operator's
model of the application (latency budgets, call structure) receive it as
configuration when they are built, never from the running simulator.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adaptlearn as al
from . import graphops as go
from .estimator import STEstimator, make_samples
from .simcluster.simulator import (
    FEATURE_CHANNELS,
    ClusterSimulator,
    TelemetrySnapshot,
    request_trace,
    snapshot_features,
)
from .simcluster.topology import ServiceGraphSpec
from .simcluster.workload import WorkloadTrace

log = logging.getLogger(__name__)

POLICY_KINDS = ("deepscaler", "aws_rule", "slo_rule", "mmn_model")
PROVENANCE = ("predicted", "clamped", "trust-attenuated", "hold", "rule")

RATE = FEATURE_CHANNELS.index("request_rate")
USAGE = FEATURE_CHANNELS.index("cpu_usage_cores")
UTIL = FEATURE_CHANNELS.index("cpu_utilization")
QUOTA = FEATURE_CHANNELS.index("cpu_quota_cores")
REPLICAS = FEATURE_CHANNELS.index("replicas")


@dataclass
class Bounds:
    min_replicas: int = 1
    max_replicas: int = 20

    def clip(self, r) -> np.ndarray:
        return np.clip(r, self.min_replicas, self.max_replicas).astype(np.int64)


@dataclass
class ScalingAction:
    targets: np.ndarray
    provenance: list[str]

    def __post_init__(self):
        self.targets = np.asarray(self.targets)
        if self.targets.dtype.kind not in "iu":
            raise TypeError("scaling targets must be integers")
        if len(self.provenance) != len(self.targets):
            raise ValueError("one provenance tag per service is required")
        bad = [p for p in self.provenance if p not in PROVENANCE]
        if bad:
            raise ValueError(f"unknown provenance tags {bad}")


def _rule_action(targets, bounds: Bounds) -> ScalingAction:
    t = bounds.clip(targets)
    return ScalingAction(t, ["rule"] * len(t))


# ---------------------------------------------------------------- trust

@dataclass
class TrustConfig:
    window: int = 20
    threshold: int = 3
    decrement: float = 0.25
    recovery: float = 0.05
    attenuate_below: float = 0.5
    error_tolerance: float = 2.0  # replicas


@dataclass
class TrustState:
    trust_level: float = 1.0
    error_count: int = 0
    violation_count: int = 0
    threshold: int = 3
    window: int = 20
    recent: deque = field(default_factory=deque)  # (violation, error) per step


def update_trust(trust: TrustState, violation: bool, error: bool, config: TrustConfig | None = None) -> TrustState:
    """Sliding-window counts; trust drops when either exceeds the threshold, then recovers slowly."""
    cfg = config or TrustConfig(window=trust.window, threshold=trust.threshold)
    trust.recent.append((bool(violation), bool(error)))
    while len(trust.recent) > trust.window:
        trust.recent.popleft()
    trust.violation_count = sum(v for v, _ in trust.recent)
    trust.error_count = sum(e for _, e in trust.recent)
    if trust.violation_count > trust.threshold or trust.error_count > trust.threshold:
        trust.trust_level = max(trust.trust_level - cfg.decrement, 0.0)
        trust.recent.clear()
        trust.violation_count = trust.error_count = 0
    elif not violation and not error:
        trust.trust_level = min(trust.trust_level + cfg.recovery, 1.0)
    return trust


def validate_actions(
    pred,
    current,
    trust: TrustState,
    bounds: Bounds,
    rounding: str = "ceil",
    deadband: float = 0.49,
    attenuate_below: float = 0.5,
) -> tuple[ScalingAction, bool]:
    """Turn a real-valued prediction into bounded integer targets.

    Returns the action and whether the prediction was unusable (non-finite),
    in which case the current replicas are held.
    """
    pred = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    current = np.asarray(current).astype(np.int64)
    if pred.shape != current.shape or not np.all(np.isfinite(pred)):
        return ScalingAction(current.copy(), ["hold"] * len(current)), True
    if rounding == "ceil":
        raw = np.ceil(pred - 1e-9)
    elif rounding == "nearest":
        raw = np.rint(pred)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    hold = np.abs(pred - current) <= deadband + 1e-9
    raw = np.where(hold, current, raw).astype(np.int64)
    targets = bounds.clip(raw)
    outside = ~hold & ((pred < bounds.min_replicas) | (pred > bounds.max_replicas))
    prov = ["clamped" if (t != r or o) else "predicted" for t, r, o in zip(targets, raw, outside)]
    if trust.trust_level < attenuate_below:
        for i in range(len(targets)):
            if targets[i] < current[i] - 1:
                targets[i] = current[i] - 1
                prov[i] = "trust-attenuated"
    return ScalingAction(targets, prov), False


# ---------------------------------------------------------------- baselines

class Policy:
    kind = "base"

    def decide(self, snap: TelemetrySnapshot) -> ScalingAction:
        raise NotImplementedError

    def constants(self) -> dict:
        return {}


class AwsRule(Policy):
    """Target tracking on CPU utilisation with a scale-in cooldown."""

    kind = "aws_rule"

    def __init__(self, n: int, bounds: Bounds | None = None, target_util: float = 0.5, cooldown: int = 3):
        self.bounds = bounds or Bounds()
        self.target_util = target_util
        self.cooldown = cooldown
        self.last_scale_in = np.full(n, -(10**9))
        self.t = 0

    def decide(self, snap: TelemetrySnapshot) -> ScalingAction:
        cur = snap.replicas.astype(np.int64)
        desired = np.ceil(cur * snap.cpu_utilization / self.target_util - 1e-9).astype(np.int64)
        desired = self.bounds.clip(desired)
        out = desired.copy()
        for i in range(len(cur)):
            if desired[i] < cur[i]:
                if self.t - self.last_scale_in[i] >= self.cooldown:
                    self.last_scale_in[i] = self.t
                else:
                    out[i] = cur[i]
        self.t += 1
        return _rule_action(out, self.bounds)

    def constants(self) -> dict:
        return {"target_util": self.target_util, "cooldown": self.cooldown}


def latency_budgets(spec: ServiceGraphSpec) -> np.ndarray:
    """Per-service share of the SLA, proportional to idle latency."""
    base = np.array([s.base_latency for s in spec.services])
    return spec.sla_ms * base / spec.idle_latency()


class SloRule(Policy):
    """Scale out services over their latency budget whenever the end-to-end SLA is missed."""

    kind = "slo_rule"

    def __init__(self, budgets, sla_ms: float, bounds: Bounds | None = None, calm_steps: int = 5, max_factor: float = 2.0):
        self.budgets = np.asarray(budgets, dtype=np.float64)
        self.sla_ms = sla_ms
        self.bounds = bounds or Bounds()
        self.calm_steps = calm_steps
        self.max_factor = max_factor
        self.calm = 0

    def decide(self, snap: TelemetrySnapshot) -> ScalingAction:
        cur = snap.replicas.astype(np.int64)
        out = cur.copy()
        if snap.e2e_latency_ms > self.sla_ms:
            self.calm = 0
            ratio = snap.latency_mean_ms / self.budgets
            over = ratio > 1.0
            out[over] = np.ceil(cur[over] * np.minimum(ratio[over], self.max_factor) - 1e-9)
        elif snap.e2e_latency_ms < 0.5 * self.sla_ms:
            self.calm += 1
            if self.calm >= self.calm_steps:
                self.calm = 0
                spare = np.where(cur > self.bounds.min_replicas, snap.cpu_utilization, np.inf)
                if np.isfinite(spare).any() and spare.min() < 0.5:
                    out[int(np.argmin(spare))] -= 1
        else:
            self.calm = 0
        return _rule_action(out, self.bounds)

    def constants(self) -> dict:
        return {"budgets": self.budgets.tolist(), "calm_steps": self.calm_steps, "max_factor": self.max_factor}


def erlang_c(n: int, a: float) -> float:
    """Probability of waiting in M/M/n with offered load ``a`` (in servers)."""
    if a <= 0:
        return 0.0
    if a >= n:
        return 1.0
    b = 1.0
    for k in range(1, n + 1):
        b = a * b / (k + a * b)
    return n * b / (n - a * (1 - b))


def mmn_replicas(lam, cpu_per_request, cores, base_ms, budget_ms, rho_target: float, bounds: Bounds) -> int:
    """Smallest n with utilisation <= rho_target and modelled response within budget."""
    work = lam * cpu_per_request  # cores busy
    if work <= 0:
        return bounds.min_replicas
    for n in range(bounds.min_replicas, bounds.max_replicas + 1):
        a = work / cores
        if a / n > rho_target + 1e-12:
            continue
        resp = base_ms * (1.0 + erlang_c(n, a) / (n - a))
        if resp <= budget_ms:
            return n
    return bounds.max_replicas


class MmnModel(Policy):
    """Queueing-model policy.  Holistic mode pushes the entry rate through the call model."""

    kind = "mmn_model"

    def __init__(
        self,
        cpu_per_request,
        cores,
        base_ms,
        budgets,
        entry: int,
        visits=None,
        holistic: bool = False,
        rho_target: float = 0.7,
        bounds: Bounds | None = None,
    ):
        self.cpu = np.asarray(cpu_per_request, dtype=np.float64)
        self.cores = np.asarray(cores, dtype=np.float64)
        self.base = np.asarray(base_ms, dtype=np.float64)
        self.budgets = np.asarray(budgets, dtype=np.float64)
        self.entry = entry
        self.visits = None if visits is None else np.asarray(visits, dtype=np.float64)
        self.holistic = holistic
        if holistic and self.visits is None:
            raise ValueError("holistic mode needs per-service visit ratios")
        self.rho_target = rho_target
        self.bounds = bounds or Bounds()

    @classmethod
    def from_spec(cls, spec: ServiceGraphSpec, holistic: bool = False, request_mix=None, **kw) -> "MmnModel":
        return cls(
            [s.cpu_per_request for s in spec.services],
            [s.cores_per_replica for s in spec.services],
            [s.base_latency for s in spec.services],
            latency_budgets(spec),
            spec.index(spec.entry_service),
            spec.visits(request_mix) if holistic else None,
            holistic,
            bounds=Bounds(spec.min_replicas, spec.max_replicas),
            **kw,
        )

    def decide(self, snap: TelemetrySnapshot) -> ScalingAction:
        if self.holistic:
            lam = snap.request_rate[self.entry] * self.visits
        else:
            lam = snap.request_rate
        out = [
            mmn_replicas(lam[i], self.cpu[i], self.cores[i], self.base[i], self.budgets[i], self.rho_target, self.bounds)
            for i in range(len(lam))
        ]
        return _rule_action(out, self.bounds)

    @property
    def label(self) -> str:
        return "mmn_holistic" if self.holistic else "mmn_model"

    def constants(self) -> dict:
        return {"holistic": self.holistic, "rho_target": self.rho_target}


# ---------------------------------------------------------------- DeepScaler

def telemetry_labels(frames: np.ndarray, rho_target: float = 0.7, bounds: Bounds | None = None) -> np.ndarray:
    """Replica targets from telemetry alone: next-step arrivals times an estimated per-request cost.

    The per-request CPU cost is fitted on unsaturated steps (utilisation < 0.9).
    """
    bounds = bounds or Bounds()
    rate, usage = frames[:, :, RATE], frames[:, :, USAGE]
    ok = (frames[:, :, UTIL] < 0.9) & (rate > 0)
    num = np.where(ok, usage, 0.0).sum(axis=0)
    den = np.where(ok, rate, 0.0).sum(axis=0)
    fallback = usage.sum(axis=0) / np.maximum(rate.sum(axis=0), 1e-12)
    s_hat = np.where(den > 0, num / np.maximum(den, 1e-12), fallback)
    cores = frames[:, :, QUOTA] / np.maximum(frames[:, :, REPLICAS], 1)
    nxt = np.concatenate([rate[1:], rate[-1:]])
    need = np.ceil(nxt * s_hat / (rho_target * cores) - 1e-9)
    return np.clip(need, bounds.min_replicas, bounds.max_replicas)


def trace_seed_graph(edge_counts, steps: int) -> np.ndarray:
    """Seed affinity from traced call counts: per-step averages scaled by each caller's maximum."""
    avg = go.RequestTrace(np.asarray(edge_counts, dtype=np.float64), steps).average
    row_max = avg.max(axis=1, keepdims=True)
    return np.divide(avg, row_max, out=np.zeros_like(avg), where=row_max > 0)


class DeepScaler(Policy):
    kind = "deepscaler"

    def __init__(
        self,
        model: STEstimator,
        graph,
        bounds: Bounds | None = None,
        trust_config: TrustConfig | None = None,
        rounding: str = "ceil",
        retrain_interval: int = 120,
        learn_config: al.LearnConfig | None = None,
        label_rho: float = 0.7,
    ):
        if model.normalizer is None:
            raise ValueError("DeepScaler needs an estimator with a fitted normalizer")
        self.model = model
        self.graph = np.asarray(graph, dtype=np.float64)
        self.bounds = bounds or Bounds()
        self.trust_config = trust_config or TrustConfig()
        self.trust = TrustState(threshold=self.trust_config.threshold, window=self.trust_config.window)
        self.rounding = rounding
        self.retrain_interval = retrain_interval
        self.learn_config = learn_config or al.LearnConfig()
        self.label_rho = label_rho
        self.frames: list[np.ndarray] = []
        self.snaps: list[TelemetrySnapshot] = []
        self.last_pred: np.ndarray | None = None
        self.failed = False
        self.retrain_count = 0
        self.t = 0

    def observe(self, snap: TelemetrySnapshot, sla_ms: float) -> None:
        """Monitoring: store telemetry, update trust, retrain on schedule."""
        self.frames.append(snapshot_features(snap))
        self.snaps.append(snap)
        error = False
        if self.last_pred is not None and len(self.frames) >= 2:
            realized = telemetry_labels(np.stack(self.frames[-2:]), self.label_rho, self.bounds)[0]
            error = bool(np.max(np.abs(self.last_pred - realized)) > self.trust_config.error_tolerance)
        error = error or self.failed
        update_trust(self.trust, snap.e2e_latency_ms > sla_ms, error, self.trust_config)
        self.t += 1
        if self.retrain_interval > 0 and self.t % self.retrain_interval == 0:
            self.retrain()

    def retrain(self) -> None:
        tau = self.model.config.tau
        frames = np.stack(self.frames)
        if len(frames) < tau + 2:
            return
        labels = telemetry_labels(frames, self.label_rho, self.bounds)
        norm = self.model.normalizer
        x, y = make_samples(norm.transform(frames), norm.scale_replicas(labels), tau)
        trace = request_trace(self.snaps)
        seeds = [self.graph, trace_seed_graph(trace.counts, trace.steps)]
        state = al.init_state(seeds, self.model, self.learn_config)
        try:
            al.run_em(state, x, y)
        except Exception as exc:  # keep serving with the previous model
            log.warning("online retraining failed: %s", exc)
            return
        self.graph = state.current_a
        self.retrain_count += 1

    def decide(self, snap: TelemetrySnapshot) -> ScalingAction:
        cur = snap.replicas.astype(np.int64)
        tau = self.model.config.tau
        if len(self.frames) < tau:
            self.last_pred = None
            return ScalingAction(cur.copy(), ["hold"] * len(cur))
        try:
            window = self.model.normalizer.transform(np.stack(self.frames[-tau:]))
            pred = self.model.forward(np.transpose(window, (1, 2, 0)), self.graph).values
        except (ValueError, FloatingPointError, ArithmeticError) as exc:
            log.warning("estimator failed at step %d: %s", self.t, exc)
            pred = np.full(len(cur), np.nan)
        action, failed = validate_actions(
            pred, cur, self.trust, self.bounds, self.rounding, attenuate_below=self.trust_config.attenuate_below
        )
        self.failed = failed
        self.last_pred = None if failed else pred
        return action

    def constants(self) -> dict:
        return {
            "trust": asdict(self.trust_config),
            "rounding": self.rounding,
            "retrain_interval": self.retrain_interval,
            "label_rho": self.label_rho,
        }


# ---------------------------------------------------------------- MAPE loop

@dataclass
class ExperimentRecord:
    policy: str
    names: list[str]
    cores_per_replica: np.ndarray
    sla_ms: float
    period_s: float
    rps: np.ndarray  # (T,)
    replicas: np.ndarray  # (T, N) active during the step
    actions: np.ndarray  # (T, N) decided after the step
    provenance: list[list[str]]  # (T, N)
    e2e_latency_ms: np.ndarray  # (T,)
    trust: np.ndarray  # (T,)
    segments: list[str]  # (T,)
    constants: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rps)

    @property
    def violations(self) -> np.ndarray:
        return self.e2e_latency_ms > self.sla_ms

    @property
    def cores(self) -> np.ndarray:
        """Per-step allocated cores, ``sum_i c_i * y_i``."""
        return self.replicas @ self.cores_per_replica

    def to_csv(self, path) -> None:
        cols = ["step", "segment", "rps", "e2e_latency_ms", "violation", "cost_cores", "trust"]
        cols += [f"replicas:{n}" for n in self.names]
        cols += [f"action:{n}" for n in self.names]
        cols += [f"provenance:{n}" for n in self.names]
        cores = self.cores
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for t in range(len(self)):
                w.writerow(
                    [t, self.segments[t], repr(float(self.rps[t])), repr(float(self.e2e_latency_ms[t])),
                     int(self.violations[t]), repr(float(cores[t])), repr(float(self.trust[t]))]
                    + [int(x) for x in self.replicas[t]]
                    + [int(x) for x in self.actions[t]]
                    + list(self.provenance[t])
                )

    def manifest(self) -> dict:
        return {
            "policy": self.policy,
            "names": self.names,
            "cores_per_replica": self.cores_per_replica.tolist(),
            "sla_ms": self.sla_ms,
            "period_s": self.period_s,
            "constants": self.constants,
        }

    @classmethod
    def from_csv(cls, path, manifest: dict) -> "ExperimentRecord":
        names = manifest["names"]
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            policy=manifest["policy"],
            names=names,
            cores_per_replica=np.asarray(manifest["cores_per_replica"], dtype=np.float64),
            sla_ms=float(manifest["sla_ms"]),
            period_s=float(manifest["period_s"]),
            rps=np.array([float(r["rps"]) for r in rows]),
            replicas=np.array([[int(r[f"replicas:{n}"]) for n in names] for r in rows]).reshape(-1, len(names)),
            actions=np.array([[int(r[f"action:{n}"]) for n in names] for r in rows]).reshape(-1, len(names)),
            provenance=[[r[f"provenance:{n}"] for n in names] for r in rows],
            e2e_latency_ms=np.array([float(r["e2e_latency_ms"]) for r in rows]),
            trust=np.array([float(r["trust"]) for r in rows]),
            segments=[r["segment"] for r in rows],
            constants=manifest.get("constants", {}),
        )


@dataclass
class LoopConfig:
    warmup_steps: int | None = None  # defaults to the estimator window, at least 12
    warmup_replicas: int | None = None


def mape_loop(
    policy: Policy,
    sim: ClusterSimulator,
    workload: WorkloadTrace,
    config: LoopConfig | None = None,
) -> ExperimentRecord:
    """Run ``policy`` against ``sim`` over ``workload``; warm-up steps are not recorded."""
    config = config or LoopConfig()
    spec = sim.spec
    names, n = spec.names, spec.n
    if workload.request_mix is not None:
        sim.set_request_mix(workload.request_mix)
    tau = policy.model.config.tau if isinstance(policy, DeepScaler) else 12
    warm = config.warmup_steps if config.warmup_steps is not None else max(tau, 12)
    if len(workload) == 0:
        raise ValueError("workload is empty")
    warm_policy = AwsRule(n, Bounds(spec.min_replicas, spec.max_replicas))
    action = None
    for _ in range(warm):
        snap = sim.step(workload.rps[0], action)
        if isinstance(policy, DeepScaler):
            policy.frames.append(snapshot_features(snap))
            policy.snaps.append(snap)
        action = warm_policy.decide(snap).targets

    T = len(workload)
    replicas = np.zeros((T, n), dtype=np.int64)
    actions = np.zeros((T, n), dtype=np.int64)
    prov: list[list[str]] = []
    e2e = np.zeros(T)
    trust = np.ones(T)
    segments = [workload.segment_of(t) for t in range(T)]
    for t in range(T):
        snap = sim.step(workload.rps[t], action)
        replicas[t] = snap.replicas
        e2e[t] = snap.e2e_latency_ms
        if isinstance(policy, DeepScaler):
            policy.observe(snap, spec.sla_ms)
            trust[t] = policy.trust.trust_level
        act = policy.decide(snap)
        actions[t] = act.targets
        prov.append(list(act.provenance))
        action = act.targets
    label = getattr(policy, "label", policy.kind)
    return ExperimentRecord(
        policy=label,
        names=names,
        cores_per_replica=np.array([s.cores_per_replica for s in spec.services]),
        sla_ms=spec.sla_ms,
        period_s=sim.config.period_s,
        rps=np.asarray(workload.rps, dtype=np.float64).copy(),
        replicas=replicas,
        actions=actions,
        provenance=prov,
        e2e_latency_ms=e2e,
        trust=trust,
        segments=segments,
        constants=policy.constants(),
    )


def write_run_manifest(path, record: ExperimentRecord, extra: dict | None = None) -> None:
    doc = record.manifest()
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def build_policy(kind: str, spec: ServiceGraphSpec, model: STEstimator | None = None, graph=None, **kw) -> Policy:
    bounds = Bounds(spec.min_replicas, spec.max_replicas)
    if kind == "aws_rule":
        return AwsRule(spec.n, bounds, **kw)
    if kind == "slo_rule":
        return SloRule(latency_budgets(spec), spec.sla_ms, bounds, **kw)
    if kind in ("mmn_model", "mmn_holistic"):
        return MmnModel.from_spec(spec, holistic=kind == "mmn_holistic" or kw.pop("holistic", False), **kw)
    if kind == "deepscaler":
        if model is None or graph is None:
            raise ValueError("deepscaler policy needs a trained estimator checkpoint and graph")
        return DeepScaler(model, graph, bounds, **kw)
    raise ValueError(f"unknown policy kind {kind!r}; choose from {POLICY_KINDS + ('mmn_holistic',)}")
