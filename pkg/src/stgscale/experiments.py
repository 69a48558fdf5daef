"""End-to-end pipeline shared by the CLI, the scripts and the acceptance suite.

generate -> train -> run -> compare.  Every artifact is a function of the
configuration and seed alone.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adaptlearn as al
from . import autoscaler as au
from . import graphops as go
from . import metrics as me
from .config import ConfigError, ExperimentConfig
from .estimator import EstimatorConfig, Normalizer, STEstimator, make_samples
from .simcluster import telemetry as tm
from .simcluster.presets import get_preset
from .simcluster.simulator import (
    FEATURE_CHANNELS,
    REPLICA_CHANNEL,
    ClusterSimulator,
    SimConfig,
    TelemetrySnapshot,
    label_oracle,
    snapshot_features,
)
from .simcluster.topology import ServiceGraphSpec
from .simcluster.workload import WorkloadTrace, generate_workload

log = logging.getLogger(__name__)

EXPLORE_LOW, EXPLORE_HIGH = 0.6, 1.5


class InvariantError(RuntimeError):
    """A produced artifact violates a documented invariant."""


def load_spec(cfg: ExperimentConfig) -> ServiceGraphSpec:
    if cfg.spec_path:
        return ServiceGraphSpec.load(cfg.spec_path)
    try:
        return get_preset(cfg.preset)
    except KeyError as exc:
        raise ConfigError("config.preset", str(exc.args[0])) from None


def make_workload(cfg: ExperimentConfig, spec: ServiceGraphSpec, seed: int | None = None) -> WorkloadTrace:
    w = cfg.workload
    try:
        return generate_workload(
            w.pattern, w.duration, w.seed if seed is None else seed, w.base_rps or spec.base_rps, w.request_mix
        )
    except ValueError as exc:
        raise ConfigError("config.workload", str(exc)) from None


# ---------------------------------------------------------------- dataset

class ExplorePolicy(au.Policy):
    """CPU-rule decisions scaled by a random factor so training data covers
    over- and under-provisioned states."""

    kind = "explore"

    def __init__(self, n: int, bounds: au.Bounds, seed: int):
        self.inner = au.AwsRule(n, bounds)
        self.bounds = bounds
        self.rng = np.random.default_rng(seed)

    def decide(self, snap: TelemetrySnapshot) -> au.ScalingAction:
        base = self.inner.decide(snap).targets
        factor = self.rng.uniform(EXPLORE_LOW, EXPLORE_HIGH, size=len(base))
        return au._rule_action(np.rint(base * factor), self.bounds)


@dataclass
class Run:
    frames: np.ndarray  # (T, N, C)
    labels: np.ndarray  # (T, N)
    rps: np.ndarray
    edge_counts: np.ndarray  # summed over the run
    steps: int


@dataclass
class Dataset:
    spec: ServiceGraphSpec
    runs: list[Run]

    @property
    def edge_counts(self) -> np.ndarray:
        return np.sum([r.edge_counts for r in self.runs], axis=0)

    @property
    def steps(self) -> int:
        return sum(r.steps for r in self.runs)

    def seed_graph(self) -> np.ndarray:
        return au.trace_seed_graph(self.edge_counts, self.steps)

    def od_graph(self) -> np.ndarray:
        return go.build_od(go.RequestTrace(self.edge_counts, self.steps))


def simulate_run(
    spec, workload: WorkloadTrace, sim_cfg: SimConfig, seed: int, request_mix=None, label_rho: float = 0.7
) -> tuple[Run, list]:
    sim = ClusterSimulator(spec, dataclasses.replace(sim_cfg, seed=seed), request_mix=request_mix)
    policy = ExplorePolicy(spec.n, au.Bounds(spec.min_replicas, spec.max_replicas), seed)
    action, snaps = None, []
    for r in workload.rps:
        snap = sim.step(r, action)
        snaps.append(snap)
        action = policy.decide(snap).targets
    frames = np.stack([snapshot_features(s) for s in snaps]) if snaps else np.empty((0, spec.n, len(FEATURE_CHANNELS)))
    labels = label_oracle(spec, workload.rps, label_rho, request_mix)
    counts = np.sum([s.edge_counts for s in snaps], axis=0) if snaps else np.zeros((spec.n, spec.n))
    return Run(frames, labels, np.asarray(workload.rps), counts, len(snaps)), snaps


def generate_dataset(cfg: ExperimentConfig, spec: ServiceGraphSpec | None = None, out: Path | None = None) -> Dataset:
    spec = spec or load_spec(cfg)
    d = cfg.dataset
    if d.duration <= 0 or d.runs <= 0:
        raise ConfigError("config.dataset", "duration and runs must be positive; the dataset would be empty")
    runs = []
    for k in range(d.runs):
        seed = d.seed + k
        w = generate_workload(d.pattern, d.duration, seed, cfg.workload.base_rps or spec.base_rps, d.request_mix)
        run, snaps = simulate_run(spec, w, cfg.sim, seed, d.request_mix, d.label_rho)
        runs.append(run)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            tm.write_telemetry(out / f"telemetry_{k}.csv", snaps, spec.names, cfg.sim.period_s)
            tm.write_edge_counts(out / f"edges_{k}.csv", snaps, spec.names)
            tm.write_labels(out / f"labels_{k}.csv", run.labels, spec.names)
    if out is not None:
        spec.save(out / "spec.json")
        go.write_edge_list(out / "true_graph.csv", spec.adjacency())
        manifest = {"spec_digest": spec.digest(), "runs": d.runs, "config": cfg.to_dict()}
        (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Dataset(spec, runs)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "dataset.json").read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "not a dataset directory (dataset.json missing)") from None
    spec = ServiceGraphSpec.load(path / "spec.json")
    runs = []
    for k in range(meta["runs"]):
        tel = tm.read_telemetry(path / f"telemetry_{k}.csv")
        labels, _ = tm.read_labels(path / f"labels_{k}.csv")
        counts, steps = tm.read_edge_counts(path / f"edges_{k}.csv", spec.names)
        runs.append(Run(tel["frames"], labels, tel["rps"], counts, len(tel["rps"])))
    return Dataset(spec, runs)


def samples(dataset: Dataset, tau: int, normalizer: Normalizer | None = None):
    """Normalised windows from every run (windows never straddle runs)."""
    if normalizer is None:
        frames = np.concatenate([r.frames for r in dataset.runs])
        labels = np.concatenate([r.labels for r in dataset.runs])
        normalizer = Normalizer.fit(frames, REPLICA_CHANNEL, labels)
    xs, ys = [], []
    for r in dataset.runs:
        x, y = make_samples(normalizer.transform(r.frames), normalizer.scale_replicas(r.labels), tau)
        xs.append(x)
        ys.append(y)
    x, y = np.concatenate(xs), np.concatenate(ys)
    return x, y, normalizer


# ---------------------------------------------------------------- training

@dataclass
class TrainedModel:
    model: STEstimator
    graph: np.ndarray
    state: al.LearningState


def train_model(cfg: ExperimentConfig, dataset: Dataset) -> TrainedModel:
    tau = cfg.estimator.tau
    if min(r.steps for r in dataset.runs) < tau + 1:
        raise ConfigError("dataset", f"every run needs at least tau + 1 = {tau + 1} steps")
    x, y, norm = samples(dataset, tau)
    e = cfg.estimator
    ecfg = EstimatorConfig(dataset.spec.n, len(FEATURE_CHANNELS), e.tau, e.blocks, e.cheb_order, e.hidden, seed=e.seed)
    model = STEstimator(ecfg, normalizer=norm, channel_names=list(FEATURE_CHANNELS))
    state = al.init_state(dataset.seed_graph(), model, cfg.learn)
    al.run_em(state, x, y, reference=dataset.od_graph())
    return TrainedModel(model, state.current_a, state)


def save_trained(out: Path, trained: TrainedModel, dataset: Dataset) -> None:
    out.mkdir(parents=True, exist_ok=True)
    trained.model.save(out / "checkpoint.json", {"graph": trained.graph.tolist(), "spec_digest": dataset.spec.digest()})
    go.write_dense_csv(out / "graph.csv", trained.graph)
    truth = dataset.spec.adjacency()
    al.write_manifest(
        out / "learning.json",
        trained.state,
        {
            "jaccard_true_graph": go.jaccard(trained.graph, truth),
            "jaccard_od": go.jaccard(trained.graph, dataset.od_graph()),
            "spec_digest": dataset.spec.digest(),
        },
    )


def load_trained(path) -> tuple[STEstimator, np.ndarray, dict]:
    path = Path(path)
    ckpt = path / "checkpoint.json" if path.is_dir() else path
    model, extra = STEstimator.load(ckpt)
    if "graph" not in extra:
        raise ConfigError(str(ckpt), "checkpoint carries no affinity graph")
    return model, np.asarray(extra["graph"], dtype=np.float64), extra


def heldout_forecast(cfg: ExperimentConfig, spec: ServiceGraphSpec, trained: TrainedModel, seed: int):
    """(prediction, truth, persistence) replica counts on an unseen exploration run.

    Persistence predicts the replicas currently running.
    """
    run, _ = simulate_run(spec, make_workload(cfg, spec, seed), cfg.sim, seed, cfg.dataset.request_mix, cfg.dataset.label_rho)
    tau = cfg.estimator.tau
    x, _ = make_samples(trained.model.normalizer.transform(run.frames), run.labels, tau)
    pred = trained.model.unscale(trained.model.predict_batch(x, trained.graph))
    return pred, run.labels[tau - 1 :], run.frames[tau - 1 :, :, REPLICA_CHANNEL]


# ---------------------------------------------------------------- runs

def make_policy(cfg: ExperimentConfig, spec: ServiceGraphSpec, kind: str | None = None, trained=None) -> au.Policy:
    p = cfg.policy
    kind = kind or p.kind
    bounds = au.Bounds(spec.min_replicas, spec.max_replicas)
    if kind == "aws_rule":
        return au.AwsRule(spec.n, bounds, p.target_util, p.cooldown)
    if kind == "slo_rule":
        return au.SloRule(au.latency_budgets(spec), spec.sla_ms, bounds)
    if kind in ("mmn_model", "mmn_holistic"):
        return au.MmnModel.from_spec(spec, holistic=(kind == "mmn_holistic" or p.holistic), request_mix=cfg.workload.request_mix)
    if kind == "deepscaler":
        if trained is None:
            raise ConfigError("policy.kind", "deepscaler needs a trained checkpoint (--checkpoint)")
        model, graph = trained
        return au.DeepScaler(
            model, graph, bounds, p.trust, p.rounding, p.retrain_interval, _online_learn(cfg), p.label_rho
        )
    raise ConfigError("policy.kind", f"unknown policy {kind!r}; choose from {au.POLICY_KINDS + ('mmn_holistic',)}")


def _online_learn(cfg: ExperimentConfig) -> al.LearnConfig:
    # online retraining fine-tunes the deployed model; a shorter budget than offline
    return dataclasses.replace(cfg.learn, em_iterations=min(cfg.learn.em_iterations, 2), inner_epochs=max(1, cfg.learn.inner_epochs // 5))


def run_policy(cfg: ExperimentConfig, spec: ServiceGraphSpec, kind: str | None = None, trained=None, seed: int | None = None, workload: WorkloadTrace | None = None) -> au.ExperimentRecord:
    seed = cfg.workload.seed if seed is None else seed
    workload = workload or make_workload(cfg, spec, seed)
    if trained is not None:
        # each run starts from the same checkpoint
        model, graph = trained
        clone = STEstimator(model.config, normalizer=model.normalizer, channel_names=model.channel_names)
        clone.load_state(model.copy_state())
        trained = (clone, graph)
    policy = make_policy(cfg, spec, kind, trained)
    sim = ClusterSimulator(spec, dataclasses.replace(cfg.sim, seed=seed), request_mix=workload.request_mix)
    record = au.mape_loop(policy, sim, workload)
    check_record(record, spec)
    return record


def check_record(record: au.ExperimentRecord, spec: ServiceGraphSpec) -> None:
    for arr, what in ((record.replicas, "replicas"), (record.actions, "actions")):
        if arr.min(initial=spec.min_replicas) < spec.min_replicas or arr.max(initial=spec.max_replicas) > spec.max_replicas:
            raise InvariantError(f"{what} outside [{spec.min_replicas}, {spec.max_replicas}]")
    if not np.all(np.isfinite(record.e2e_latency_ms)):
        raise InvariantError("non-finite end-to-end latency")


def write_run(out: Path, record: au.ExperimentRecord, report: me.EvaluationReport, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record.to_csv(out / "record.csv")
    au.write_run_manifest(out / "run.json", record, extra)
    me.write_report(out / "report.json", report)
    me.write_cumulative_csv(out / "cumulative.csv", record)
    (out / "report.md").write_text(me.comparison_markdown(me.comparison_rows({record.policy: [report]})))


def compare(cfg: ExperimentConfig, spec: ServiceGraphSpec, kinds: list[str], trained=None, seeds=None) -> dict[str, list[me.EvaluationReport]]:
    seeds = cfg.seeds if seeds is None else seeds
    out: dict[str, list[me.EvaluationReport]] = {}
    for kind in kinds:
        reports = []
        for s in seeds:
            rec = run_policy(cfg, spec, kind, trained if kind == "deepscaler" else None, seed=s)
            reports.append(me.evaluate_record(rec))
        out[reports[0].policy if kind != "mmn_holistic" else "mmn_holistic"] = reports
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
