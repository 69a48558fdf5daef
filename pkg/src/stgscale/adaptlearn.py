"""EM-style adaptive graph learning.

Alternates three steps until the iteration budget runs out or the
validation loss of the fused graph stops improving:

1. policy learning: train the estimator under the current graph;
2. graph learning: propose a graph with the generator, add it to the
   affinity set, then train the generator with the estimator frozen;
3. graph updating: score every subgraph on held-out windows, evict the
   worst while over capacity, and fuse the rest by loss.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graphops as go
from . import tensorcore as tc
from .estimator import STEstimator, evaluate, l1_loss, train
from .tensorcore import NumericalInstabilityError, Parameter, Tensor

log = logging.getLogger(__name__)

MAX_RECOVERIES = 3


@dataclass
class LearnConfig:
    n_max: int = 6
    em_iterations: int = 5
    inner_epochs: int = 50
    generator_epochs: int | None = None  # defaults to inner_epochs
    delta: float = 0.1
    eps: float = 0.05
    embed_dim: int = 8
    lr: float = 1e-3
    generator_lr: float = 1e-2
    batch_size: int = 32
    val_fraction: float = 0.2
    patience: int = 2
    generator_enabled: bool = True
    straight_through: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.em_iterations < 0:
            raise ValueError("em_iterations must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


# ---------------------------------------------------------------- generator

@dataclass
class GraphGenerator:
    """``G(A) = Norm(S * A1 + (1 - S) * A)`` with an antisymmetric embedding core."""

    n: int
    d: int = 8
    params: dict[str, Parameter] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng(self.seed)
            self.params = {
                "gen.M1": Parameter(0.1 * rng.standard_normal((self.n, self.d)), "gen.M1"),
                "gen.M2": Parameter(0.1 * rng.standard_normal((self.n, self.d)), "gen.M2"),
                "gen.Lambda": Parameter(np.zeros(self.n), "gen.Lambda"),
                "gen.h_w": Parameter(np.zeros(2), "gen.h_w"),
                "gen.h_b": Parameter(np.zeros(()), "gen.h_b"),
            }

    def a1_t(self) -> Tensor:
        p = self.params
        m12 = tc.matmul(p["gen.M1"], tc.transpose(p["gen.M2"]))
        m21 = tc.matmul(p["gen.M2"], tc.transpose(p["gen.M1"]))
        return tc.relu(tc.add(tc.sub(m12, m21), tc.diag(p["gen.Lambda"])))

    def gate_t(self, a1: Tensor, a_old: Tensor) -> Tensor:
        p = self.params
        w = p["gen.h_w"]
        z = tc.add(tc.mul(a1, tc.index(w, 0)), tc.mul(a_old, tc.index(w, 1)))
        return tc.sigmoid(tc.add(z, p["gen.h_b"]))

    def generate_t(self, a_old, eps: float) -> Tensor:
        a_old = tc.as_tensor(go._w(a_old))
        a1 = self.a1_t()
        s = self.gate_t(a1, a_old)
        mixed = tc.add(tc.mul(s, a1), tc.mul(tc.sub(1.0, s), a_old))
        return go.norm_filtered_t(mixed, eps)

    def copy_state(self) -> dict[str, np.ndarray]:
        return tc.state_dict(self.params)

    def load_state(self, state) -> None:
        tc.load_state_dict(self.params, state)


def generate(gen: GraphGenerator, a_old, eps: float = 0.05) -> np.ndarray:
    with tc.no_grad():
        return gen.generate_t(a_old, eps).data


def graph_loss(truth, pred, a_new, a_old, delta: float, straight_through: bool = False) -> Tensor:
    """Prediction L1 plus a hinge on the fraction of edges absent from ``a_old``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    a_new = tc.as_tensor(a_new)
    n = a_new.shape[0]
    gained = tc.relu(tc.sub(tc.indicator(a_new, straight_through), tc.indicator(tc.as_tensor(go._w(a_old)))))
    count = tc.sum(gained)
    penalty = tc.div(tc.relu(tc.sub(tc.div(count, float(n * n)), delta)), delta)
    return tc.add(l1_loss(pred, truth), penalty)


# ---------------------------------------------------------------- state

@dataclass
class LearningState:
    affinity_set: go.AffinitySet
    current_a: np.ndarray
    estimator: STEstimator
    generator: GraphGenerator
    config: LearnConfig
    seed_graph: np.ndarray
    manifest: list[dict] = field(default_factory=list)


def init_state(seed_graphs, estimator: STEstimator, config: LearnConfig | None = None) -> LearningState:
    """Seed the affinity set with filtered copies of ``seed_graphs``; the first graph is their union."""
    config = config or LearnConfig()
    if isinstance(seed_graphs, np.ndarray) and seed_graphs.ndim == 2:
        seed_graphs = [seed_graphs]
    seeds = [go.norm_filtered(g, config.eps) for g in seed_graphs]
    if not seeds:
        raise ValueError("at least one seed graph is required")
    aset = go.AffinitySet(config.n_max)
    for k, g in enumerate(seeds):
        aset.push(g, f"seed{k}")
    current = go.union(aset)
    gen = GraphGenerator(seeds[0].shape[0], config.embed_dim, seed=config.seed)
    return LearningState(aset, current, estimator, gen, config, current.copy())


def split(x: np.ndarray, y: np.ndarray, val_fraction: float = 0.2):
    """Chronological train / validation split."""
    n_val = max(1, int(round(len(x) * val_fraction)))
    if len(x) - n_val < 1:
        raise ValueError(f"need at least 2 samples to split, got {len(x)}")
    return x[:-n_val], y[:-n_val], x[-n_val:], y[-n_val:]


def score_subgraphs(aset: go.AffinitySet, model: STEstimator, x_val, y_val) -> list[float]:
    if len(x_val) == 0:
        raise ValueError("empty validation set")
    losses = [evaluate(model, x_val, y_val, a) for a in aset.matrices]
    aset.set_losses(losses)
    return losses


# ---------------------------------------------------------------- EM loop

def _train_generator(state: LearningState, x, y, a_old, epochs: int, lr: float, seed: int) -> float:
    cfg, gen = state.config, state.generator

    def graph():
        return gen.generate_t(a_old, cfg.eps)

    def loss_fn(pred, truth, g):
        return graph_loss(truth, pred, g, a_old, cfg.delta, cfg.straight_through)

    stats = train(state.estimator, x, y, graph, epochs, lr, cfg.batch_size, seed, list(gen.params.values()), loss_fn)
    for p in state.estimator.params.values():
        p.zero_grad()
    return stats.final


def _snapshot(state: LearningState) -> dict:
    return {
        "theta": state.estimator.copy_state(),
        "pi": state.generator.copy_state(),
        "aset": copy.deepcopy(state.affinity_set),
        "current_a": state.current_a.copy(),
    }


def _restore(state: LearningState, snap: dict) -> None:
    state.estimator.load_state(snap["theta"])
    state.generator.load_state(snap["pi"])
    state.affinity_set = copy.deepcopy(snap["aset"])
    state.current_a = snap["current_a"].copy()
    for p in list(state.estimator.params.values()) + list(state.generator.params.values()):
        p.adam_m = np.zeros_like(p.data)
        p.adam_v = np.zeros_like(p.data)
        p.step_count = 0


def _iteration(state: LearningState, it: int, data, lr: float, gen_lr: float) -> dict:
    cfg = state.config
    x_tr, y_tr, x_val, y_val = data
    a_old = state.current_a
    theta_loss = train(state.estimator, x_tr, y_tr, a_old, cfg.inner_epochs, lr, cfg.batch_size, cfg.seed + it).final
    rec: dict = {"iteration": it, "train_loss": theta_loss}
    if cfg.generator_enabled:
        a_new = generate(state.generator, a_old, cfg.eps)
        state.affinity_set.push(a_new, f"gen{it}")
        gen_epochs = cfg.inner_epochs if cfg.generator_epochs is None else cfg.generator_epochs
        rec["generator_loss"] = _train_generator(state, x_tr, y_tr, a_old, gen_epochs, gen_lr, cfg.seed + 1000 + it)
        rec["new_edge_fraction"] = go.new_edge_fraction(a_new, a_old)
    else:
        rec["generator_loss"] = None
        rec["new_edge_fraction"] = 0.0
    losses = score_subgraphs(state.affinity_set, state.estimator, x_val, y_val)
    rec["subgraph_losses"] = list(losses)
    rec["evicted"] = _evict(state.affinity_set)
    state.current_a = go.fuse_by_loss(state.affinity_set, cfg.eps)
    rec["set_size"] = len(state.affinity_set)
    rec["labels"] = list(state.affinity_set.labels)
    rec["fusion_weights"] = go.fusion_weights(state.affinity_set.losses).tolist()
    rec["val_loss"] = evaluate(state.estimator, x_val, y_val, state.current_a)
    rec["jaccard_seed"] = go.jaccard(state.current_a, state.seed_graph)
    return rec


def _evict(aset: go.AffinitySet) -> list[str]:
    """Labels of the evicted matrices, in eviction order."""
    out = []
    while len(aset) > aset.capacity:
        out.append(aset.labels[int(np.argmax(aset.losses))])
        aset.evict_worst()
    return out


def run_em(state: LearningState, x: np.ndarray, y: np.ndarray, reference=None) -> tuple[STEstimator, np.ndarray]:
    """Run the alternating loop on windows ``x`` (S, N, C, T) and targets ``y`` (S, N).

    ``reference`` is an optional graph reported as ``jaccard_reference`` in the
    manifest; it never influences learning.
    """
    cfg = state.config
    data = split(x, y, cfg.val_fraction)
    lr, gen_lr = cfg.lr, cfg.generator_lr
    if cfg.em_iterations == 0:
        loss = train(state.estimator, data[0], data[1], state.current_a, cfg.inner_epochs, lr, cfg.batch_size, cfg.seed)
        state.manifest.append({"iteration": 0, "train_loss": loss.final, "set_size": len(state.affinity_set)})
        return state.estimator, state.current_a

    best, stale = np.inf, 0
    it = 0
    recoveries = 0
    while it < cfg.em_iterations:
        snap = _snapshot(state)
        try:
            rec = _iteration(state, it, data, lr, gen_lr)
        except (NumericalInstabilityError, FloatingPointError) as exc:
            recoveries += 1
            if recoveries > MAX_RECOVERIES:
                raise
            _restore(state, snap)
            lr, gen_lr = lr / 2, gen_lr / 2
            log.warning("iteration %d diverged (%s); restored checkpoint, lr -> %g", it, exc, lr)
            continue
        rec["lr"] = lr
        if reference is not None:
            rec["jaccard_reference"] = go.jaccard(state.current_a, reference)
        state.manifest.append(rec)
        it += 1
        if rec["val_loss"] < best - 1e-12:
            best, stale = rec["val_loss"], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return state.estimator, state.current_a


def write_manifest(path, state: LearningState, extra: dict | None = None) -> None:
    doc = {"config": asdict(state.config), "iterations": state.manifest}
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
