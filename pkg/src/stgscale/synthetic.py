"""Synthetic node series with a known lagged dependency graph.

Root nodes follow a smooth random load signal.  Along each edge ``i -> j``
the child's load at ``t`` includes ``gain * load_i(t - 1)``, so predicting a
child one step ahead needs its parent's current value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import Normalizer, make_samples


@dataclass
class SyntheticData:
    frames: np.ndarray  # (T, N, C)
    labels: np.ndarray  # (T, N): load at t + 1
    truth: np.ndarray  # (N, N) dependency graph
    x: np.ndarray  # (S, N, C, tau), normalised
    y: np.ndarray  # (S, N), normalised
    normalizer: Normalizer


def dependency_series(n: int, edges, steps: int, seed: int, gain: float = 0.9, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """(loads (steps + 1, N), truth graph).  Edges must point from lower to higher index."""
    rng = np.random.default_rng(seed)
    truth = np.zeros((n, n))
    for i, j in edges:
        if not i < j:
            raise ValueError(f"edge {(i, j)} must satisfy i < j")
        truth[i, j] = 1.0
    has_parent = truth.any(axis=0)
    load = np.zeros((steps + 1, n))
    # roots: random walk in log space around 1
    level = np.zeros(n)
    for t in range(steps + 1):
        level = 0.8 * level + 0.3 * rng.standard_normal(n)
        load[t] = np.where(has_parent, 0.0, np.exp(level))
        if t > 0:
            load[t] += gain * (load[t - 1] @ truth)
        load[t] += noise * rng.standard_normal(n)
    return np.maximum(load, 0.0), truth


def make_dataset(n: int, edges, steps: int, seed: int, tau: int = 4, channels: int = 2) -> SyntheticData:
    """Frames carry the load plus ``channels - 1`` noisy copies; labels are next-step load."""
    load, truth = dependency_series(n, edges, steps, seed)
    rng = np.random.default_rng(seed + 1)
    cur = load[:-1]
    frames = [cur] + [cur + 0.05 * rng.standard_normal(cur.shape) for _ in range(channels - 1)]
    frames = np.stack(frames, axis=2)
    labels = load[1:]
    norm = Normalizer.fit(frames, replica_channel=0, labels=labels)
    x, y = make_samples(norm.transform(frames), norm.scale_replicas(labels), tau)
    return SyntheticData(frames, labels, truth, x, y, norm)
