"""Affinity-matrix algebra.

Convention: entry ``(i, j)`` is the strength of the dependency carried by
traffic flowing from service ``i`` to service ``j`` (same orientation as an
origin-destination request matrix).

Public functions take and return plain ``numpy`` arrays (or an
:class:`AffinityMatrix`, whose ``weights`` are used).  The ``*_t`` variants
work on :class:`~stgscale.tensorcore.Tensor` and are differentiable; the
numpy functions are thin wrappers over them so both paths share one
definition.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensorcore as tc

DEFAULT_CC_THRESHOLD = 0.7


@dataclass
class AffinityMatrix:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"affinity matrix must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("affinity matrix has non-finite entries")
        if np.any(w < 0):
            raise ValueError("affinity matrix has negative entries")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def to_csv(self, path) -> None:
        write_dense_csv(path, self.weights)

    def to_edge_list(self, path) -> None:
        write_edge_list(path, self.weights)


@dataclass
class RequestTrace:
    """Cumulative per-edge request counts over ``steps`` simulator steps."""

    counts: np.ndarray
    steps: int

    @property
    def average(self) -> np.ndarray:
        return self.counts / max(self.steps, 1)


@dataclass
class AffinitySet:
    """Bounded, ordered collection of affinity matrices (oldest first)."""

    capacity: int
    matrices: list[np.ndarray] = field(default_factory=list)
    losses: list[float] | None = None
    labels: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def n(self) -> int:
        return self.matrices[0].shape[0]

    def push(self, matrix, label: str = "") -> None:
        m = _w(matrix)
        if self.matrices and m.shape != self.matrices[0].shape:
            raise ValueError(f"matrix shape {m.shape} does not match set shape {self.matrices[0].shape}")
        self.matrices.append(m)
        self.labels.append(label or f"A{len(self.matrices) - 1}")
        self.losses = None

    def set_losses(self, losses: Sequence[float]) -> None:
        if len(losses) != len(self.matrices):
            raise ValueError(f"{len(losses)} losses for {len(self.matrices)} matrices")
        self.losses = [float(x) for x in losses]

    def evict_worst(self) -> int:
        """Drop the highest-loss matrix (oldest wins ties); returns its old index."""
        if self.losses is None:
            raise ValueError("losses must be scored before eviction")
        worst = int(np.argmax(self.losses))  # argmax returns the first, i.e. oldest, maximum
        del self.matrices[worst], self.losses[worst], self.labels[worst]
        return worst

    def enforce_capacity(self) -> list[int]:
        evicted = []
        while len(self.matrices) > self.capacity:
            evicted.append(self.evict_worst())
        return evicted


def _w(a) -> np.ndarray:
    return np.asarray(getattr(a, "weights", a), dtype=np.float64)


# ---------------------------------------------------------------- normalisation

def _degree_t(a: tc.Tensor) -> tc.Tensor:
    # max of out- and in-strength; equals the row sum for symmetric matrices and
    # keeps normalised entries in [0, 1] for directed ones
    d = tc.maximum(tc.sum(a, axis=1), tc.sum(a, axis=0))
    zero = (d.data == 0).astype(np.float64)
    return tc.add(d, tc.Tensor(zero)) if zero.any() else d


def _sym_scale_t(a: tc.Tensor) -> tc.Tensor:
    inv = tc.power(_degree_t(a), -0.5)
    return tc.mul(a, tc.outer(inv, inv))


def norm_gcn_t(a: tc.Tensor) -> tc.Tensor:
    n = a.shape[0]
    return _sym_scale_t(tc.add(a, tc.Tensor(np.eye(n))))


def norm_filtered_t(a: tc.Tensor, eps: float) -> tc.Tensor:
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    a2 = tc.relu(tc.sub(_sym_scale_t(a), eps))
    return _sym_scale_t(a2)


def norm_gcn(a) -> np.ndarray:
    """Self-loop renormalisation ``D^-1/2 (A + I) D^-1/2``."""
    return norm_gcn_t(tc.Tensor(_w(a))).data


def norm_filtered(a, eps: float) -> np.ndarray:
    """Scale, drop entries below ``eps``, rescale.  Zero-degree rows keep unit degree."""
    return norm_filtered_t(tc.Tensor(_w(a)), eps).data


# ---------------------------------------------------------------- set operations

def union(aset: AffinitySet | Sequence) -> np.ndarray:
    """Entrywise mean of the nonzero entries across the set (0 where all are zero)."""
    mats = aset.matrices if isinstance(aset, AffinitySet) else [_w(m) for m in aset]
    if not mats:
        raise ValueError("union of an empty affinity set")
    stack = np.stack(mats)
    total = stack.sum(axis=0)
    support = (stack != 0).sum(axis=0)
    out = np.zeros_like(total)
    np.divide(total, support, out=out, where=support > 0)
    return out


def fusion_weights(losses: Sequence[float]) -> np.ndarray:
    l = np.asarray(losses, dtype=np.float64)
    return tc.softmax(tc.Tensor(l.max() - l)).data


def fuse_by_loss(aset: AffinitySet, eps: float) -> np.ndarray:
    """Softmax-of-loss-gap weighted sum of the set, passed through ``norm_filtered``."""
    if aset.losses is None or len(aset.losses) != len(aset.matrices):
        raise ValueError("fuse_by_loss needs a loss for every matrix in the set")
    w = fusion_weights(aset.losses)
    combined = np.einsum("k,kij->ij", w, np.stack(aset.matrices))
    return norm_filtered(combined, eps)


# ---------------------------------------------------------------- reference graphs

def build_od(trace, n: int | None = None) -> np.ndarray:
    """Origin-destination graph: keep average edge counts above half their row maximum."""
    avg = trace.average if isinstance(trace, RequestTrace) else np.asarray(trace, dtype=np.float64)
    if n is not None and avg.shape != (n, n):
        raise ValueError(f"trace shape {avg.shape} does not match n={n}")
    row_max = avg.max(axis=1, keepdims=True)
    return np.where(avg > row_max / 2.0, avg, 0.0)


def rank_correlation(series: np.ndarray) -> np.ndarray:
    """Spearman correlation between rows (average-tie ranks); constant rows correlate 0."""
    s = np.asarray(series, dtype=np.float64)
    ranks = np.apply_along_axis(rankdata, 1, s, method="average")
    centered = ranks - ranks.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    ok = norms > 0
    corr = np.zeros((s.shape[0], s.shape[0]))
    c = centered[ok] / norms[ok, None]
    corr[np.ix_(ok, ok)] = c @ c.T
    return np.clip(corr, -1.0, 1.0)


def build_cc(series, threshold=DEFAULT_CC_THRESHOLD) -> np.ndarray:
    """Absolute rank-correlation graph, entries kept only above the per-row threshold."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] < 8:
        raise ValueError(f"build_cc needs >= 8 samples per node, got shape {s.shape}")
    corr = np.abs(rank_correlation(s))
    tc_row = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (s.shape[0],))[:, None]
    return np.where(corr > tc_row, corr, 0.0)


def edge_set(a) -> set[tuple[int, int]]:
    w = _w(a)
    rows, cols = np.nonzero(w)
    return {(int(i), int(j)) for i, j in zip(rows, cols) if i != j}


def jaccard(a, b) -> float:
    ea, eb = edge_set(a), edge_set(b)
    if _w(a).shape != _w(b).shape:
        raise ValueError(f"jaccard of different sizes {_w(a).shape} vs {_w(b).shape}")
    if not ea and not eb:
        return 1.0
    return len(ea & eb) / len(ea | eb)


def new_edge_fraction(a_new, a_old) -> float:
    gained = (_w(a_new) != 0) & (_w(a_old) == 0)
    return float(gained.sum()) / _w(a_new).size


# ---------------------------------------------------------------- IO

def write_dense_csv(path, a) -> None:
    w = _w(a)
    lines = [str(w.shape[0])] + [",".join(repr(float(x)) for x in row) for row in w]
    Path(path).write_text("\n".join(lines) + "\n")


def read_dense_csv(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    n = int(lines[0])
    w = np.array([[float(x) for x in ln.split(",")] for ln in lines[1 : n + 1]])
    if w.shape != (n, n):
        raise ValueError(f"{path}: header says n={n} but body has shape {w.shape}")
    return w


def write_edge_list(path, a) -> None:
    w = _w(a)
    rows, cols = np.nonzero(w)
    body = [f"{i},{j},{float(w[i, j])!r}" for i, j in zip(rows, cols)]
    Path(path).write_text("\n".join([f"# n={w.shape[0]}"] + body) + "\n")


def read_edge_list(path, n: int | None = None) -> np.ndarray:
    entries = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln:
            continue
        if ln.startswith("#"):
            if n is None and ln.startswith("# n="):
                n = int(ln[4:])
            continue
        i, j, wt = ln.split(",")
        entries.append((int(i), int(j), float(wt)))
    if n is None:
        n = 1 + max(max(i, j) for i, j, _ in entries) if entries else 0
    w = np.zeros((n, n))
    for i, j, wt in entries:
        w[i, j] = wt
    return w
