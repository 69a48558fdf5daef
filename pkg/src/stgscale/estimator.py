"""Spatio-temporal GNN replica estimator.

Input windows are ``(batch, nodes, channels, time)``.  Each block applies
temporal attention, a Chebyshev graph convolution (ReLU), a channel
LayerNorm and a ReLU; a linear head maps every node's flattened features to
one replica estimate.

Graph convolutions aggregate along the affinity direction: node ``j``
receives messages from ``i`` through entry ``(i, j)``, so callees see their
callers' load.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Parameter, Tensor

MAX_CHEB_ORDER = 8


@dataclass
class EstimatorConfig:
    n: int
    channels: int
    tau: int = 12
    blocks: int = 2
    cheb_order: int = 3
    hidden: int = 32
    ln_eps: float = 1e-5
    global_head: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if not 1 <= self.cheb_order <= MAX_CHEB_ORDER:
            raise ValueError(f"cheb_order must be in [1, {MAX_CHEB_ORDER}]")
        if min(self.n, self.channels, self.tau, self.hidden) < 1:
            raise ValueError("n, channels, tau and hidden must be positive")


@dataclass
class FeatureWindow:
    values: np.ndarray  # (N, C, tau), already normalised
    channel_names: list[str]
    replica_channel: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"window must be N x C x tau, got {self.values.shape}")
        if len(self.channel_names) != self.values.shape[1]:
            raise ValueError("one name per channel required")
        if not 0 <= self.replica_channel < self.values.shape[1]:
            raise ValueError("replica channel index out of range")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("window contains non-finite values")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def c(self):
        return self.values.shape[1]

    @property
    def tau(self):
        return self.values.shape[2]


@dataclass
class ReplicaPrediction:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("prediction contains non-finite values")


@dataclass
class Normalizer:
    """Per-channel z-scores; the replica channel (and targets) are min-max scaled."""

    mean: np.ndarray
    std: np.ndarray
    replica_channel: int
    rmin: float
    rmax: float

    @classmethod
    def fit(cls, frames: np.ndarray, replica_channel: int, labels: np.ndarray | None = None):
        flat = frames.reshape(-1, frames.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        reps = flat[:, replica_channel]
        lo, hi = float(reps.min()), float(reps.max())
        if labels is not None:
            lo, hi = min(lo, float(labels.min())), max(hi, float(labels.max()))
        if hi - lo < 1e-12:
            hi = lo + 1.0
        return cls(mean, std, replica_channel, lo, hi)

    def transform(self, frames: np.ndarray) -> np.ndarray:
        """Normalise raw ``(..., N, C)`` frames."""
        out = (frames - self.mean) / self.std
        rc = self.replica_channel
        out[..., rc] = self.scale_replicas(frames[..., rc])
        return out

    def scale_replicas(self, r):
        return (np.asarray(r, dtype=np.float64) - self.rmin) / (self.rmax - self.rmin)

    def unscale_replicas(self, z):
        return np.asarray(z, dtype=np.float64) * (self.rmax - self.rmin) + self.rmin

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "replica_channel": self.replica_channel,
            "rmin": self.rmin,
            "rmax": self.rmax,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), int(d["replica_channel"]), d["rmin"], d["rmax"])


def make_samples(frames: np.ndarray, labels: np.ndarray, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows: sample ``t`` holds frames ``t-tau+1..t`` (as N x C x tau) and ``labels[t]``."""
    T = frames.shape[0]
    if T < tau:
        return np.empty((0, frames.shape[1], frames.shape[2], tau)), np.empty((0, labels.shape[1]))
    idx = np.arange(tau - 1, T)
    windows = np.stack([frames[t - tau + 1 : t + 1] for t in idx])  # S, tau, N, C
    return np.transpose(windows, (0, 2, 3, 1)).copy(), labels[idx].copy()


# ---------------------------------------------------------------- layers

def _attention_weights(x: Tensor, ve, be, u1, u2, u3) -> Tensor:
    B, N, C, T = x.shape
    if ve.shape != (T, T) or be.shape != (T, T) or u1.shape != (N,) or u2.shape != (C, N) or u3.shape != (C,):
        raise tc.ShapeError("t_attention params", x.shape, (ve.shape, u1.shape, u2.shape, u3.shape))
    lhs = tc.einsum("btc,cn->btn", tc.einsum("bnct,n->btc", x, u1), u2)
    rhs = tc.einsum("c,bnct->bnt", u3, x)
    scores = tc.add(tc.einsum("btn,bns->bts", lhs, rhs), tc.expand(be, (B, T, T)))
    e = tc.einsum("ts,bsu->btu", ve, tc.sigmoid(scores))
    return tc.softmax(e, axis=-1)


def t_attention(x: Tensor, ve, be, u1, u2, u3) -> Tensor:
    """Temporal attention over a (B, N, C, T) batch.

    Output slice ``t`` is ``sum_s E'[t, s] X[..., s]``, so every output slice
    is a convex combination of input slices.
    """
    x = tc.as_tensor(x)
    return tc.einsum("bncs,bts->bnct", x, _attention_weights(x, ve, be, u1, u2, u3))


def attention_matrix(x, ve, be, u1, u2, u3) -> np.ndarray:
    """Row-stochastic (B, T, T) mixing matrices, for inspection and tests."""
    with tc.no_grad():
        return _attention_weights(tc.as_tensor(x), ve, be, u1, u2, u3).data


def cheb_conv(h: Tensor, a_hat, theta, k: int) -> Tensor:
    """ReLU(sum_k T_k(L~) H Theta_k) per time slice, with L~ = L - I = -A_hat.

    ``theta`` has shape (K, F_in, F_out).
    """
    if not 1 <= k <= MAX_CHEB_ORDER:
        raise ValueError(f"Chebyshev order {k} outside [1, {MAX_CHEB_ORDER}]")
    a_hat = tc.as_tensor(a_hat)
    theta = tc.as_tensor(theta)
    B, N, F, T = h.shape
    if a_hat.shape != (N, N) or theta.shape[0] < k or theta.shape[1] != F:
        raise tc.ShapeError("cheb_conv", h.shape, (a_hat.shape, theta.shape))
    l_tilde = tc.mul(a_hat, -1.0)

    def prop(z):
        return tc.einsum("ij,bift->bjft", l_tilde, z)

    terms = [h]
    if k > 1:
        terms.append(prop(h))
    for _ in range(2, k):
        terms.append(tc.sub(tc.mul(prop(terms[-1]), 2.0), terms[-2]))
    out = None
    for i, z in enumerate(terms):
        contrib = tc.einsum("bnft,fg->bngt", z, tc.index(theta, i))
        out = contrib if out is None else tc.add(out, contrib)
    return tc.relu(out)


def layer_norm(x: Tensor, gamma, beta, eps: float = 1e-5, axis: int = 2) -> Tensor:
    """Normalise over the channel axis for every (batch, node, time) position."""
    gamma, beta = tc.as_tensor(gamma), tc.as_tensor(beta)
    if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
        raise tc.ShapeError("layer_norm", x.shape, gamma.shape)
    mu = tc.expand(tc.mean(x, axis=axis, keepdims=True), x.shape)
    centered = tc.sub(x, mu)
    variance = tc.expand(tc.mean(tc.mul(centered, centered), axis=axis, keepdims=True), x.shape)
    normed = tc.div(centered, tc.sqrt(tc.add(variance, eps)))
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    g = tc.expand(tc.reshape(gamma, bshape), x.shape)
    b = tc.expand(tc.reshape(beta, bshape), x.shape)
    return tc.add(tc.mul(normed, g), b)


def l1_loss(pred, truth) -> Tensor:
    pred, truth = tc.as_tensor(pred), tc.as_tensor(truth)
    if pred.shape != truth.shape:
        raise tc.ShapeError("l1_loss", pred.shape, truth.shape)
    return tc.mean(tc.abs(tc.sub(pred, truth)))


# ---------------------------------------------------------------- model

@dataclass
class STEstimator:
    config: EstimatorConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    normalizer: Normalizer | None = None
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config)

    def forward_t(self, x, a_hat) -> Tensor:
        """Normalised predictions (B, N) for a normalised batch (B, N, C, T)."""
        cfg, p = self.config, self.params
        x = tc.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.n, cfg.channels, cfg.tau):
            raise tc.ShapeError("estimator input", x.shape, ("B", cfg.n, cfg.channels, cfg.tau))
        h = x
        for b in range(cfg.blocks):
            pre = f"block{b}."
            h = t_attention(h, p[pre + "Ve"], p[pre + "be"], p[pre + "U1"], p[pre + "U2"], p[pre + "U3"])
            h = cheb_conv(h, a_hat, p[pre + "theta"], cfg.cheb_order)
            h = layer_norm(h, p[pre + "gamma"], p[pre + "beta"], cfg.ln_eps)
            h = tc.relu(h)
        B = h.shape[0]
        if cfg.global_head:
            flat = tc.reshape(h, (B, cfg.n * cfg.hidden * cfg.tau))
            out = tc.einsum("bk,kn->bn", flat, p["head.w"])
        else:
            out = tc.einsum("bnft,ft->bn", h, p["head.w"])
        return tc.add(out, tc.expand(p["head.b"], (B, cfg.n)))

    def forward(self, window: FeatureWindow | np.ndarray, a_hat) -> ReplicaPrediction:
        vals = window.values if isinstance(window, FeatureWindow) else np.asarray(window)
        if vals.shape != (self.config.n, self.config.channels, self.config.tau):
            raise ValueError(
                f"window shape {vals.shape} does not match config "
                f"({self.config.n}, {self.config.channels}, {self.config.tau})"
            )
        with tc.no_grad():
            z = self.forward_t(vals[None], tc.Tensor(np.asarray(a_hat, dtype=np.float64))).data[0]
        return ReplicaPrediction(self.unscale(z))

    def predict_batch(self, x: np.ndarray, a_hat, batch_size: int = 256) -> np.ndarray:
        """Normalised predictions for many windows, no tape kept."""
        a = tc.Tensor(np.asarray(getattr(a_hat, "data", a_hat), dtype=np.float64))
        with tc.no_grad():
            outs = [self.forward_t(x[i : i + batch_size], a).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.empty((0, self.config.n))

    def unscale(self, z):
        return self.normalizer.unscale_replicas(z) if self.normalizer is not None else np.asarray(z)

    def copy_state(self) -> dict[str, np.ndarray]:
        return tc.state_dict(self.params)

    def load_state(self, state) -> None:
        tc.load_state_dict(self.params, state)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {
            "estimator_config": asdict(self.config),
            "normalizer": self.normalizer.to_dict() if self.normalizer else None,
            "channel_names": list(self.channel_names),
        }
        meta.update(extra or {})
        tc.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> tuple["STEstimator", dict]:
        state, extra = tc.read_checkpoint(path)
        cfg = EstimatorConfig(**extra["estimator_config"])
        model = cls(cfg)
        model.load_state(state)
        if extra.get("normalizer"):
            model.normalizer = Normalizer.from_dict(extra["normalizer"])
        model.channel_names = list(extra.get("channel_names", []))
        return model, extra


def init_params(cfg: EstimatorConfig) -> dict[str, Parameter]:
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, Parameter] = {}
    c_in = cfg.channels
    T, N, K = cfg.tau, cfg.n, cfg.cheb_order
    for b in range(cfg.blocks):
        pre = f"block{b}."
        p[pre + "Ve"] = Parameter(rng.normal(0, 1 / np.sqrt(T), (T, T)), pre + "Ve")
        p[pre + "be"] = Parameter(np.zeros((T, T)), pre + "be")
        p[pre + "U1"] = Parameter(rng.normal(0, 1 / np.sqrt(N), N), pre + "U1")
        p[pre + "U2"] = Parameter(rng.normal(0, 1 / np.sqrt(c_in * N), (c_in, N)), pre + "U2")
        p[pre + "U3"] = Parameter(rng.normal(0, 1 / np.sqrt(c_in), c_in), pre + "U3")
        p[pre + "theta"] = Parameter(
            rng.normal(0, np.sqrt(2.0 / (K * c_in)), (K, c_in, cfg.hidden)), pre + "theta"
        )
        p[pre + "gamma"] = Parameter(np.ones(cfg.hidden), pre + "gamma")
        p[pre + "beta"] = Parameter(np.zeros(cfg.hidden), pre + "beta")
        c_in = cfg.hidden
    if cfg.global_head:
        p["head.w"] = Parameter(np.zeros((N * cfg.hidden * T, N)), "head.w")
    else:
        p["head.w"] = Parameter(np.zeros((cfg.hidden, T)), "head.w")
    p["head.b"] = Parameter(np.zeros(N), "head.b")
    return p


# ---------------------------------------------------------------- training

@dataclass
class TrainStats:
    losses: list[float]

    @property
    def final(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train(
    model: STEstimator,
    x: np.ndarray,
    y: np.ndarray,
    a_hat,
    epochs: int = 50,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    params: list[Parameter] | None = None,
    loss_fn=None,
) -> TrainStats:
    """Mini-batch Adam on the L1 loss in normalised units.  Rows are visited in a seeded order."""
    params = list(model.params.values()) if params is None else params
    opt = tc.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    a = tc.as_tensor(a_hat) if not callable(a_hat) else None
    losses = []
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            graph = a_hat() if a is None else a
            pred = model.forward_t(x[idx], graph)
            loss = l1_loss(pred, y[idx]) if loss_fn is None else loss_fn(pred, y[idx], graph)
            for q in model.params.values():
                q.zero_grad()
            tc.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
    return TrainStats(losses)


def evaluate(model: STEstimator, x: np.ndarray, y: np.ndarray, a_hat) -> float:
    """Mean L1 loss (normalised units) without building a tape."""
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    pred = model.predict_batch(x, a_hat)
    return float(np.mean(np.abs(pred - y)))
