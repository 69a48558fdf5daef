"""Small dense-tensor autodiff engine on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  ``backward`` walks the tape
in reverse topological order.  Values are float64 throughout.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "STGSCALE-CKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.shapes = (tuple(a), tuple(b))


class NumericalInstabilityError(FloatingPointError):
    pass


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalInstabilityError(f"{op} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    # operator sugar; all route through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf.  Adam moments live on the parameter itself."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise ShapeError("assign", self.data.shape, values.shape)
        self.data = values.copy()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(op, data)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(op, a.shape, b.shape)


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unscalar(g * b.data, a), _unscalar(g * a.data, b)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0):
        raise NumericalInstabilityError("div by zero")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unscalar(g / b.data, a), _unscalar(-g * out / b.data, b)),
        "div",
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("maximum", a, b)
    pick_a = a.data >= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unscalar(g * pick_a, a), _unscalar(g * ~pick_a, b)),
        "maximum",
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def indicator(a, straight_through: bool = False) -> Tensor:
    """1 where ``a != 0`` else 0.

    The exact derivative is zero almost everywhere.  With
    ``straight_through`` the backward pass forwards the incoming gradient
    unchanged, a surrogate for training through edge counts.
    """
    a = as_tensor(a)
    out = (a.data != 0).astype(np.float64)
    if straight_through:
        return _make(out, (a,), lambda g: (g,), "indicator_ste")
    return Tensor(out)


def constant_like(a: Tensor, fill: float) -> Tensor:
    return Tensor(np.full(a.shape, fill))


# ---------------------------------------------------------------- reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof=0)."""
    a = as_tensor(a)
    mu = mean(a, axis=axis, keepdims=True)
    centered = sub(a, expand(mu, a.shape))
    return mean(mul(centered, centered), axis=axis, keepdims=keepdims)


def row_l1(a) -> Tensor:
    """Sum of absolute values along the last axis."""
    return sum(abs(a), axis=-1)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(a, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the backward sums broadcast axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("expand", a.shape, shape) from None
    lead = len(shape) - a.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), bw, "expand")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError("stack", ts[0].shape, t.shape)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw, "stack")


def diag(a) -> Tensor:
    """Vector to diagonal matrix."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError("diag", a.shape, ("n",))
    return _make(np.diag(a.data), (a,), lambda g: (np.diag(g).copy(),), "diag")


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.asarray(a.data[key]), (a,), bw, "index")


# ---------------------------------------------------------------- contractions

SMALL_CONTRACTION = 256  # elements; below this the path search costs more than it saves


def _contract(spec: str, *arrays) -> np.ndarray:
    if max(a.size for a in arrays) <= SMALL_CONTRACTION:
        return np.einsum(spec, *arrays)
    return np.einsum(spec, *arrays, optimize=True)


def einsum(spec: str, *operands) -> Tensor:
    """Two-or-more operand einsum without repeated indices inside an operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != len(ops):
        raise ValueError(f"einsum {spec!r} expects {len(subs)} operands, got {len(ops)}")
    sizes: dict[str, int] = {}
    for s, o in zip(subs, ops):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum {spec}", o.shape, tuple(s))
        for ch, n in zip(s, o.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {spec} index {ch}", (sizes[ch],), (n,))
    out = _contract(spec, *[o.data for o in ops])

    def bw(g):
        grads = []
        for i, s in enumerate(subs):
            if not ops[i].requires_grad:
                grads.append(None)
                continue
            others = [subs[j] for j in range(len(ops)) if j != i]
            present = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(ch for ch in s if ch in present)
            gspec = ",".join([out_sub] + others) + "->" + kept
            gi = _contract(gspec, g, *[ops[j].data for j in range(len(ops)) if j != i])
            if kept != s:
                # indices summed away only inside operand i: gradient is constant along them
                shape = [sizes[ch] if ch in kept else 1 for ch in s]
                gi = np.broadcast_to(gi.reshape(shape), ops[i].shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _make(np.asarray(out), tuple(ops), bw, f"einsum[{spec}]")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return einsum("ij,jk->ik", a, b)


def bmm(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    return einsum("bij,bjk->bik", a, b)


def outer(a, b) -> Tensor:
    return einsum("i,j->ij", a, b)


# ---------------------------------------------------------------- autodiff

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
        # release the tape as we go
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        g = p.grad
        _check_finite(f"adam grad {p.name}", g)
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1**p.step_count)
        v_hat = p.adam_v / (1 - beta2**p.step_count)
        p.data = _check_finite(f"adam {p.name}", p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
        p.zero_grad()


# ---------------------------------------------------------------- checkpoints

def state_dict(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def load_state_dict(params: dict[str, Parameter], state: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(state)
    if missing:
        raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")
    for name, p in params.items():
        p.assign(state[name])


def save_checkpoint(path, params: dict[str, Parameter], extra: dict | None = None) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in params.items()
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic header)")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    state = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return state, payload.get("extra", {})
