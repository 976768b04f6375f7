"""Dense float64 tensors with reverse-mode gradients.

Graphs are built by calling the op functions in this module (define-by-run).
A "graph description" is any callable ``graph(params, *inputs)`` returning a
scalar loss tensor, or a tuple whose first element is the scalar loss.
"""
from __future__ import annotations

import contextlib
import hashlib
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the backward tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)

    def bw(g):
        _acc(a, g / b.data)
        _acc(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: _acc(a, g * c))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]; also accepts a batched bias b[B, n] against x[B, ..., n]."""
    if b.data.ndim == 1:
        if x.shape[-1] != b.shape[0]:
            raise ShapeError(f"add_bias: {x.shape} vs bias {b.shape}")
        bd = b.data
        axes = tuple(range(x.data.ndim - 1))

        def bw(g):
            _acc(x, g)
            _acc(b, g.sum(axis=axes))
    else:
        if b.data.ndim != 2 or x.shape[0] != b.shape[0] or x.shape[-1] != b.shape[1]:
            raise ShapeError(f"add_bias: {x.shape} vs batched bias {b.shape}")
        bd = b.data.reshape((b.shape[0],) + (1,) * (x.data.ndim - 2) + (b.shape[1],))
        axes = tuple(range(1, x.data.ndim - 1))

        def bw(g):
            _acc(x, g)
            _acc(b, g.sum(axis=axes) if axes else g)

    return _make(x.data + bd, (x, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: _acc(x, g * out * (1.0 - out)))


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _acc(x, g * (1.0 - out * out)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: _acc(x, g * pos))


def softplus_np(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def softplus(x: Tensor) -> Tensor:
    return _make(softplus_np(x.data), (x,), lambda g: _acc(x, g * _stable_sigmoid(x.data)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _acc(x, g * out))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(x.data), (x,), lambda g: _acc(x, g / x.data))


def bce_with_logits(logits: Tensor, y) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against labels y."""
    yd = np.asarray(y, dtype=np.float64)
    if yd.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs labels {yd.shape}")
    z = logits.data
    out = softplus_np(z) - yd * z
    return _make(out, (logits,), lambda g: _acc(logits, g * (_stable_sigmoid(z) - yd)))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal leading batch size."""
    ad, bd = a.data, b.data
    ok = (ad.ndim == 2 and bd.ndim == 2) or (ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0])
    if not ok or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            _acc(b, np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., i] @ w[i, o] (+ b[o])."""
    if x.data.ndim > 2:
        lead = x.shape[:-1]
        out = reshape(matmul(reshape(x, (-1, x.shape[-1])), w), lead + (w.shape[-1],))
        return out if b is None else add_bias(out, b)
    out = matmul(x, w)
    return out if b is None else add_bias(out, b)


def embedding(table: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def bw(g):
        if table.requires_grad:
            v, n = table.shape
            flat = (idx.reshape(-1, 1) * n + np.arange(n)).ravel()
            full = np.bincount(flat, weights=g.reshape(-1), minlength=v * n).reshape(v, n)
            _acc(table, full)

    return _make(table.data[idx], (table,), bw)


def mean_pool(x: Tensor, mask, weights: Tensor | None = None) -> Tensor:
    """Masked (optionally weighted) mean over axis 1 of x[B, L, N].

    Returns sum_l w_l m_l x_l / sum_l m_l, so the weights act as gates rather
    than a normalized attention distribution.
    """
    m = np.asarray(mask, dtype=np.float64)
    if x.data.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError(f"mean_pool: x {x.shape} vs mask {m.shape}")
    if weights is not None and weights.shape != m.shape:
        raise ShapeError(f"mean_pool: weights {weights.shape} vs mask {m.shape}")
    denom = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    coef = m / denom
    if weights is not None:
        coef_w = coef * weights.data
    else:
        coef_w = coef
    out = np.einsum("bl,bln->bn", coef_w, x.data)
    parents = (x,) if weights is None else (x, weights)

    def bw(g):
        if x.requires_grad:
            _acc(x, coef_w[:, :, None] * g[:, None, :])
        if weights is not None and weights.requires_grad:
            _acc(weights, coef * np.einsum("bln,bn->bl", x.data, g))

    return _make(out, parents, bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ax = axis % parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != parts[0].data.ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(p.data.ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=ax)):
            _acc(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _acc(x, full)

    return _make(x.data[..., start:stop], (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from None
    return _make(out, (x,), lambda g: _acc(x, g.reshape(x.shape)))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: _acc(x, np.full(x.shape, float(g))))
    ax = axis % x.data.ndim
    return _make(x.data.sum(axis=ax), (x,), lambda g: _acc(x, np.broadcast_to(np.expand_dims(g, ax), x.shape)))


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def take_step(x: Tensor, t: int) -> Tensor:
    """x[B, L, M] -> x[:, t, :]."""
    if x.data.ndim != 3 or not -x.shape[1] <= t < x.shape[1]:
        raise ShapeError(f"take_step: step {t} out of range for {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, t, :] = g
        _acc(x, full)

    return _make(x.data[:, t, :], (x,), bw)


def repeat_last(x: Tensor, n: int) -> Tensor:
    """x[..., 1] -> x[..., n] by copying the single trailing entry."""
    if x.shape[-1] != 1:
        raise ShapeError(f"repeat_last: trailing dim must be 1, got {x.shape}")
    return _make(np.repeat(x.data, n, axis=-1), (x,), lambda g: _acc(x, g.sum(axis=-1, keepdims=True)))


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named float64 parameters with paired gradient accumulators."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64, copy=True)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self.params if k.startswith(prefix))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def bind(self, trainable: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Leaf tensors for a forward pass; only ``trainable`` names record gradients."""
        train = set(self.params) if trainable is None else set(trainable)
        return {k: Tensor(v, requires_grad=k in train and _GRAD_ENABLED, name=k) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(self.params)

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k: v for k, v in self.params.items() if k.startswith(prefix)})

    def update(self, other: "ParamStore") -> None:
        for k, v in other.params.items():
            self.add(k, v)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            v = self.params[k]
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def grad_norm(self, prefix: str = "") -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for k, g in self.grads.items() if k.startswith(prefix))))


def forward_backward(graph, inputs: Sequence, params: ParamStore, trainable: Iterable[str] | None = None):
    """Evaluate ``graph`` and accumulate d(loss)/d(param) into ``params.grads``.

    Returns the graph outputs as a tuple; the first one is the scalar loss.
    """
    bound = params.bind(trainable)
    out = graph(bound, *inputs)
    outs = out if isinstance(out, tuple) else (out,)
    loss = outs[0]
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ShapeError(f"forward_backward: loss must be a scalar tensor, got shape {shape}")
    if loss.requires_grad:
        loss.backward()
    for k, t in bound.items():
        if t.grad is not None:
            params.grads[k] += t.grad
    for t in outs:
        if isinstance(t, Tensor) and not np.all(np.isfinite(t.data)):
            raise FloatingPointError("forward_backward: non-finite output")
    return outs


def loss_value(graph, inputs: Sequence, params: ParamStore) -> float:
    with no_grad():
        out = graph(params.bind(()), *inputs)
    loss = out[0] if isinstance(out, tuple) else out
    return float(loss.data)


def grad_check(graph, params: ParamStore, epsilon: float = 1e-5, inputs: Sequence = (),
               names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error of each entry is |a - n| / max(|a|, |n|, 1e-6). The
    floor sits well above central-difference round-off (about 1e-11 for O(1)
    losses at epsilon=1e-5), so entries with vanishing gradients do not
    report pure noise as error.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("grad_check: epsilon must lie in (0, 1e-2]")
    names = list(params.names()) if names is None else list(names)
    work = params.copy()
    work.zero_grad()
    forward_backward(graph, inputs, work, trainable=names)
    worst = 0.0
    for k in names:
        p = work.params[k]
        analytic = work.grads[k].copy()
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_value(graph, inputs, work)
            flat[i] = orig - epsilon
            down = loss_value(graph, inputs, work)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
    return worst


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded, splittable generator (PCG64 under numpy's SeedSequence)."""

    def __init__(self, seed: int | Sequence[int]):
        self.seed = seed
        self._ss = np.random.SeedSequence(seed)
        self.gen = np.random.Generator(np.random.PCG64(self._ss))

    def child(self, *key: int) -> "Rng":
        """Independent stream keyed by integers; does not advance this generator."""
        base = list(self.seed) if isinstance(self.seed, (list, tuple)) else [int(self.seed)]
        return Rng(base + [int(k) for k in key])

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def random(self, shape=None):
        return self.gen.random(shape)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)


def sample_gaussian(mu: Tensor, sigma: Tensor, rng: Rng) -> Tensor:
    """Reparameterized draw mu + sigma * eps with eps ~ N(0, I)."""
    _same_shape("sample_gaussian", mu, sigma)
    if np.any(sigma.data < 0):
        raise ValueError("sample_gaussian: negative sigma entry")
    eps = Tensor(rng.normal(mu.shape))
    return add(mu, mul(sigma, eps))


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, params: ParamStore, lr: float = 1e-3):
        self.params = params
        self.lr = lr

    def step(self, names: Iterable[str]) -> None:
        for k in names:
            self.params.params[k] -= self.lr * self.params.grads[k]


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, names: Iterable[str]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in names:
            g = self.params.grads[k]
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: ParamStore, lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "IDEAL-CHECKPOINT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ParamStore, path: str | Path) -> None:
    """Write a text checkpoint.

    Layout: line 1 ``IDEAL-CHECKPOINT <version>``, line 2 the parameter count,
    then one line per parameter sorted by name:
    ``name<TAB>d0,d1,...<TAB>v0 v1 ...`` with values in row-major order as
    ``repr`` floats (exact round trip). A scalar has an empty shape field.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", str(len(params.params))]
    for k in sorted(params.params):
        v = params.params[k]
        shape = ",".join(str(d) for d in v.shape)
        lines.append(f"{k}\t{shape}\t" + " ".join(repr(float(x)) for x in v.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> ParamStore:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC + " "):
        raise ValueError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    count = int(lines[1])
    store = ParamStore()
    for line in lines[2:2 + count]:
        name, shape_s, vals = line.split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        data = np.array([float(x) for x in vals.split()], dtype=np.float64) if vals else np.zeros(0)
        store.add(name, data.reshape(shape))
    if len(store.params) != count:
        raise ValueError(f"{path}: truncated checkpoint")
    return store
