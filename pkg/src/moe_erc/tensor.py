"""Dense float64 arrays with reverse-mode automatic differentiation.

A :class:`Value` wraps a numpy array, remembers the op that produced it and
accumulates ``grad`` on :meth:`Value.backward`. Every op below records a
vector-Jacobian product; composite ops (layer norm, conv, l2 normalisation)
are built from the primitives so their gradients come for free.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e30

# toggled by tests / grad checks; finite checks are cheap at desk scale
CHECK_FINITE = True
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """Array node in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self._op}{tag})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(g, self.data.shape)

    def backward(self) -> None:
        backward(self)

    # operator sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def make(data: np.ndarray, parents: Sequence[Value], vjp: Callable[[np.ndarray], Sequence], op: str) -> Value:
    """Wrap ``data`` as the output of an op.

    ``vjp`` maps the output gradient to one gradient (or ``None``) per parent.
    This is also the hook for custom ops defined outside this module.
    """
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            grads = vjp(g)
            for p, pg in zip(parents, grads):
                if pg is not None and p.requires_grad:
                    p._accumulate(pg)

        out._backward = _bw
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients are reset on each call, so two calls without
    zeroing leave exactly twice the gradient in the leaves.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data
    return make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a) -> Value:
    a = as_value(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Value:
    a = as_value(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * a.data ** (p - 1.0)
        # x**p with 0 < p < 1 has an infinite slope at 0; treat it as flat
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return make(out, (a,), vjp, "pow")


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = as_value(a)
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Value:
    a = as_value(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Value:
    a = as_value(a)
    on = a.data > 0
    return make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def clip_min(a, floor: float) -> Value:
    """max(a, floor); gradient is zero where the floor is active."""
    a = as_value(a)
    on = a.data > floor
    return make(np.where(on, a.data, floor), (a,), lambda g: (g * on,), "clip_min")


# ----------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(out, dtype=DTYPE), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


# -------------------------------------------------------------------- shaping

def reshape(a, shape) -> Value:
    a = as_value(a)
    src = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Value:
    a = as_value(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Value:
    axes = list(range(as_value(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Value:
    a = as_value(a)
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make(np.array(out, dtype=DTYPE), (a,), vjp, "getitem")


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in vals], axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(out, vals, vjp, "concat")


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    out = np.stack([v.data for v in vals], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return make(out, vals, vjp, "stack")


def pad_time(a, left: int, right: int, axis: int = -2) -> Value:
    """Zero-pad along one axis."""
    a = as_value(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (left, right)
    n = a.shape[axis]

    def vjp(g):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(left, left + n)
        return (g[tuple(sl)],)

    return make(np.pad(a.data, widths), (a,), vjp, "pad")


# --------------------------------------------------------------- linear algebra

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------- softmax family

def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), vjp, "log_softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Value:
    a = as_value(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    w = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return make(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp, "logsumexp")


# ------------------------------------------------------------------ composites

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Value:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * gain + bias


def l2_normalize(x, axis: int = -1) -> Value:
    norm = power(sum_(x * x, axis=axis, keepdims=True), 0.5)
    return x / norm


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Value:
    """Inverted dropout: identity at eval, E[out] = x at train time."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(as_value(x).shape) < keep) / keep
    return x * Value(mask)


def one_hot(labels, count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (count,), dtype=DTYPE)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def gather_last(x, labels) -> Value:
    """Pick ``x[..., labels[...]]`` along the last axis."""
    return sum_(x * Value(one_hot(labels, as_value(x).shape[-1])), axis=-1)


def conv1d_same(x, w, b) -> Value:
    """Non-causal 'same' 1-D convolution over the time axis.

    x: (..., T, D_in); w: (k, D_in, D_out); b: (D_out,). k must be odd;
    (k - 1) / 2 zeros are padded on each side so the output keeps length T.
    """
    x, w = as_value(x), as_value(w)
    k = w.shape[0]
    if k % 2 == 0:
        raise ValueError(f"conv1d_same needs an odd kernel size, got {k}")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"conv1d_same channel mismatch: {x.shape} vs {w.shape}")
    t = x.shape[-2]
    half = (k - 1) // 2
    xp = pad_time(x, half, half) if half else x
    out = None
    for j in range(k):
        window = xp[..., j:j + t, :] if half else xp
        term = window @ w[j]
        out = term if out is None else out + term
    return out + b


# ----------------------------------------------------------------- RNG / params

def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox4x64 counter-based generator, one independent stream per purpose."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


class ParameterSet:
    """Name -> trainable Value, iterated in lexicographic order."""

    def __init__(self):
        self._params: dict[str, Value] = {}

    def add(self, name: str, data: np.ndarray) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = Value(data, requires_grad=True, name=name)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Value]]:
        for n in self.names():
            yield n, self._params[n]

    def values(self) -> Iterator[Value]:
        for _, v in self.items():
            yield v

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def count(self) -> int:
        return int(sum(v.data.size for v in self._params.values()))

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: v.data.copy() for n, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"parameter mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in state.items():
            if n not in self._params:
                continue
            if arr.shape != self._params[n].shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {self._params[n].shape}")
            self._params[n].data[...] = arr


# ------------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"MSTE"
CHECKPOINT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in lexicographic name order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8", order="C")  # keeps rank 0
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * size
    return out


def global_norm(values: Iterable[Value]) -> float:
    return float(np.sqrt(sum(float(np.sum(v.grad * v.grad)) for v in values if v.grad is not None)))
