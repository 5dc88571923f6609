"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only NumPy array.  Operations executed while a
:class:`GradTape` is active (and that touch at least one tensor with
``requires_grad=True``) are recorded on that tape; :func:`backward` then walks
the tape in reverse execution order, which is a reverse topological order of
the recorded graph.  Outside a tape nothing is recorded, so inference pays no
bookkeeping cost.

Every :func:`matmul` adds ``2*m*k*n`` per batch element to all active
:class:`FlopMeter` instances.  No other operation is metered.
"""

from __future__ import annotations

import math
import threading
import weakref
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_local = threading.local()

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _stack(name: str) -> list:
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


class Tensor:
    """Row-major float32/float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        view = arr.view()
        view.flags.writeable = False
        self.data = view
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    # ``output`` is a weak reference: a strong one would form a tensor <-> node
    # cycle per op and keep whole graphs alive until the cyclic collector runs.
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op, inputs, output, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class GradTape:
    """Ordered record of executed primitives, consumed by one :func:`backward`.

    Use as a context manager; tapes nest, and operations record onto the
    innermost active tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, tape=self)


def _active_tape() -> GradTape | None:
    tapes = _stack("tapes")
    return tapes[-1] if tapes else None


def backward(loss: Tensor, tape: GradTape | None = None) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires grad.

    Returns a mapping from leaf tensor to its gradient.  A tape can be
    differentiated once; a second call without a new forward pass raises
    :class:`ContractError`.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("backward: loss was not produced on a gradient tape")
    if tape is None:
        tape = loss._node.tape
    elif loss._node.tape is not tape:
        raise ContractError("backward: loss was recorded on a different tape")
    if tape.consumed:
        raise ContractError("backward: tape already consumed; run a new forward pass")
    if not tape.nodes:
        raise ContractError("backward: tape is empty")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        output = node.output()
        if output is None:
            continue
        g = grads.pop(id(output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._node is None:
                leaves[key] = inp
    # a consumed tape is never replayed; dropping its nodes frees the graph
    tape.nodes = []
    out = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        out[leaf] = g
    return out


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise ContractError("tape already consumed; open a new GradTape")
        out = Tensor(data, requires_grad=True)
        node = _Node(op, inputs, weakref.ref(out), backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
        return out
    return Tensor(data)


class FlopMeter:
    """Accumulates matmul FLOPs (2 per multiply-add) while active."""

    def __init__(self):
        self.flops = 0


@contextmanager
def flop_meter() -> Iterator[FlopMeter]:
    meter = FlopMeter()
    meters = _stack("meters")
    meters.append(meter)
    try:
        yield meter
    finally:
        meters.remove(meter)


def _count_flops(n: int) -> None:
    for meter in _stack("meters"):
        meter.flops += n


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.dtype != b.dtype:
        raise ContractError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _leading_broadcast(a_shape, b_shape, op: str) -> bool:
    """True when ``b`` broadcasts over the leading axes of ``a`` (bias add)."""
    if a_shape == b_shape:
        return False
    nb = len(b_shape)
    if nb <= len(a_shape) and tuple(a_shape[len(a_shape) - nb:]) == tuple(b_shape):
        return True
    raise ShapeError(f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} do not conform")


def _sum_leading(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# ----------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; a 2-D ``b`` is shared across ``a``'s batch."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    k, n = b.shape[-2], b.shape[-1]
    if b.ndim == 2:
        rows = math.prod(a.shape[:-1])
        out = (a.data.reshape(rows, k) @ b.data).reshape(a.shape[:-1] + (n,))
        _count_flops(2 * rows * k * n)
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ: {a.shape} x {b.shape}")
        out = np.matmul(a.data, b.data)
        _count_flops(2 * math.prod(a.shape[:-2]) * a.shape[-2] * k * n)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result("matmul", out, (a, b), bw)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over the leading axes of ``a``."""
    a, b = _pair(a, b)
    if b.ndim > a.ndim:
        a, b = b, a
    bcast = _leading_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def bw(g):
        return g, (_sum_leading(g, b.shape) if bcast else g)

    return _result("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    bcast = _leading_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data

    def bw(g):
        return g, -(_sum_leading(g, b.shape) if bcast else g)

    return _result("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; a Python scalar or a trailing-axes tensor broadcasts."""
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, float(b)) if isinstance(a, Tensor) else (b, float(a))
        return _result("scale", t.data * t.dtype.type(c), (t,), lambda g: (g * c,))
    a, b = _pair(a, b)
    if b.ndim > a.ndim:
        a, b = b, a
    bcast = _leading_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            gb = _sum_leading(gb, b.shape) if bcast else gb
        return ga, gb

    return _result("mul", out, (a, b), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[i] for i in axes)
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _result("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    dtype = tensors[0].dtype
    if any(t.dtype != dtype for t in tensors):
        raise ContractError("concat: dtype mismatch")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tensors, bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select ``indices`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take: indices must be 1-D")
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        gs = np.moveaxis(g, axis, 0)
        if np.unique(idx).size == idx.size:
            gm[idx] += gs
        else:
            for j, src in enumerate(idx):
                gm[src] += gs[j]
        return (gx,)

    return _result("take", out, (x,), bw)


def broadcast_leading(x: Tensor, leading: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading axes of sizes ``leading``."""
    shape = tuple(leading) + x.shape
    out = np.broadcast_to(x.data, shape)
    return _result("broadcast", out, (x,), lambda g: (_sum_leading(g, x.shape),))


def gather_time(x: Tensor, dt: int, axis: int = 0) -> Tensor:
    """Frame ``t`` of the output is frame ``clip(t + dt, 0, T - 1)`` of ``x``."""
    if dt == 0:
        return x
    frames = x.shape[axis]
    idx = np.clip(np.arange(frames) + int(dt), 0, frames - 1)
    return take(x, idx, axis=axis)


def softmax_last_axis(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax: last axis is empty")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: input contains NaN or Inf")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        gy = g * y
        return (gy - y * gy.sum(axis=-1, keepdims=True),)

    return _result("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: width {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _result("layer_norm", out, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    cdf = erf(x.data * _SQRT_HALF)
    cdf += 1.0
    cdf *= 0.5
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result("gelu", out, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``logits[B, C]`` against integer ``labels[B]``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    batch, classes = logits.shape
    target = np.full((batch, classes), label_smoothing / classes, dtype=logits.dtype)
    target[np.arange(batch), labels] += 1.0 - label_smoothing
    logp = log_softmax(logits)
    return mul(sum_(mul(logp, Tensor(target))), -1.0 / batch)


class SeededRng:
    """Counter-based (Philox) generator; the same seed yields the same stream everywhere."""

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(keys))

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
