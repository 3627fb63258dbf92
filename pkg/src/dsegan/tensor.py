"""Dense float tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a node to the active :class:`Tape`. Backward
replays the tape in reverse. The vector-Jacobian products are themselves
written with tensor ops, so running backward with ``create_graph=True``
records a differentiable gradient graph (needed for gradient penalties).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class ShapeError(ValueError):
    pass


class Node:
    """One recorded op: inputs, output and the vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp", "tape", "index")

    def __init__(self, op, inputs, output, vjp, tape, index):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Node({self.op!r}, index={self.index})"


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def clear(self):
        for n in self.nodes:
            n.inputs = ()
            n.vjp = None
            n.output = None
            n.index = -1
        self.nodes = []


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tapes = [Tape()]
        self.kinks = None


_state = _State()


def current_tape() -> Tape:
    return _state.tapes[-1]


@contextmanager
def tape_scope() -> Iterator[Tape]:
    """Record into a fresh tape for the duration of the block, then drop it."""
    tape = Tape()
    _state.tapes.append(tape)
    try:
        yield tape
    finally:
        _state.tapes.pop()
        tape.clear()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def default_dtype():
    return _state.dtype


@contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block (float64 for gradient checks)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def kink_monitor() -> Iterator[list]:
    """Collect the active-branch pattern of every piecewise op evaluated in the block."""
    prev = _state.kinks
    log: list = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _log_kink(op: str, mask: np.ndarray):
    if _state.kinks is not None:
        _state.kinks.append((op, mask.shape, np.packbits(mask).tobytes()))


@contextmanager
def frozen(tensors: Iterable["Tensor"]):
    """Temporarily stop gradient tracking for ``tensors``."""
    tensors = [t for t in tensors if t.requires_grad]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t in tensors:
            t.requires_grad = True


def _check_finite(op: str, data: np.ndarray):
    # the fast sum test can only false-alarm on overflow, so confirm with the full scan
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(op)


class Tensor:
    """Row-major float tensor, optionally tracked for differentiation.

    Parameters are the one mutable kind of tensor: optimizers replace their
    ``data`` between steps. Everything else is produced by ops.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_state.dtype)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._node: Node | None = None

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    def __len__(self):
        return self.shape[0]

    def backward(self, grad_output=None, create_graph: bool = False, retain_graph: bool | None = None):
        backward(self, grad_output, create_graph=create_graph, retain_graph=retain_graph)

    # operators
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)
    def swapaxes(self, i, j): return swapaxes(self, i, j)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sqrt(self): return sqrt(self)
    def relu(self): return relu(self)


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _state.dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    if not isinstance(b, Tensor):
        b = _const(b, a)
    return a, b


def _make(op: str, data, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    data = np.asarray(data)
    _check_finite(op, data)
    out = Tensor._wrap(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _state.tapes[-1]
        node = Node(op, inputs, out, vjp, tape, len(tape.nodes))
        tape.nodes.append(node)
        out._node = node
    return out


# ---------------------------------------------------------------- backward

def _run_backward(root: Tensor, seed: Tensor, create_graph: bool) -> dict[int, tuple[Tensor, Tensor]]:
    grads: dict[int, tuple[Tensor, Tensor]] = {id(root): (root, seed)}
    node = root._node
    if node is None:
        return grads
    if node.index < 0:
        raise RuntimeError("graph has already been freed; pass retain_graph=True to backward twice")
    nodes = node.tape.nodes[: node.index + 1]
    with _grad_mode(create_graph):
        for n in reversed(nodes):
            entry = grads.get(id(n.output))
            if entry is None:
                continue
            in_grads = n.vjp(entry[1])
            for inp, g in zip(n.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise ShapeError(f"gradient shape {g.shape} != input shape {inp.shape} in '{n.op}'")
                prev = grads.get(id(inp))
                grads[id(inp)] = (inp, g if prev is None else add(prev[1], g))
    return grads


def _seed(root: Tensor, grad_output) -> Tensor:
    if grad_output is None:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar output or grad_output, got shape {root.shape}")
        return Tensor._wrap(np.ones_like(root.data))
    g = _const(grad_output, root)
    if g.shape != root.shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {root.shape}")
    return g


def backward(root: Tensor, grad_output=None, create_graph: bool = False, retain_graph: bool | None = None):
    """Populate ``.grad`` (accumulating) on every requires-grad tensor reachable from ``root``."""
    if not root.requires_grad:
        raise RuntimeError("backward on a tensor that does not require grad")
    grads = _run_backward(root, _seed(root, grad_output), create_graph)
    for t, g in grads.values():
        if not t.requires_grad:
            continue
        if not create_graph:
            g = g.detach()
        t.grad = g if t.grad is None else (add(t.grad, g) if create_graph else Tensor._wrap(t.grad.data + g.data))
    if retain_graph is None:
        retain_graph = create_graph
    if not retain_graph and root._node is not None:
        root._node.tape.clear()


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None, create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``; keeps the graph."""
    if not output.requires_grad:
        return [Tensor._wrap(np.zeros_like(t.data)) for t in inputs]
    grads = _run_backward(output, _seed(output, grad_output), create_graph)
    result = []
    for t in inputs:
        entry = grads.get(id(t))
        if entry is None:
            result.append(Tensor._wrap(np.zeros_like(t.data)))
        else:
            result.append(entry[1] if create_graph else entry[1].detach())
    return result


# ---------------------------------------------------------------- shape helpers

def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return sum_to(g, shape)


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum over broadcast axes so the result has ``shape`` (adjoint of broadcasting)."""
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot sum {a.shape} to {shape}")
    axes = list(range(lead)) + [lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1]
    data = a.data.sum(axis=tuple(axes), keepdims=True) if axes else a.data
    data = data.reshape(shape)

    def vjp(g):
        return (broadcast_to(g, a.shape),)

    return _make("sum_to", data, (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def vjp(g):
        return (_sum_to(g, a.shape),)

    return _make("broadcast_to", data, (a,), vjp)


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _sum_to(g, a.shape), (_sum_to(-g, b.shape) if b.requires_grad else None)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = _sum_to(g * b, a.shape) if a.requires_grad else None
        gb = _sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), vjp)


hadamard = mul


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")

    def vjp(g):
        ga = _sum_to(g / b, a.shape) if a.requires_grad else None
        gb = _sum_to(-(g * a) / (b * b), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, s)


def exp(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * out,)

    with np.errstate(over="ignore"):  # _make raises NonFiniteError instead
        data = np.exp(a.data)
    out = _make("exp", data, (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (g / a,)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * (1.0 - out * out),)

    out = _make("tanh", np.tanh(a.data), (a,), vjp)
    return out


def sqrt(a: Tensor) -> Tensor:
    def vjp(g):
        return (g / (out * 2.0),)

    out = _make("sqrt", np.sqrt(a.data), (a,), vjp)
    return out


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g):
        if p == 1.0:
            return (g,)
        return (g * (power(a, p - 1.0) * p),)

    return _make("power", a.data ** p, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_kink("relu", mask)
    m = Tensor._wrap(mask.astype(a.data.dtype))

    def vjp(g):
        return (g * m,)

    return _make("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    _log_kink("leaky_relu", mask)
    f = Tensor._wrap(np.where(mask, 1.0, slope).astype(a.data.dtype))

    def vjp(g):
        return (g * f,)

    return _make("leaky_relu", a.data * f.data, (a,), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    _log_kink("clamp", inside)
    m = Tensor._wrap(inside.astype(a.data.dtype))

    def vjp(g):
        return (g * m,)

    return _make("clamp", np.clip(a.data, lo, hi), (a,), vjp)


def relu_clip(a: Tensor, alpha) -> Tensor:
    """``max(0, alpha * tanh(a))``; a negative ``alpha`` is treated as 0 so the output stays in [0, alpha]."""
    if isinstance(alpha, Tensor):
        alpha = relu(alpha)
    else:
        alpha = max(float(alpha), 0.0)
    return relu(tanh(a) * alpha)


def gelu(a: Tensor) -> Tensor:
    c = float(np.sqrt(2.0 / np.pi))
    inner = (a + power(a, 3.0) * 0.044715) * c
    return a * (tanh(inner) + 1.0) * 0.5


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def l2norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the subgradient at 0 is 0."""
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    data = np.sqrt((a.data * a.data).sum(axis=axes))

    def vjp(g):
        safe = out + Tensor._wrap((out.data == 0).astype(out.data.dtype))
        return (a * reshape(g / safe, kept_shape),)

    out = _make("l2norm", data, (a,), vjp)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - sum_(g * out, axis, keepdims=True)),)

    out = _make("softmax", data, (a,), vjp)
    return out


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = Tensor._wrap(a.data.max(axis=axis, keepdims=True))
    out = log(sum_(exp(a - m), axis, keepdims=True)) + m
    if not keepdims:
        out = reshape(out, tuple(n for i, n in enumerate(a.shape) if i != axis % a.ndim))
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis, keepdims=True)


# ---------------------------------------------------------------- layout

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    if data.shape == a.shape:
        return a

    def vjp(g):
        return (reshape(g, a.shape),)

    return _make("reshape", data, (a,), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inverse),)

    return _make("transpose", a.data.transpose(axes), (a,), vjp)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in keys)


def getitem(a: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data
    data = a.data[key]

    def vjp(g):
        return (scatter(g, key, a.shape),)

    return _make("getitem", data, (a,), vjp)


def scatter(a: Tensor, key, shape) -> Tensor:
    """Zeros of ``shape`` with ``a`` summed into ``[key]`` (adjoint of indexing)."""
    data = np.zeros(shape, dtype=a.data.dtype)
    if _is_basic_index(key):
        data[key] = a.data
    else:
        np.add.at(data, key, a.data)

    def vjp(g):
        return (getitem(g, key),)

    return _make("scatter", data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    axis = axis % tensors[0].ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make("concat", data, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    nd = tensors[0].ndim + 1
    axis = axis % nd
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from None
    k, n = b.shape[-2], b.shape[-1]

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = matmul(swapaxes(reshape(a, (-1, k)), 0, 1), reshape(g, (-1, n)))
            else:
                gb = _sum_to(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", data, (a, b), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None) -> Tensor:
    """``softmax(q kᵀ) v`` over the last axis; dot products are unscaled unless ``scale`` is given."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    logits = matmul(q, swapaxes(k, -1, -2))
    if scale is not None:
        logits = logits * scale
    return matmul(softmax(logits, -1), v)


# ---------------------------------------------------------------- image ops (NHWC)

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Patches of an NHWC batch as ``[B, Ho, Wo, k*k*C]`` (kernel-row, kernel-col, channel order)."""
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NHWC input, got {x.shape}")
    B, H, W, C = x.shape
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"im2col: kernel {k} too large for {H}x{W} input")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    data = cols.reshape(B, Ho, Wo, k * k * C)

    def vjp(g):
        return (col2im(g, x.shape, k, stride, pad),)

    return _make("im2col", data, (x,), vjp)


def col2im(cols: Tensor, shape, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back onto an NHWC image."""
    B, H, W, C = shape
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    c = cols.data.reshape(B, Ho, Wo, k, k, C)
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.data.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += c[:, :, :, i, j, :]
    data = xp[:, pad : pad + H, pad : pad + W, :] if pad else xp

    def vjp(g):
        return (im2col(g, k, stride, pad),)

    return _make("col2im", np.ascontiguousarray(data), (cols,), vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution; ``weight`` is ``[k, k, C_in, C_out]``."""
    k = weight.shape[0]
    if x.shape[-1] != weight.shape[2]:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, weight expects {weight.shape[2]}")
    cols = im2col(x, k, stride, pad)
    out = matmul(cols, reshape(weight, (-1, weight.shape[-1])))
    return out + bias if bias is not None else out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an NHWC batch by an integer factor."""
    if factor == 1:
        return x
    B, H, W, C = x.shape
    big = broadcast_to(reshape(x, (B, H, 1, W, 1, C)), (B, H, factor, W, factor, C))
    return reshape(big, (B, H * factor, W * factor, C))


# ---------------------------------------------------------------- serialization

def tensor_to_bytes(t: Tensor) -> bytes:
    """Little-endian: rank (u32), extents (u32 each), float32 payload row-major."""
    shape = t.shape
    header = np.array([len(shape), *shape], dtype="<u4").tobytes()
    return header + np.ascontiguousarray(t.data, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns it and the offset just past it."""
    (rank,) = np.frombuffer(buf, dtype="<u4", count=1, offset=offset)
    offset += 4
    shape = tuple(int(n) for n in np.frombuffer(buf, dtype="<u4", count=int(rank), offset=offset))
    offset += 4 * int(rank)
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    offset += 4 * count
    with precision(np.float32):
        t = Tensor(data)
    return t, offset
