"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every primitive records one node on the thread's active :class:`Graph` when any
of its inputs requires a gradient. ``backward`` walks the tape in strict
reverse append order. Graphs are cheap and meant to be rebuilt every step::

    with tape():
        loss = mean(relu(x @ w))
        grads = backward(loss)
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericFault(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_graph", "_generation", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._graph: Graph | None = None
        self._generation = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar over the primitives
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    generation: int = 0

    def record(self, op, inputs, output, backward_fn) -> int:
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))
        output.node_id = len(self.nodes) - 1
        output._graph = self
        output._generation = self.generation
        return output.node_id

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


@contextmanager
def tape():
    """Install a fresh graph for the current thread; cleared on exit."""
    prev = getattr(_local, "graph", None)
    g = _local.graph = Graph()
    try:
        yield g
    finally:
        g.clear()
        _local.graph = prev


@contextmanager
def no_grad():
    """Build outputs without recording them, for inference passes."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray, what: str = "output") -> None:
    # a finite sum proves every entry finite; fall back to the full test otherwise
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(arr)
    if not np.isfinite(total) and not np.all(np.isfinite(arr)):
        raise NumericFault(f"{op}: non-finite {what}")


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.node_id = None
    t._graph = None
    t._generation = -1
    t.name = None
    t.requires_grad = not getattr(_local, "no_grad", False) and any(i.requires_grad for i in inputs)
    if t.requires_grad:
        current_graph().record(op, inputs, t, backward_fn)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives
# Backward rules live at module level so fault-injection tests can patch them.


def _matmul_grad(a, b, g):
    return g @ b.T, a.T @ g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), lambda g: _matmul_grad(a.data, b.data, g))


def _add_grad(sa, sb, g):
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: _add_grad(a.shape, b.shape, g))


def _sub_grad(sa, sb, g):
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: _sub_grad(a.shape, b.shape, g))


def _mul_grad(a, b, g):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: _mul_grad(a.data, b.data, g))


def _relu_grad(x, g):
    return (g * (x > 0),)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _make("relu", np.maximum(x.data, 0.0), (x,), lambda g: _relu_grad(x.data, g))


def _leaky_relu_grad(x, slope, g):
    return (g * np.where(x > 0, 1.0, slope),)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data > 0, x.data, slope * x.data)
    return _make("leaky_relu", out, (x,), lambda g: _leaky_relu_grad(x.data, slope, g))


def _softmax_grad(s, axis, g):
    return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _make("softmax", s, (x,), lambda g: _softmax_grad(s, axis, g))


def _log_grad(x, floor, g):
    if floor is None:
        return (g / x,)
    return (np.where(x > floor, g / np.maximum(x, floor), 0.0),)


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first."""
    x = as_tensor(x)
    arg = x.data if floor is None else np.maximum(x.data, floor)
    if np.any(arg <= 0):
        raise NumericFault(f"log: non-positive argument (min {arg.min()!r})")
    return _make("log", np.log(arg), (x,), lambda g: _log_grad(x.data, floor, g))


def _exp_grad(out, g):
    return (g * out,)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: _exp_grad(out, g))


def _reduce_grad(shape, axis, keepdims, scale, g):
    if axis is None:
        g = g.reshape(())
    elif not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g * scale, shape).copy(),)


def _reduce(op, x, axis, keepdims, scale, fn):
    red = np.asarray(fn(x.data, axis=axis, keepdims=keepdims), dtype=np.float64)
    out = red.reshape(red.shape or (1,))
    return _make(op, out, (x,), lambda g: _reduce_grad(x.shape, axis, keepdims, scale, g.reshape(red.shape)))


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _reduce("sum", x, axis, keepdims, 1.0, np.sum)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return _reduce("mean", x, axis, keepdims, 1.0 / count, np.mean)


def _concat_grad(sizes, axis, g):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make("concat", out, ts, lambda g: _concat_grad(sizes, axis, g))


def _reshape_grad(shape, g):
    return (g.reshape(shape),)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: _reshape_grad(x.shape, g))


def _take_rows_grad(shape, idx, g):
    gx = np.zeros(shape)
    np.add.at(gx, idx, g)
    return (gx,)


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` along axis 0."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0])):
        raise ShapeError(f"take_rows: index out of range for shape {x.shape}")
    return _make("take_rows", x.data[idx], (x,), lambda g: _take_rows_grad(x.shape, idx, g))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv2d_grad(xp, w, stride, padding, ho, wo, g):
    _, _, kh, kw = w.shape
    gx = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for p in range(kh):
        for q in range(kw):
            win = (slice(None), slice(None), slice(p, p + stride * ho, stride), slice(q, q + stride * wo, stride))
            gw[:, :, p, q] = np.einsum("nohw,nchw->oc", g, xp[win])
            gx[win] += np.einsum("nohw,oc->nchw", g, w[:, :, p, q])
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx, gw, g.sum(axis=(0, 2, 3))


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (out, in, kh, kw) kernel."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")
    xp = _pad(x.data, padding)
    o, _, kh, kw = weight.shape
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    out = np.zeros((x.shape[0], o, ho, wo))
    w = weight.data
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, p, q])
    out += bias.data[None, :, None, None]
    return _make("conv2d", out, (x, weight, bias),
                 lambda g: _conv2d_grad(xp, w, stride, padding, ho, wo, g))


def _maxpool2d_grad(shape, arg, window, stride, ho, wo, g):
    gx = np.zeros(shape)
    k = 0
    for p in range(window):
        for q in range(window):
            win = (slice(None), slice(None), slice(p, p + stride * ho, stride), slice(q, q + stride * wo, stride))
            gx[win] += g * (arg == k)
            k += 1
    return (gx,)


def maxpool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    ho = (x.shape[2] - window) // stride + 1
    wo = (x.shape[3] - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {window} larger than input {x.shape}")
    best = None
    arg = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.int64)
    k = 0
    for p in range(window):
        for q in range(window):
            v = x.data[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride]
            if best is None:
                best = v.copy()
            else:
                # strict comparison keeps the first maximal element on ties
                upd = v > best
                best = np.where(upd, v, best)
                arg = np.where(upd, k, arg)
            k += 1
    return _make("maxpool2d", best, (x,), lambda g: _maxpool2d_grad(x.shape, arg, window, stride, ho, wo, g))


BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _batchnorm_grad(xhat, inv_std, gamma, axes, g):
    n = np.prod([xhat.shape[a] for a in axes])
    ggamma = np.sum(g * xhat, axis=axes)
    gbeta = np.sum(g, axis=axes)
    gxhat = g * gamma
    gx = inv_std / n * (n * gxhat - np.sum(gxhat, axis=axes, keepdims=True)
                        - xhat * np.sum(gxhat * xhat, axis=axes, keepdims=True))
    return gx, ggamma, gbeta


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalisation over (N,) for 2-D input or (N, H, W) for NCHW.

    In training mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.data.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm: expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine shapes {gamma.shape}, {beta.shape} do not match input {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm: training mode needs batch size >= 2, got input {x.shape}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if train:
        fn = lambda g: _batchnorm_grad(xhat, inv_std.reshape(bshape), gamma.data.reshape(bshape), axes, g)  # noqa: E731
    else:
        def fn(g):
            gx = g * (gamma.data * inv_std).reshape(bshape)
            return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)
    return _make("batchnorm", out, (x, gamma, beta), fn)


def _dropout_grad(mask, g):
    return (g * mask,)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not train or p == 0.0:
        mask = np.ones_like(x.data)
    else:
        if rng is None:
            raise ValueError("dropout: training mode needs an rng stream")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make("dropout", x.data * mask, (x,), lambda g: _dropout_grad(mask, g))


PRIMITIVES = ("matmul", "add", "sub", "mul", "relu", "leaky_relu", "softmax", "log", "exp",
              "mean", "sum", "concat", "reshape", "take_rows", "conv2d", "maxpool2d", "batchnorm", "dropout")


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor.

    Returns a map from each leaf tensor that requires a gradient to its
    accumulated gradient array. Gradients add up across calls until zeroed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    seed = np.ones_like(loss.data)
    if loss.node_id is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return {loss: loss.grad}
    graph = loss._graph
    if graph is None or loss._generation != graph.generation:
        raise GraphError("backward: graph already cleared")
    pending: dict[int, np.ndarray] = {loss.node_id: seed}
    leaves: dict[Tensor, np.ndarray] = {}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = graph.nodes[nid]
        out = node.output
        out.grad = g if out.grad is None else out.grad + g
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            _check_finite(node.op, ig, "gradient")
            if inp.node_id is not None and inp._graph is graph and inp._generation == graph.generation:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = ig if prev is None else prev + ig
            else:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                leaves[inp] = inp.grad
    return leaves


# ----------------------------------------------------------------- optimizer


class SGD:
    """Plain SGD with an optional heavy-ball momentum buffer per parameter."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray | None], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"sgd_step: gradient shape {g.shape} does not match parameter {key} {p.shape}")
            if self.momentum:
                buf = self.buffers.get(key)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[key] = buf
                g = buf
            if lr:
                p.data -= lr * g


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], learning_rate: float,
             momentum: float = 0.0, state: dict | None = None) -> list[Tensor]:
    """Functional SGD step; ``state`` carries momentum buffers between calls."""
    if learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} does not match parameter {p.shape}")
        if momentum:
            if state is None:
                raise ValueError("sgd_step: momentum needs a state dict")
            buf = state.get(k)
            buf = g.copy() if buf is None else momentum * buf + g
            state[k] = buf
            g = buf
        out.append(Tensor(p.data - learning_rate * g, requires_grad=p.requires_grad))
    return out
