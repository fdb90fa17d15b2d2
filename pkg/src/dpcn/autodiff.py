"""Dense numpy-backed tensors with reverse-mode differentiation.

Every primitive below records its inputs and a backward rule on the output
tensor when gradients are enabled and at least one input requires them.
``backward`` walks that graph in reverse topological order.

Broadcasting rules:
  * elementwise ops (add, sub, mul, div) follow numpy broadcasting; the
    backward pass sums gradients over broadcast axes.
  * matmul contracts two rank-2 tensors, (m, k) @ (k, n) -> (m, n).
  * sum/mean reduce over the given axes (all axes by default).
  * concat requires equal sizes on every axis except the concat axis.
"""

from __future__ import annotations

import contextlib
import logging

import numpy as np

from .errors import NumericError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and np.issubdtype(data.dtype, np.floating):
        return data
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """A node in the computation graph: data plus an optional backward rule."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self.op = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> Tape:
        return backward(self)

    def _lift(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` always exists and matches ``data``."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradient flow into ``params``."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _result(data, parents, grad_fn, op) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "div")
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (a,),
                   lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---- reductions and contractions --------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(out, (a,), grad_fn, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                d1 != d2 for i, (d1, d2) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn, "concat")


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for ``np.pad``."""
    pad_width = [tuple(p) for p in pad_width]
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad: {len(pad_width)} pad pairs for tensor of shape {a.shape}")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _result(np.pad(a.data, pad_width), (a,), lambda g: (g[index],), "pad")


def getitem(a: Tensor, index) -> Tensor:
    """Slicing and integer-array gathering."""
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), grad_fn, "slice")


# ---- convolution support -----------------------------------------------------

def _out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def im2col(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """(N, C, H, W) -> (N*OH*OW, C*k*k) patch matrix, rows in (n, oh, ow) order."""
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"im2col: kernel {kernel} does not fit input {x.shape} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kernel, stride)[:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)

    def grad_fn(g):
        g6 = g.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, :, :, i, j]
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return _result(np.ascontiguousarray(cols), (x,), grad_fn, "im2col")


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = _windows(xp, kernel, stride)[:, :, :oh, :ow].reshape(n, c, oh, ow, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * (arg == idx)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return _result(out, (x,), grad_fn, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the window size."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = _windows(xp, kernel, stride)[:, :, :oh, :ow].mean(axis=(-2, -1))
    area = kernel * kernel

    def grad_fn(g):
        dxp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g / area
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return _result(out, (x,), grad_fn, "avg_pool2d")


# ---- backward ----------------------------------------------------------------

class Tape:
    """Topologically ordered list of graph nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    tape = Tape.from_root(root)
    if not root.requires_grad:
        return tape
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return tape


# ---- finite-difference oracle -------------------------------------------------

def grad_check(loss_fn, params, eps: float = 1e-5, max_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is |a - n| / max(1, |a|, |n|). At most ``max_coords``
    coordinates are sampled from each parameter.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: non-finite loss at the unperturbed point")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, None
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"grad_check: parameter {p.name} is not contiguous")
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                plus = float(loss_fn().data)
                flat[i] = orig - eps
                minus = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {p.name or 'parameter'}[{i}]")
            numeric = (plus - minus) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst, worst_name = err, p.name
    logger.debug("grad_check: max relative error %.3e at %s", worst, worst_name)
    return worst
