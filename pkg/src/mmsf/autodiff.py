"""Dense float64 arrays with a reverse-mode tape.

Every op builds a new :class:`Tensor` holding references to its parents and a
closure that maps the output gradient to parent gradients.  Feature maps are
batch-major ``(N, C, H, W)``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``grad_fn(g)`` must return one gradient (or None) per parent.  No tape entry
    is recorded when no parent needs a gradient.
    """
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=grad_fn)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients accumulate across calls.  Unless ``retain_graph`` is set the tape
    is dropped afterwards, so a second call on the same loss reaches only the
    loss itself.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"gradient shape {pg.shape} != tensor shape {p.shape}")
            key = id(p)
            upstream[key] = pg if key not in upstream else upstream[key] + pg
        if not retain_graph:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), grad_fn)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(np.asarray(out), (x,), grad_fn)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs,
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(x.data[index], (x,), grad_fn)


# ---------------------------------------------------------------- dense layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected layer, ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents: tuple = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, grad_fn)


# ---------------------------------------------------------------- convolution

@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv geometry {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid channel counts {self}")

    def out_size(self, n: int) -> int:
        m = (n + 2 * self.padding - self.kernel_size) // self.stride + 1
        if m < 1:
            raise ShapeError(f"input extent {n} too small for {self}")
        return m


def conv2d(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not have {spec.in_channels} channels")
    if weight.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(f"conv2d: weight {weight.shape} does not match "
                         f"({spec.out_channels}, {spec.in_channels}, {k}, {k})")
    n, c, h, w = x.shape
    ho, wo = spec.out_size(h), spec.out_size(w)
    o = spec.out_channels
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # columns laid out (c*k*k, n*ho*wo) so both products are single GEMMs
    if k == 1:
        cols = xp[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s].transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols                                # (o, n*ho*wo)
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        grads = []
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            grads.append(gxp[:, :, p : p + h, p : p + w] if p else gxp)
        else:
            grads.append(None)
        grads.append((g2 @ cols.T).reshape(weight.shape))
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return make_result(out, parents, grad_fn)


# ---------------------------------------------------------------- pooling / resampling

def _check_even(x: Tensor, what: str):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{what}: need (N, C, even H, even W), got {x.shape}")


def max_pool2x2(x: Tensor) -> Tensor:
    _check_even(x, "max_pool2x2")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), grad_fn)


def avg_pool2x2(x: Tensor) -> Tensor:
    _check_even(x, "avg_pool2x2")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return make_result(out, (x,), lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,))


def nearest_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample2x: need (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- init / optimisation

def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, name: str | None = None) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


_VELOCITY: "weakref.WeakKeyDictionary[Tensor, np.ndarray]" = weakref.WeakKeyDictionary()


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0, momentum: float = 0.0) -> None:
    """Momentum SGD with L2 decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * w)``; ``w <- w - lr * v``.
    Velocity lives alongside each parameter and persists between calls.
    """
    params = list(params)
    for prm in params:
        if prm.grad is None:
            raise ValueError(f"parameter {prm.name or prm.shape} has no gradient")
    for prm in params:
        g = prm.grad + weight_decay * prm.data if weight_decay else prm.grad
        v = _VELOCITY.get(prm)
        v = g.copy() if v is None else momentum * v + g
        _VELOCITY[prm] = v
        prm.data -= lr * v


def reset_velocity(params: Iterable[Tensor]) -> None:
    for prm in params:
        _VELOCITY.pop(prm, None)


def velocity(prm: Tensor) -> np.ndarray | None:
    return _VELOCITY.get(prm)


# Differentiable ops covered by the gradient-check suite.
REGISTERED_OPS = (
    "add", "sub", "mul", "relu", "sigmoid", "exp", "log", "softmax", "log_softmax",
    "sum", "mean", "reshape", "flatten", "transpose", "concat", "take_rows",
    "matmul", "linear", "conv2d", "max_pool2x2", "avg_pool2x2", "nearest_upsample2x",
)
