"""Dense tensors with reverse-mode differentiation.

Every backward rule is written with the same differentiable primitives as the
forward pass, so gradients computed with ``create_graph=True`` can themselves
be differentiated (needed by the gradient penalty).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_DTYPE = {"value": np.float32}
_DEBUG = {"value": False}
_local = threading.local()


def get_dtype():
    return _DTYPE["value"]


@contextlib.contextmanager
def check_mode(enabled: bool = True):
    """Switch tensor storage to float64 for gradient verification."""
    previous = _DTYPE["value"]
    _DTYPE["value"] = np.float64 if enabled else np.float32
    try:
        yield
    finally:
        _DTYPE["value"] = previous


def set_debug(enabled: bool) -> None:
    """When on, every op checks its output for NaN/Inf."""
    _DEBUG["value"] = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def set_grad_enabled(enabled: bool):
    previous = grad_enabled()
    _local.grad = enabled
    try:
        yield
    finally:
        _local.grad = previous


def no_grad():
    return set_grad_enabled(False)


BackwardFn = Callable[["Tensor", "Tensor"], Sequence["Tensor | None"]]


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
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
        if _is_scalar(other):
            return affine(self, 1.0 / float(other))
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return affine(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use slice_axis/index ops; Tensor indexing is not differentiable")


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if _DEBUG["value"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    if getattr(_local, "grad", True):
        for p in parents:
            if p.requires_grad:
                out.parents = parents
                out.backward_fn = backward_fn
                out.requires_grad = True
                break
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# shape plumbing


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape

    def backward(out, g):
        return (broadcast_to(g, src),)

    return _result(data.reshape(shape), "sum_to", (x,), backward)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape

    def backward(out, g):
        return (sum_to(g, src),)

    return _result(data, "broadcast_to", (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None

    def backward(out, g):
        return (reshape(g, src),)

    return _result(data, "reshape", (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(out, g):
        return (permute(g, inverse),)

    return _result(x.data.transpose(axes), "permute", (x,), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got shape {x.shape}")

    def backward(out, g):
        return (transpose(g),)

    return _result(np.swapaxes(x.data, -1, -2), "transpose", (x,), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_axis: range [{start}, {stop}) invalid for axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)

    def backward(out, g):
        return (pad_axis(g, axis, start, n - stop),)

    return _result(x.data[tuple(index)], "slice_axis", (x,), backward)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    stop = before + x.shape[axis]

    def backward(out, g):
        return (slice_axis(g, axis, before, stop),)

    return _result(np.pad(x.data, widths), "pad_axis", (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(out, g):
        return tuple(slice_axis(g, axis, int(bounds[i]), int(bounds[i + 1])) for i in range(len(xs)))

    return _result(np.concatenate([x.data for x in xs], axis=axis), "concat", tuple(xs), backward)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return affine(as_tensor(a), 1.0, float(b))
    if _is_scalar(a):
        return affine(as_tensor(b), 1.0, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(out, g):
        return sum_to(g, sa), sum_to(g, sb)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return affine(as_tensor(a), 1.0, -float(b))
    if _is_scalar(a):
        return affine(as_tensor(b), -1.0, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(out, g):
        return sum_to(g, sa), sum_to(affine(g, -1.0), sb)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return affine(as_tensor(a), float(b))
    if _is_scalar(a):
        return affine(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(out, g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), backward)


def affine(x: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """scale * x + shift with Python-float coefficients."""
    x = as_tensor(x)
    dt = x.data.dtype
    data = x.data * dt.type(scale) if scale != 1.0 else x.data
    if shift != 0.0:
        data = data + dt.type(shift)
    elif scale == 1.0:
        data = data.copy()

    def backward(out, g):
        return (affine(g, scale) if scale != 1.0 else g,)

    return _result(data, "affine", (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(out, g):
        return (mul(g, affine(x, 2.0)),)

    return _result(x.data * x.data, "square", (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.data.dtype)

    def backward(out, g):
        # second derivative is taken as zero everywhere
        return (mul(g, Tensor(mask)),)

    return _result(x.data * mask, "relu", (x,), backward)


def exp(x: Tensor) -> Tensor:
    def backward(out, g):
        return (mul(g, out),)

    return _result(np.exp(x.data), "exp", (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(out, g):
        return (mul(g, reciprocal(x)),)

    return _result(np.log(x.data), "log", (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    def backward(out, g):
        return (mul(affine(g, 0.5), reciprocal(out)),)

    return _result(np.sqrt(x.data), "sqrt", (x,), backward)


def reciprocal(x: Tensor) -> Tensor:
    def backward(out, g):
        return (mul(affine(g, -1.0), square(out)),)

    return _result(1.0 / x.data, "reciprocal", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    data[~pos] = e / (1.0 + e)

    def backward(out, g):
        return (mul(g, mul(out, affine(out, -1.0, 1.0))),)

    return _result(data, "sigmoid", (x,), backward)


def tanh(x: Tensor) -> Tensor:
    def backward(out, g):
        return (mul(g, affine(square(out), -1.0, 1.0)),)

    return _result(np.tanh(x.data), "tanh", (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)

    def backward(out, g):
        return (mul(g, Tensor(sign)),)

    return _result(np.abs(x.data), "abs", (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(out, g):
        return (broadcast_to(reshape(g, kept), src),)

    return _result(np.asarray(data), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return affine(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def sq_norm(x: Tensor) -> Tensor:
    """Per-sample squared L2 norm over every axis except the first."""
    if x.ndim < 2:
        raise ShapeError(f"sq_norm: need a batch axis, got shape {x.shape}")
    return sum(square(x), axis=tuple(range(1, x.ndim)))


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(out, g):
        ga = gb = None
        if a.requires_grad:
            ga = sum_to(matmul(g, transpose(b)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = reshape(a, (-1, a.shape[-1]))
                g2 = reshape(g, (-1, g.shape[-1]))
                gb = matmul(transpose(a2), g2)
            else:
                gb = sum_to(matmul(transpose(a), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def softmax(x: Tensor, bias=None) -> Tensor:
    """Softmax over the last axis of ``x + bias``."""
    if bias is not None:
        x = add(x, bias)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(out, g):
        inner = sum(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _result(data, "softmax", (x,), backward)


LAYERNORM_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the learned affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd_np = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat_np = xc * rstd_np
    data = xhat_np * gamma.data + beta.data

    def backward(out, g):
        if grad_enabled():
            xc_t = sub(x, mean(x, axis=-1, keepdims=True))
            rstd = reciprocal(sqrt(affine(mean(square(xc_t), axis=-1, keepdims=True), 1.0, eps)))
            xhat = mul(xc_t, rstd)
        else:
            rstd, xhat = Tensor(rstd_np), Tensor(xhat_np)
        gxhat = mul(g, gamma)
        gx = mul(
            rstd,
            sub(
                sub(gxhat, mean(gxhat, axis=-1, keepdims=True)),
                mul(xhat, mean(mul(gxhat, xhat), axis=-1, keepdims=True)),
            ),
        )
        return gx, sum_to(mul(g, xhat), gamma.shape), sum_to(g, beta.shape)

    return _result(data, "layer_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Tape:
    """Topologically ordered view of the graph that produced one scalar."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topo_order(root) if root.requires_grad else []

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents]


def grad(loss: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each of ``inputs``.

    Inputs the loss does not depend on receive zeros. With ``create_graph``
    the returned tensors stay on the graph and can be differentiated again.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    inputs = list(inputs)
    tape = Tape(loss)
    grads: dict[int, Tensor] = {}
    wanted = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}
    with set_grad_enabled(create_graph):
        if loss.requires_grad:
            grads[id(loss)] = Tensor(np.ones_like(loss.data))
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(node, g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph and g.requires_grad:
            g = g.detach()
        out.append(g)
    return out


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradient map over leaves (every reachable leaf when ``leaves`` is None)."""
    if leaves is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        leaves = Tape(loss).leaves()
    leaves = list(leaves)
    return dict(zip(leaves, grad(loss, leaves)))
