"""
Small dense tensors with reverse-mode automatic differentiation.

Values are stored as float32. Matrix products and reductions accumulate in
float64 and are rounded back to float32, and gradients are accumulated in
float64 before being stored on the node.

Shapes must match exactly for elementwise operations, with two exceptions
used by batched forward passes: a matrix combined with a row vector of its
trailing dimension (bias terms), and a ``(B, C)`` matrix combined with a
``(B, 1)`` column (keepdims reductions). Python scalars are accepted as
constants everywhere.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
ACC = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are not supported by an operation."""


class GraphError(RuntimeError):
    """Raised on misuse of a graph (e.g. backward before forward)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf from finite inputs."""


class Tensor:
    """
    A node of the computation graph: cached value, gradient, and the closure
    mapping an output gradient to gradients for each parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, op="leaf", parents=(), backward=None):
        arr = np.array(data, dtype=DTYPE, copy=True) if op == "leaf" else np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"{name or op}: tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.op = op
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def parents(self):
        return self._parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def label(self):
        return self.name or self.op

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        backward(self, seed)


ComputationNode = Tensor


def constant(value, name=None):
    return Tensor(value, requires_grad=False, name=name)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, name="const")


def _check_finite(values, op, operands):
    if not np.all(np.isfinite(values)):
        names = ", ".join(t.label() for t in operands)
        raise NonFiniteError(f"{op}: non-finite result from operand(s) {names}")


def _node(values, op, parents, backward, check=False):
    with np.errstate(over="ignore"):
        values = np.asarray(values).astype(DTYPE, copy=False)
    if check:
        # checked after rounding so float32 overflow is caught too
        _check_finite(values, op, parents)
    return Tensor(values, op=op, parents=parents, backward=backward)


def _broadcast_kind(a, b, op):
    """Return how ``b`` combines with ``a``: 'same', 'row', 'col', or 'scalar'."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row"
    if a.ndim == 2 and b.ndim == 2 and b.shape == (a.shape[0], 1):
        return "col"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} ({a.label()}) and {b.shape} ({b.label()})")


def _reduce_to(grad, kind):
    if kind == "same":
        return grad
    if kind == "row":
        return grad.sum(axis=0)
    if kind == "col":
        return grad.sum(axis=1, keepdims=True)
    return grad.sum()


def _binary(a, b, op):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        kind_b = _broadcast_kind(a, b, op)
        kind_a = "same"
    except ShapeError:
        kind_a = _broadcast_kind(b, a, op)
        kind_b = "same"
    return a, b, kind_a, kind_b


# elementwise binary ops ---------------------------------------------------


def add(a, b):
    a, b, ka, kb = _binary(a, b, "add")
    out = a.data.astype(ACC) + b.data.astype(ACC)

    def backward(g):
        return _reduce_to(g, ka), _reduce_to(g, kb)

    return _node(out, "add", (a, b), backward, check=True)


def mul(a, b):
    a, b, ka, kb = _binary(a, b, "mul")
    av, bv = a.data.astype(ACC), b.data.astype(ACC)

    def backward(g):
        return _reduce_to(g * bv, ka), _reduce_to(g * av, kb)

    return _node(av * bv, "mul", (a, b), backward, check=True)


def neg(a):
    return mul(a, -1.0)


def matmul(a, b):
    """
    Matrix product. Supported operand ranks: (m, k) @ (k, n), (m, k) @ (k,),
    and (k,) @ (k, n).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0])
        or (a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} ({a.label()}) and {b.shape} ({b.label()})")
    av, bv = a.data.astype(ACC), b.data.astype(ACC)

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ bv.T, av.T @ g
        if b.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return bv @ g, np.outer(av, g)

    return _node(av @ bv, "matmul", (a, b), backward, check=True)


# elementwise unary ops ----------------------------------------------------


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0), "relu", (x,), backward)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data.astype(ACC))

    def backward(g):
        return (g * (1.0 - y * y),)

    return _node(y, "tanh", (x,), backward)


def arctanh(x):
    x = _as_tensor(x)
    v = x.data.astype(ACC)
    if np.any(np.abs(v) >= 1.0):
        raise NonFiniteError(f"arctanh: operand {x.label()} outside the open interval (-1, 1)")

    def backward(g):
        return (g / (1.0 - v * v),)

    return _node(np.arctanh(v), "arctanh", (x,), backward, check=True)


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data.astype(ACC))
    if np.any(y > np.finfo(DTYPE).max):
        raise NonFiniteError(f"exp: overflow from operand {x.label()}")

    def backward(g):
        return (g * y,)

    return _node(y, "exp", (x,), backward)


def log(x):
    x = _as_tensor(x)
    v = x.data.astype(ACC)
    if np.any(v <= 0):
        raise NonFiniteError(f"log: non-positive values in operand {x.label()}")

    def backward(g):
        return (g / v,)

    return _node(np.log(v), "log", (x,), backward)


def clamp(x, lo=None, hi=None):
    x = _as_tensor(x)
    v = x.data
    y = np.clip(v, lo if lo is not None else -np.inf, hi if hi is not None else np.inf)
    passthrough = y == v

    def backward(g):
        return (g * passthrough,)

    return _node(y, "clamp", (x,), backward)


def sign(x):
    """Elementwise sign. Its gradient is treated as zero."""
    x = _as_tensor(x)

    def backward(g):
        return (np.zeros_like(g),)

    return _node(np.sign(x.data), "sign", (x,), backward)


# reductions ---------------------------------------------------------------


def _axis(x, axis, op):
    if axis is None:
        return None
    ax = axis % x.ndim if x.ndim else None
    if ax != x.ndim - 1:
        raise ShapeError(f"{op}: only reductions over the last axis are supported ({x.label()})")
    return ax


def sum_reduce(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    ax = _axis(x, axis, "sum_reduce")
    out = x.data.astype(ACC).sum(axis=ax, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, "sum_reduce", (x,), backward, check=True)


def max_reduce(x, axis=None, keepdims=False):
    """Maximum; the gradient flows to the first maximising entry only."""
    x = _as_tensor(x)
    ax = _axis(x, axis, "max_reduce")
    v = x.data
    if ax is None:
        idx = np.unravel_index(np.argmax(v), v.shape)
        out = v[idx]
    else:
        idx = np.argmax(v, axis=ax)
        out = np.take_along_axis(v, np.expand_dims(idx, ax), ax)
        if not keepdims:
            out = np.squeeze(out, ax)

    def backward(g):
        grad = np.zeros(v.shape, dtype=ACC)
        if ax is None:
            grad[idx] = g
        else:
            gg = g if keepdims else np.expand_dims(g, ax)
            np.put_along_axis(grad, np.expand_dims(idx, ax), gg, ax)
        return (grad,)

    return _node(out, "max_reduce", (x,), backward)


def softmax(x):
    """Softmax over the last axis, computed with max-subtraction."""
    x = _as_tensor(x)
    v = x.data.astype(ACC)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, "softmax", (x,), backward)


def log_softmax(x):
    """log(softmax(x)) over the last axis, composed from primitives."""
    x = _as_tensor(x)
    keep = x.ndim == 2
    m = max_reduce(x, axis=-1, keepdims=keep)
    shifted = x - m
    lse = log(sum_reduce(exp(shifted), axis=-1, keepdims=keep))
    return shifted - lse


# structural ---------------------------------------------------------------


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.label()}) as {shape}")
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), "reshape", (x,), backward)


def conv2d_3x3(x, kernel, bias):
    """
    Same-padded, stride-1 3x3 convolution with per-channel bias.

    :param x: input of shape (B, C_in, H, W)
    :param kernel: weights of shape (C_out, C_in, 3, 3)
    :param bias: shape (C_out,)
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 4 or kernel.shape[1:] != (x.shape[1], 3, 3) or bias.shape != (kernel.shape[0],):
        raise ShapeError(
            f"conv2d_3x3: incompatible shapes {x.shape} ({x.label()}), {kernel.shape}, {bias.shape}"
        )
    h, w = x.shape[2], x.shape[3]
    xp = np.pad(x.data.astype(ACC), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    kv = kernel.data.astype(ACC)
    out = np.einsum("bchwij,ocij->bohw", cols, kv) + bias.data.astype(ACC)[None, :, None, None]

    def backward(g):
        dk = np.einsum("bohw,bchwij->ocij", g, cols)
        db = g.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + h, j : j + w] += np.einsum("bohw,oc->bchw", g, kv[:, :, i, j])
        return dxp[:, :, 1:-1, 1:-1], dk, db

    return _node(out, "conv2d_3x3", (x, kernel, bias), backward, check=True)


# reverse pass -------------------------------------------------------------


def _topological(root):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed=None):
    """
    Propagate gradients from ``root`` to every node that requires them.

    :param root: output tensor
    :param seed: gradient of the final objective w.r.t. ``root``; defaults to
        ones (so a scalar root yields d root / d node)
    """
    if seed is None:
        seed_arr = np.ones(root.shape, dtype=ACC)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=ACC)
        if seed_arr.shape != root.shape:
            raise ShapeError(f"backward: seed shape {seed_arr.shape} != output shape {root.shape}")
    order = _topological(root)
    grads = {id(root): seed_arr}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.astype(DTYPE)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=ACC)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


class Graph:
    """
    A reusable computation with declared input shapes.

    ``fn`` receives one leaf tensor per declared input and returns the output
    tensor. Parameters are leaf tensors passed at construction time whose
    gradients are also reported by :meth:`backward`.
    """

    def __init__(self, fn: Callable[..., Tensor], input_shapes: Sequence[Sequence[int]], params: dict | None = None):
        self.fn = fn
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.params = dict(params or {})
        self._inputs = None
        self._output = None

    def forward(self, *inputs) -> Tensor:
        if len(inputs) != len(self.input_shapes):
            raise ShapeError(f"forward: expected {len(self.input_shapes)} inputs, got {len(inputs)}")
        leaves = []
        for i, (value, shape) in enumerate(zip(inputs, self.input_shapes)):
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
            if tuple(arr.shape) != shape:
                raise ShapeError(f"forward: input {i} has shape {tuple(arr.shape)}, declared {shape}")
            leaves.append(Tensor(arr, requires_grad=True, name=f"input{i}"))
        for p in self.params.values():
            p.grad = None
        self._inputs = leaves
        self._output = self.fn(*leaves)
        return self._output

    def backward(self, seed=None) -> dict:
        if self._output is None:
            raise GraphError("backward called before forward")
        backward(self._output, seed)
        result = {}
        for i, leaf in enumerate(self._inputs):
            result[i] = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape, dtype=DTYPE)
        for name, p in self.params.items():
            result[name] = p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE)
        return result

