"""Dense tensors on numpy storage with tape-based reverse-mode autodiff.

Deliberately small: strict elementwise ops (equal shapes or a scalar operand),
2-d matmul, axis reductions, shape movement, and an extension point
(``make_node``) through which sibling modules register fused ops such as the
selective scan, convolutions and the cross-entropy head. Graphs are built
eagerly; ``backward`` replays the tape in reverse topological order.

Tensors are immutable once created. Values default to float32; gradient-check
tests build float64 graphs by passing float64 arrays in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from igmamba.errors import ContractError, ShapeError

_debug_checks = False


def set_debug_checks(enabled):
    """When enabled, every op output is checked for NaN/Inf (slow; tests only)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled():
    return _debug_checks


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A node in the autodiff graph.

    ``requires_grad`` marks trainable leaves; interior nodes inherit it from
    their parents. ``grad`` is lazily allocated by ``backward`` and accumulates
    across calls for leaves (zero with ``zero_grad``); interior grads are
    rebuilt fresh on every replay.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{flag})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    # -- method forms of the free functions ----------------------------------

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def flip(self, axis):
        return flip(self, axis)


@dataclass
class Parameter:
    """A named trainable leaf; names form dotted paths, unique per model."""

    name: str
    tensor: Tensor


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64 if isinstance(value, float) else None))


def make_node(data, parents, backward, op="op"):
    """Create a graph node for a fused op.

    ``backward`` receives the node's output gradient and must route gradients
    into the parents via ``accumulate``. It is dropped when no parent requires
    grad, so forward-only passes carry no tape.
    """
    node = Tensor.__new__(Tensor)
    node.data = data
    node.requires_grad = any(p.requires_grad for p in parents)
    node.grad = None
    node._op = op
    if node.requires_grad:
        node._parents = tuple(parents)
        node._backward = backward
    else:
        node._parents = ()
        node._backward = None
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    return node


def accumulate(tensor, grad):
    """Add ``grad`` into ``tensor.grad`` (no-op for non-grad tensors)."""
    if not tensor.requires_grad:
        return
    if tensor.grad is not None:
        tensor.grad += grad
    elif np.shape(grad) == tensor.data.shape:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype)
    else:
        tensor.grad = np.zeros_like(tensor.data)
        tensor.grad += grad


def backward(loss):
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf gradients accumulate across calls; interior gradients are reset at
    the start of each sweep so repeated sweeps stay exact.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        if node._backward is not None:
            node.grad = None

    if loss._backward is None:
        accumulate(loss, np.ones_like(loss.data))
    else:
        loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise binary ops --------------------------------------------------


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ and neither is a scalar")


def _unbroadcast(grad, shape):
    # Only scalar broadcast exists, so a mismatch collapses to the total sum.
    if grad.shape == tuple(shape):
        return grad
    return grad.sum().reshape(shape) if shape else np.asarray(grad.sum())


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return make_node(out_data, (a, b), backward_fn, "add")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return make_node(out_data, (a, b), backward_fn, "mul")


def neg(a):
    a = _wrap(a)

    def backward_fn(g):
        accumulate(a, -g)

    return make_node(-a.data, (a,), backward_fn, "neg")


def power(a, exponent):
    """Elementwise a**p for a python-number exponent."""
    a = _wrap(a)
    if isinstance(exponent, Tensor):
        raise ContractError("power: exponent must be a python number")
    p = float(exponent)
    out_data = a.data**p

    def backward_fn(g):
        accumulate(a, g * p * a.data ** (p - 1.0))

    return make_node(out_data, (a,), backward_fn, "power")


# -- elementwise unary ops ---------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a)
    out_data = _sigmoid(a.data)

    def backward_fn(g):
        accumulate(a, g * out_data * (1.0 - out_data))

    return make_node(out_data, (a,), backward_fn, "sigmoid")


def silu(a):
    a = _wrap(a)
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward_fn(g):
        accumulate(a, g * (s + a.data * s * (1.0 - s)))

    return make_node(out_data, (a,), backward_fn, "silu")


def softplus(a):
    a = _wrap(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward_fn(g):
        accumulate(a, g * _sigmoid(a.data))

    return make_node(out_data, (a,), backward_fn, "softplus")


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        accumulate(a, g * out_data)

    return make_node(out_data, (a,), backward_fn, "exp")


def log(a):
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward_fn(g):
        accumulate(a, g / a.data)

    return make_node(out_data, (a,), backward_fn, "log")


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def backward_fn(g):
        accumulate(a, g * mask)

    return make_node(np.where(mask, a.data, 0.0), (a,), backward_fn, "relu")


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        accumulate(a, g * (1.0 - out_data * out_data))

    return make_node(out_data, (a,), backward_fn, "tanh")


# -- matmul ------------------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs two 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_node(out_data, (a, b), backward_fn, "matmul")


def linear(x, weight, bias=None):
    """Affine map over the last axis: x[..., din] @ weight[din, dout] + bias."""
    x, weight = _wrap(x), _wrap(weight)
    if weight.data.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {weight.data.shape}")
    din, dout = weight.data.shape
    if x.data.ndim < 1 or x.data.shape[-1] != din:
        raise ShapeError(f"linear: input {x.data.shape} does not end in din={din}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.data.shape != (dout,):
            raise ShapeError(f"linear: bias shape {bias.data.shape} != ({dout},)")
    lead = x.data.shape[:-1]
    flat = x.data.reshape(-1, din)
    out_data = flat @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    out_data = out_data.reshape(lead + (dout,))

    def backward_fn(g):
        gf = g.reshape(-1, dout)
        accumulate(x, (gf @ weight.data.T).reshape(x.data.shape))
        accumulate(weight, flat.T @ gf)
        if bias is not None:
            accumulate(bias, gf.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out_data, parents, backward_fn, "linear")


# -- reductions --------------------------------------------------------------


def _check_axis(a, axis, op):
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.data.shape}")


def reduce_sum(a, axis=None):
    a = _wrap(a)
    _check_axis(a, axis, "sum")
    out_data = a.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return make_node(out_data, (a,), backward_fn, "sum")


def reduce_mean(a, axis=None):
    a = _wrap(a)
    _check_axis(a, axis, "mean")
    out_data = a.data.mean(axis=axis)
    extent = a.data.size if axis is None else a.data.shape[axis]

    def backward_fn(g):
        scaled = g / extent
        if axis is None:
            accumulate(a, np.broadcast_to(scaled, a.data.shape).copy())
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(scaled, axis), a.data.shape).copy())

    return make_node(out_data, (a,), backward_fn, "mean")


def reduce_max(a, axis=None):
    """Max reduction; gradient routes to the first maximal element."""
    a = _wrap(a)
    _check_axis(a, axis, "max")
    if axis is None:
        out_data = a.data.max()
        flat_idx = int(np.argmax(a.data))

        def backward_fn(g):
            buf = np.zeros_like(a.data)
            buf.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            accumulate(a, buf)

        return make_node(out_data, (a,), backward_fn, "max")

    out_data = a.data.max(axis=axis)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, arg, np.expand_dims(g, axis), axis)
        accumulate(a, buf)

    return make_node(out_data, (a,), backward_fn, "max")


# -- shape movement ----------------------------------------------------------


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from err

    def backward_fn(g):
        accumulate(a, g.reshape(a.data.shape))

    return make_node(out_data, (a,), backward_fn, "reshape")


def permute(a, axes):
    a = _wrap(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} are not a permutation of {a.data.ndim} dims")
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def backward_fn(g):
        accumulate(a, np.ascontiguousarray(np.transpose(g, inverse)))

    return make_node(out_data, (a,), backward_fn, "permute")


def flip(a, axis):
    a = _wrap(a)
    _check_axis(a, axis, "flip")
    out_data = np.ascontiguousarray(np.flip(a.data, axis))

    def backward_fn(g):
        accumulate(a, np.ascontiguousarray(np.flip(g, axis)))

    return make_node(out_data, (a,), backward_fn, "flip")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            accumulate(t, g[tuple(sl)])

    return make_node(out_data, tuple(tensors), backward_fn, "concat")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    first = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != first:
            raise ShapeError(f"stack: shapes {first} and {t.data.shape} differ")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        for i, t in enumerate(tensors):
            accumulate(t, np.take(g, i, axis=axis))

    return make_node(out_data, tuple(tensors), backward_fn, "stack")


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array (duplicates allowed)."""
    a = _wrap(a)
    _check_axis(a, axis, "take")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take: indices must be 1-d, got shape {idx.shape}")
    out_data = np.take(a.data, idx, axis=axis)

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        accumulate(a, buf)

    return make_node(out_data, (a,), backward_fn, "take")


def select(a, index, axis):
    """Drop ``axis`` by picking one slice (inverse of stack)."""
    a = _wrap(a)
    _check_axis(a, axis, "select")
    index = int(index)
    out_data = np.ascontiguousarray(np.take(a.data, index, axis=axis))

    def backward_fn(g):
        buf = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        buf[tuple(sl)] = g
        accumulate(a, buf)

    return make_node(out_data, (a,), backward_fn, "select")


def scale_channels(a, weights):
    """Multiply ``a[b, ..., c]`` by per-sample channel weights ``w[b, c]``."""
    a, weights = _wrap(a), _wrap(weights)
    if a.data.ndim < 2 or weights.data.ndim != 2:
        raise ShapeError(f"scale_channels: got {a.data.shape} and {weights.data.shape}")
    if a.data.shape[0] != weights.data.shape[0] or a.data.shape[-1] != weights.data.shape[-1]:
        raise ShapeError(
            f"scale_channels: batch/channel dims of {a.data.shape} and {weights.data.shape} differ"
        )
    wshape = (a.data.shape[0],) + (1,) * (a.data.ndim - 2) + (a.data.shape[-1],)
    wview = weights.data.reshape(wshape)
    out_data = a.data * wview
    middle = tuple(range(1, a.data.ndim - 1))

    def backward_fn(g):
        accumulate(a, g * wview)
        accumulate(weights, (g * a.data).sum(axis=middle))

    return make_node(out_data, (a, weights), backward_fn, "scale_channels")
