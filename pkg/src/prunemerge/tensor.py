"""Float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node holding its inputs and a
closure that maps the output gradient to input gradients.  ``backward``
topologically sorts the nodes reaching the loss and replays them once in
reverse.  Gradient flow inside a single replay uses fresh buffers; the
results are then *accumulated* into each tensor's ``grad``, so separate
forward/backward rounds add up until ``zero_grad`` is called.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeMismatchError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class _OpNode:
    __slots__ = ("inputs", "output", "grad_fn", "name")

    def __init__(self, inputs, output, grad_fn, name):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn
        self.name = name


class Tensor:
    """A float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._node: _OpNode | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    # -- gradient bookkeeping -------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data with no graph linkage."""
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; "
                                "multiply by a reciprocal constant instead")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return take(self, key)

    # -- shape ops as methods ---------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def from_op(data: Array, inputs: Sequence[Tensor],
            grad_fn: Callable[[Array], Sequence[Array | None]],
            name: str) -> Tensor:
    """Build an op output, recording a graph node if any input needs grad.

    ``grad_fn`` receives the output gradient and returns one gradient (or
    None) per input, each already shaped like the matching input.  This is
    the extension hook other modules use to define custom operations.
    """
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        out._node = _OpNode(tuple(inputs), out, grad_fn, name)
    return out


class Tape:
    """Topologically ordered op nodes reaching one root tensor."""

    def __init__(self, nodes: list[_OpNode]):
        self.nodes = nodes
        self.visit_counts: dict[int, int] = {}

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        # Iterative DFS postorder (so deep graphs cannot hit the recursion
        # limit), emulating recursion exactly: a node is appended only when
        # its child iterator is exhausted.  A "seen" child that is not yet
        # finished would be an ancestor on the current path, impossible in
        # an acyclic graph, so skipping seen children preserves the
        # topological guarantee even with shared subgraphs (residuals).
        nodes: list[_OpNode] = []
        if root._node is None:
            return cls(nodes)

        def children(node: _OpNode):
            return (t._node for t in node.inputs if t._node is not None)

        seen: set[int] = {id(root._node)}
        stack: list[tuple[_OpNode, object]] = [
            (root._node, children(root._node))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if id(child) not in seen:
                    seen.add(id(child))
                    stack.append((child, children(child)))
                    advanced = True
                    break
            if not advanced:
                nodes.append(node)
                stack.pop()
        return cls(nodes)

    def replay_backward(self, root: Tensor, seed: Array) -> None:
        """Propagate ``seed`` from ``root`` through the tape exactly once."""
        flow: dict[int, Array] = {id(root): seed}
        self.visit_counts = {}
        for node in reversed(self.nodes):
            self.visit_counts[id(node)] = self.visit_counts.get(id(node), 0) + 1
            out_grad = flow.pop(id(node.output), None)
            if out_grad is None:
                continue
            if node.output.requires_grad and node.output is not root:
                node.output.accumulate_grad(out_grad)
            grads = node.grad_fn(out_grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in flow:
                    flow[key] = flow[key] + g
                else:
                    flow[key] = g
        # Anything left in ``flow`` belongs to graph leaves (parameters,
        # traced inputs): fold it into their persistent grads.
        for node in self.nodes:
            for t in node.inputs:
                g = flow.pop(id(t), None)
                if g is not None and t.requires_grad:
                    t.accumulate_grad(g)


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every requires_grad tensor reaching ``loss``.

    Repeated calls accumulate; callers zero grads between steps.  Returns
    the tape so tests can inspect visit counts.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    seed = np.ones_like(loss.data)
    loss.accumulate_grad(seed)
    tape.replay_backward(loss, seed)
    return tape


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ----------------------------------------------------------------------
# primitive operations
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return from_op(data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return from_op(data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return from_op(data, (a, b), grad_fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return from_op(data, (a, b), grad_fn, "matmul")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.data.shape),)

    return from_op(data, (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return from_op(data, (x,), grad_fn, "transpose")


def swap_last2(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def _is_basic_key(key) -> bool:
    if isinstance(key, tuple):
        return all(_is_basic_key(k) for k in key)
    return isinstance(key, (int, np.integer, slice)) or key is Ellipsis or key is None


def take(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters into a zero tensor."""
    if not _is_basic_key(key):
        raise ContractError("take supports basic indexing only (int/slice/ellipsis)")
    data = x.data[key]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return from_op(data, (x,), grad_fn, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = [t.data for t in tensors]
    data = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return from_op(data, tuple(tensors), grad_fn, "concat")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.broadcast_to(x.data, shape).copy()

    def grad_fn(g):
        return (_unbroadcast(g, x.data.shape),)

    return from_op(data, (x,), grad_fn, "broadcast_to")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, x.ndim)

    def grad_fn(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return from_op(data, (x,), grad_fn, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    if axes is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.data.shape).copy(),)

    return from_op(data, (x,), grad_fn, "mean")


def _normalize_axes(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, numerically stabilised.

    Non-finite inputs are rejected: a NaN or infinity here is always an
    upstream defect and would otherwise surface as silent garbage.
    """
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return from_op(y, (x,), grad_fn, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean, unit variance; scale and shift.

    A constant row (zero variance) maps to zeros, so eps keeps the
    division finite rather than changing the result.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def grad_fn(g):
        d = x.data.shape[-1]
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return from_op(data, (x, gamma, beta), grad_fn, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * local,)

    return from_op(data, (x,), grad_fn, "gelu")


def _log_softmax(z: Array) -> Array:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class.

    ``labels`` is an integer array of shape (batch,); each entry must lie
    in [0, num_classes).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ContractError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    n_classes = logits.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_classes:
        raise ContractError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    batch = logits.shape[0]
    logp = _log_softmax(logits.data)
    picked = logp[np.arange(batch), labels]
    data = np.asarray(-picked.mean())

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(batch), labels] -= 1.0
        return (g * p / batch,)

    return from_op(data, (logits,), grad_fn, "cross_entropy")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean KL(q || p) over the batch, computed from logits.

    ``q_logits`` is the reference (teacher) side and is treated as a
    constant: gradients flow only to ``p_logits``.  Both sides are
    tempered by the same ``temperature`` before the softmax.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatchError(
            f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}")
    batch = p_logits.shape[0]
    logp = _log_softmax(p_logits.data / temperature)
    logq = _log_softmax(q_logits.data / temperature)
    q = np.exp(logq)
    data = np.asarray((q * (logq - logp)).sum(axis=-1).mean())

    def grad_fn(g):
        p = np.exp(logp)
        return (g * (p - q) / (batch * temperature), None)

    # q_logits joins the node for shape bookkeeping only; its gradient
    # slot is always None, which keeps the teacher detached by contract.
    return from_op(data, (p_logits, q_logits), grad_fn, "kl_divergence")
