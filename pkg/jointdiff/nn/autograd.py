# jointdiff/nn/autograd.py
"""Reverse-mode differentiation over dense numpy arrays.

Every primitive returns a new Node holding its forward value and a closure
that maps the upstream gradient to one gradient per parent. `backward`
orders the graph with networkx and walks it once in reverse topological
order, accumulating gradients additively across fan-out.

Shape coercion is explicit: besides channel concatenation the only
broadcasting primitive is `broadcast`.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from jointdiff.errors import GraphCycleError, NonDeterministicError, ShapeError

logger = logging.getLogger(__name__)

GROUP_NORM_EPS = 1e-5

Axis = Union[None, int, Tuple[int, ...]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn: Optional[BackwardFn] = None,
                 requires_grad: bool = False, op: str = "leaf", name: Optional[str] = None):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value, name: Optional[str] = None) -> Node:
    """Trainable input: gradients are collected for it."""
    return Node(np.array(value), requires_grad=True, name=name)


def constant(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _result(value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, requires_grad=True, op=op)
    # Nothing upstream needs gradients: keep the graph from growing.
    return Node(value, op=op)


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_same_shape(a, b, "add")
    return _result(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_same_shape(a, b, "sub")
    return _result(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def multiply(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_same_shape(a, b, "multiply")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "multiply")


def scale(a, factor: float) -> Node:
    a = as_node(a)
    return _result(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def square(a) -> Node:
    a = as_node(a)
    return multiply(a, a)


def silu(x) -> Node:
    x = as_node(x)
    sig = 1.0 / (1.0 + np.exp(-x.value))
    value = x.value * sig

    def backward_fn(g):
        return (g * sig * (1.0 + x.value * (1.0 - sig)),)

    return _result(value, (x,), backward_fn, "silu")


def softmax(x) -> Node:
    """Softmax over the last axis."""
    x = as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    p = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward_fn, "softmax")


def log_softmax(x) -> Node:
    """Log-softmax over the last axis."""
    x = as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    value = shifted - log_z
    p = np.exp(value)

    def backward_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(value, (x,), backward_fn, "log_softmax")


# -- reductions and shape ------------------------------------------------------

def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def reduce_sum(x, axis: Axis = None) -> Node:
    x = as_node(x)
    axes = _normalize_axes(axis, x.value.ndim)
    value = x.value.sum(axis=axes)

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _result(value, (x,), backward_fn, "sum")


def reduce_mean(x, axis: Axis = None) -> Node:
    x = as_node(x)
    axes = _normalize_axes(axis, x.value.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    value = x.value.mean(axis=axes)

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)

    return _result(value, (x,), backward_fn, "mean")


def reshape(x, shape: Sequence[int]) -> Node:
    x = as_node(x)
    try:
        value = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e
    return _result(value, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast(x, shape: Sequence[int]) -> Node:
    """Repeat size-1 axes of x up to `shape` (same rank required)."""
    x = as_node(x)
    shape = tuple(shape)
    if x.value.ndim != len(shape) or any(s != d and s != 1 for s, d in zip(x.shape, shape)):
        raise ShapeError(f"broadcast: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(x.shape, shape)) if s == 1 and d != 1)
    value = np.broadcast_to(x.value, shape).copy()

    def backward_fn(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _result(value, (x,), backward_fn, "broadcast")


def concat_channels(*xs) -> Node:
    """Concatenate (B, C_i, H, W) tensors along the channel axis."""
    nodes = [as_node(x) for x in xs]
    ref = nodes[0].shape
    for n in nodes[1:]:
        if n.value.ndim != 4 or n.shape[0] != ref[0] or n.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {n.shape} incompatible with {ref}")
    splits = np.cumsum([n.shape[1] for n in nodes])[:-1]
    value = np.concatenate([n.value for n in nodes], axis=1)

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(value, nodes, backward_fn, "concat")


# -- linear algebra and convolution --------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    av, bv = a.value, b.value
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def conv2d(x, w, b=None) -> Node:
    """Stride-1 convolution with zero padding keeping the spatial size.

    x: (B, C_in, H, W); w: (C_out, C_in, k, k) with odd k; b: (C_out,).
    """
    x, w = as_node(x), as_node(w)
    if x.value.ndim != 4 or w.value.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} incompatible")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {w.shape[2:]}")
    if b is not None:
        b = as_node(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} output channels")

    B, C, H, W = x.shape
    O = w.shape[0]
    pad = k // 2
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (B, C, H, W, k, k) -> (B*H*W, C*k*k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)
    wmat = w.value.reshape(O, C * k * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.value
    value = out.reshape(B, H, W, O).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(B, H, W, C, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + H, j:j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result(value, parents, backward_fn, "conv2d")


def group_norm(x, gamma, beta, groups: int, eps: float = GROUP_NORM_EPS) -> Node:
    """Group normalization of (B, C, H, W) with per-channel affine (C,)."""
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    if x.value.ndim != 4:
        raise ShapeError(f"group_norm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if groups < 1 or C % groups != 0:
        raise ShapeError(f"group_norm: {groups} groups do not divide {C} channels")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} do not match {C} channels")

    xg = x.value.reshape(B, groups, -1)
    n = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(B, C, H, W)
    g4 = gamma.value.reshape(1, C, 1, 1)
    value = xhat * g4 + beta.value.reshape(1, C, 1, 1)

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * g4).reshape(B, groups, n)
        xh = xhat.reshape(B, groups, n)
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
        return dx.reshape(B, C, H, W), dgamma, dbeta

    return _result(value, (x, gamma, beta), backward_fn, "group_norm")


def avg_pool2(x) -> Node:
    """2x2 average pooling of (B, C, H, W) with even H, W."""
    x = as_node(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {x.shape}")
    value = x.value.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _result(value, (x,), backward_fn, "avg_pool2")


def upsample2(x) -> Node:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    x = as_node(x)
    B, C, H, W = x.shape
    value = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(value, (x,), backward_fn, "upsample2")


# -- traversal -----------------------------------------------------------------

def _graph(output: Node) -> Tuple[nx.DiGraph, Dict[int, Node]]:
    graph = nx.DiGraph()
    nodes: Dict[int, Node] = {id(output): output}
    graph.add_node(id(output))
    stack = [output]
    while stack:
        node = stack.pop()
        for parent in node.parents:
            if not parent.requires_grad:
                continue
            if id(parent) not in nodes:
                nodes[id(parent)] = parent
                stack.append(parent)
            graph.add_edge(id(parent), id(node))
    return graph, nodes


def backward(output: Node) -> Dict[Node, np.ndarray]:
    """Populate .grad of every requires-grad node reachable from output.

    Returns the gradients of the leaves (nodes without parents).
    """
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}

    graph, nodes = _graph(output)
    try:
        order = list(nx.topological_sort(graph))
    except nx.NetworkXUnfeasible as e:
        raise GraphCycleError("Autograd graph contains a cycle") from e

    for node in nodes.values():
        node.grad = None
    output.grad = np.ones_like(output.value)

    for node_id in reversed(order):
        node = nodes[node_id]
        if node.backward_fn is None or node.grad is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, grad in zip(node.parents, parent_grads):
            if not parent.requires_grad or grad is None:
                continue
            if grad.shape != parent.shape:
                raise ShapeError(f"{node.op}: gradient {grad.shape} for parent {parent.shape}")
            parent.grad = grad.copy() if parent.grad is None else parent.grad + grad

    leaves = {}
    for node in nodes.values():
        if not node.parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            leaves[node] = node.grad
    return leaves


def grad_check(function: Callable[[], Node], params: Iterable[Node], tolerance: float = 1e-4,
               step: float = 1e-5, max_entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    `function` rebuilds the scalar output from `params` each call. With
    `max_entries`, at most that many randomly chosen entries per parameter
    are probed.
    """
    params: List[Node] = list(params)
    for p in params:
        # entries are perturbed in place through a flat view
        if not p.value.flags.c_contiguous or not p.value.flags.writeable:
            p.value = np.array(p.value, order="C")
    out = function()
    again = function()
    if not np.array_equal(out.value, again.value):
        raise NonDeterministicError("Two forward passes over the same parameters disagreed")

    backward(out)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for p in params}
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        grad = analytic[id(p)].reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + step
            hi_x = flat[idx]
            f_hi = float(function().value)
            flat[idx] = orig - step
            lo_x = flat[idx]
            f_lo = float(function().value)
            flat[idx] = orig
            numeric = (f_hi - f_lo) / (hi_x - lo_x)
            denom = max(abs(grad[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad[idx] - numeric) / denom)

    if worst > tolerance:
        logger.warning(f"Gradient check exceeded tolerance: {worst:.3e} > {tolerance:.1e}")
    return worst
