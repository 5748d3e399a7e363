"""
Reverse-mode automatic differentiation over float64 numpy arrays.

A Graph is an append-only list of nodes. Every op records its output value and
a closure mapping the output gradient to input gradients; backward walks the
list once in reverse insertion order.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from error_handler import NumericError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
OpFn = Callable[..., Tuple[np.ndarray, BackwardFn]]

OPS: Dict[str, OpFn] = {}


def register_op(kind: str):
    """Register a forward rule: fn(*input_values, **attrs) -> (output, backward_fn)"""
    def decorator(fn: OpFn) -> OpFn:
        OPS[kind] = fn
        return fn
    return decorator


@dataclass
class Node:
    kind: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    backward: Optional[BackwardFn] = None
    name: Optional[str] = None


class Graph:
    """Computation record. With replay set, stop-gradient outputs are read back from the reference graph."""

    def __init__(self, replay: Optional['Graph'] = None):
        self.nodes: List[Node] = []
        self.replay = replay
        self.barriers: List[np.ndarray] = []

    def _append(self, node: Node) -> 'Tensor':
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, data, name: Optional[str] = None, requires_grad: bool = True) -> 'Tensor':
        value = np.array(data, dtype=np.float64)
        return self._append(Node('leaf', (), value, requires_grad, None, name))

    def constant(self, data, name: Optional[str] = None) -> 'Tensor':
        return self.leaf(data, name=name, requires_grad=False)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ('graph', 'node_id')

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.node_id]

    @property
    def data(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.node.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    @property
    def name(self) -> Optional[str]:
        return self.node.name

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _lift(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(np.full(self.shape, float(other)))

    def __add__(self, other):
        return forward_op('add', self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return forward_op('subtract', self, self._lift(other))

    def __rsub__(self, other):
        return forward_op('subtract', self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return forward_op('multiply', self, other)
        return forward_op('scale', self, factor=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return forward_op('divide', self, other)
        return forward_op('scale', self, factor=1.0 / float(other))

    def __neg__(self):
        return forward_op('scale', self, factor=-1.0)

    def __matmul__(self, other):
        return forward_op('matmul', self, other)

    def __repr__(self):
        return f"Tensor(id={self.node_id}, shape={self.shape}, kind={self.node.kind})"


def forward_op(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Evaluate a registered op and record it on the inputs' graph"""
    if kind not in OPS:
        raise ValidationError(f"Unknown op kind '{kind}'")
    if not inputs:
        raise ValidationError(f"{kind}: at least one input required")
    graph = inputs[0].graph
    for t in inputs:
        if not isinstance(t, Tensor) or t.graph is not graph:
            raise ValidationError(f"{kind}: inputs must be tensors of the same graph")
    out, backward_fn = OPS[kind](*[t.data for t in inputs], **attrs)
    requires_grad = any(t.requires_grad for t in inputs)
    node = Node(kind, tuple(t.node_id for t in inputs), np.asarray(out, dtype=np.float64),
                requires_grad, backward_fn if requires_grad else None)
    return graph._append(node)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward, zero gradient upstream"""
    graph = x.graph
    value = x.data
    if graph.replay is not None:
        index = len(graph.barriers)
        if index >= len(graph.replay.barriers):
            raise ValidationError("Replay graph has fewer stop-gradient barriers than the live computation")
        value = graph.replay.barriers[index]
        if value.shape != x.shape:
            raise ShapeError('stop-gradient replay', value.shape, x.shape)
    graph.barriers.append(value)
    return graph._append(Node('stop-gradient', (x.node_id,), value, False, None))


def detached(x: Tensor) -> np.ndarray:
    """Value of x for non-differentiable decisions; frozen under replay"""
    return stop_gradient(x).data


class GradientMap(dict):
    def of(self, tensor: Tensor) -> np.ndarray:
        grad = self.get(tensor.node_id)
        return np.zeros_like(tensor.data) if grad is None else grad


def backward(graph: Graph, loss: Tensor) -> GradientMap:
    """Gradients of a scalar loss for every node reached, keyed by node id"""
    if loss.graph is not graph:
        raise ValidationError("Loss was not produced inside this graph")
    if loss.data.size != 1:
        raise ValidationError(f"Loss must be a scalar, got shape {loss.shape}")
    grads = GradientMap({loss.node_id: np.ones_like(loss.data)})
    nodes = graph.nodes
    for node_id in range(loss.node_id, -1, -1):
        node = nodes[node_id]
        grad = grads.get(node_id)
        if grad is None or node.backward is None:
            continue
        input_grads = node.backward(grad)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not nodes[input_id].requires_grad:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad
    logger.debug(f"backward visited {loss.node_id + 1} nodes, {len(grads)} gradients")
    return grads


# elementwise -----------------------------------------------------------------

def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(kind, a.shape, b.shape)


@register_op('add')
def _add(a, b):
    _same_shape('add', a, b)
    return a + b, lambda g: (g, g)


@register_op('subtract')
def _subtract(a, b):
    _same_shape('subtract', a, b)
    return a - b, lambda g: (g, -g)


@register_op('multiply')
def _multiply(a, b):
    _same_shape('multiply', a, b)
    return a * b, lambda g: (g * b, g * a)


@register_op('divide')
def _divide(a, b):
    _same_shape('divide', a, b)
    out = a / b
    return out, lambda g: (g / b, -g * out / b)


@register_op('scale')
def _scale(a, factor: float):
    return a * factor, lambda g: (g * factor,)


@register_op('relu')
def _relu(x):
    mask = x > 0
    return x * mask, lambda g: (g * mask,)


@register_op('sigmoid')
def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, lambda g: (g * out * (1.0 - out),)


@register_op('log')
def _log(x):
    if np.any(x <= 0):
        raise NumericError("log: input must be strictly positive", name='log')
    return np.log(x), lambda g: (g / x,)


# linear algebra --------------------------------------------------------------

@register_op('matmul')
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or (a.ndim > 2 and b.ndim > 2) or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    out = np.matmul(a, b)

    def grad(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if b.ndim == 2:
            da = np.matmul(g, b.T)
            db = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return da, db
        da = np.einsum('...ij,...kj->ik', g, b)
        db = np.matmul(a.T, g)
        return da, db
    return out, grad


@register_op('bias-add')
def _bias_add(x, b):
    if x.ndim < 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError('bias-add', x.shape, b.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
    return x + b.reshape(view), lambda g: (g, g.sum(axis=reduce_axes))


def _pad2d(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


@register_op('conv2d')
def _conv2d(x, w, stride: int = 1, pad: int = 0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError('conv2d', x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph = pw = pad
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError('conv2d', x.shape, w.shape)
    xp = _pad2d(x, ph, pw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad(g):
        dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        dx = dxp[:, :, ph:ph + h, pw:pw + wd]
        return dx, dw
    return out, grad


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# pooling / reshaping -------------------------------------------------------------

@register_op('global-average-pool')
def _global_average_pool(x):
    if x.ndim != 4:
        raise ShapeError('global-average-pool', x.shape)
    area = x.shape[2] * x.shape[3]
    out = x.mean(axis=(2, 3))
    return out, lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)


@register_op('average-pool-2d')
def _average_pool_2d(x, k: int):
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError('average-pool-2d', x.shape, (k, k))
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad(g):
        spread = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (spread / (k * k),)
    return out, grad


@register_op('concat')
def _concat(*xs, axis: int = 1):
    base = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(base) or any(x.shape[i] != base[i] for i in range(len(base)) if i != axis):
            raise ShapeError('concat', *[x.shape for x in xs])
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return np.concatenate(xs, axis=axis), lambda g: tuple(np.split(g, splits, axis=axis))


@register_op('reshape')
def _reshape(x, shape: Tuple[int, ...]):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', x.shape, shape)
    return out, lambda g: (g.reshape(x.shape),)


@register_op('transpose')
def _transpose(x, axes: Tuple[int, ...]):
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError('transpose', x.shape, axes)
    inverse = np.argsort(axes)
    return x.transpose(axes), lambda g: (g.transpose(inverse),)


@register_op('sum')
def _sum(x):
    return np.array(x.sum()), lambda g: (np.full(x.shape, float(g)),)


@register_op('max-accumulate')
def _max_accumulate(x, axis: int = 1):
    """Running max along axis; ties route the gradient to the earlier position"""
    moved = np.moveaxis(x, axis, 0)
    steps = moved.shape[0]
    out = np.empty_like(moved)
    source = np.zeros(moved.shape, dtype=np.int64)
    out[0] = moved[0]
    for t in range(1, steps):
        newer = moved[t] > out[t - 1]
        out[t] = np.where(newer, moved[t], out[t - 1])
        source[t] = np.where(newer, t, source[t - 1])

    def grad(g):
        gm = np.moveaxis(g, axis, 0)
        dx = np.zeros_like(moved)
        for t in range(steps):
            for k in range(t + 1):
                dx[k] += gm[t] * (source[t] == k)
        return (np.moveaxis(dx, 0, axis),)
    return np.moveaxis(out, 0, axis), grad


# probabilities ------------------------------------------------------------

@register_op('softmax')
def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return out, grad


@register_op('log-softmax')
def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return out, lambda g: (g - probs * g.sum(axis=-1, keepdims=True),)


@register_op('nll')
def _nll(logp, labels):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logp.ndim != 2 or labels.shape[0] != logp.shape[0]:
        raise ShapeError('nll', logp.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= logp.shape[1]):
        raise ValidationError(f"nll: label out of range [0, {logp.shape[1]})")
    rows = np.arange(labels.shape[0])
    n = labels.shape[0]

    def grad(g):
        d = np.zeros_like(logp)
        d[rows, labels] = -float(g) / n
        return (d,)
    return np.array(-logp[rows, labels].mean()), grad


# functional helpers ------------------------------------------------------

def add(a, b): return forward_op('add', a, b)
def subtract(a, b): return forward_op('subtract', a, b)
def multiply(a, b): return forward_op('multiply', a, b)
def divide(a, b): return forward_op('divide', a, b)
def scale(a, factor): return forward_op('scale', a, factor=float(factor))
def matmul(a, b): return forward_op('matmul', a, b)
def relu(x): return forward_op('relu', x)
def sigmoid(x): return forward_op('sigmoid', x)
def log(x): return forward_op('log', x)
def softmax(x): return forward_op('softmax', x)
def log_softmax(x): return forward_op('log-softmax', x)
def reshape(x, shape): return forward_op('reshape', x, shape=tuple(shape))
def transpose(x, axes): return forward_op('transpose', x, axes=tuple(axes))
def tensor_sum(x): return forward_op('sum', x)
def global_average_pool(x): return forward_op('global-average-pool', x)
def average_pool_2d(x, k): return forward_op('average-pool-2d', x, k=int(k))
def max_accumulate(x, axis=1): return forward_op('max-accumulate', x, axis=axis)
def bias_add(x, b): return forward_op('bias-add', x, b)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return forward_op('concat', *tensors, axis=axis)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    out = forward_op('conv2d', x, w, stride=int(stride), pad=int(pad))
    return bias_add(out, b) if b is not None else out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    if b is None:
        return out
    if out.data.ndim == 2:
        return bias_add(out, b)
    flat = reshape(out, (-1, out.shape[-1]))
    return reshape(bias_add(flat, b), out.shape)


def mean(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / x.data.size)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of log-softmax"""
    return forward_op('nll', log_softmax(logits), labels=labels)


# checking / init -------------------------------------------------------------

def finite_diff_check(f: Callable[[Graph, Tensor], Tensor], x, eps: float = 1e-5,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                      floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients of f at x.

    f builds a scalar on the given graph from the leaf it receives. Numeric
    evaluations replay the reference graph's stop-gradient values.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    ref = Graph()
    leaf = ref.leaf(x, name='x')
    loss = f(ref, leaf)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("finite_diff_check: f is not finite at x")
    analytic = backward(ref, loss).of(leaf)

    coords = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(x.size, size=max_coords, replace=False)

    def evaluate(values):
        g = Graph(replay=ref)
        out = f(g, g.leaf(values))
        value = out.item()
        if not np.isfinite(value):
            raise NumericError("finite_diff_check: f is not finite near x")
        return value

    worst = 0.0
    flat = x.reshape(-1)
    for c in coords:
        plus = flat.copy()
        minus = flat.copy()
        plus[c] += eps
        minus[c] -= eps
        numeric = (evaluate(plus.reshape(x.shape)) - evaluate(minus.reshape(x.shape))) / (2 * eps)
        a = analytic.reshape(-1)[c]
        denom = max(abs(a), abs(numeric), floor)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
