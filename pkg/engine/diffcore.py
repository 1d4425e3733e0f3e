"""Dense float64 arrays with reverse-mode differentiation.

A `ValueGraph` records every operation in creation order, which is a valid
topological order, so `backward` is a single reverse sweep. Leaves are either
named parameters (trainable or frozen) or constants. Every operation accepts
leading batch axes and follows numpy broadcasting; gradients are summed back
to each operand's shape.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

MASKED = -np.inf


class Tensor:
    """A node of a ValueGraph holding its forward value."""
    __slots__ = ('graph', 'value', 'parents', 'backward_fn', 'op', 'name',
                 'requires_grad', 'index')

    def __init__(self, graph, value, parents=(), backward_fn=None, op='leaf',
                 name=None, requires_grad=False):
        self.graph = graph
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self.index = len(graph.nodes)

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        label = f' {self.name!r}' if self.name else ''
        return f'<Tensor{label} op={self.op} shape={self.shape}>'


class ValueGraph:
    """Ordered record of operations plus the named leaves they read."""

    def __init__(self):
        self.nodes = []
        self.parameters = {}

    def _add(self, node):
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self._add(Tensor(self, np.asarray(value, dtype=np.float64), op='constant'))

    def parameter(self, name, value, trainable=True):
        """Register a named leaf. The array is referenced, not copied."""
        if name in self.parameters:
            raise ContractError(f'parameter {name!r} registered twice')
        node = self._add(Tensor(self, value, op='parameter', name=name,
                                requires_grad=bool(trainable)))
        self.parameters[name] = node
        return node

    def record(self, op, value, parents, backward_fn):
        """Append an operation node; `backward_fn(grad)` returns one gradient per parent."""
        requires_grad = any(p.requires_grad for p in parents)
        return self._add(Tensor(self, value, parents, backward_fn if requires_grad else None,
                                op=op, requires_grad=requires_grad))


def _graph_of(*operands):
    for operand in operands:
        if isinstance(operand, Tensor):
            return operand.graph
    raise ContractError('at least one operand must be a Tensor')


def _lift(graph, operand):
    if isinstance(operand, Tensor):
        return operand
    return graph.constant(operand)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError.for_shapes(op, a.shape, b.shape)


# ============== LINEAR ALGEBRA ==============
def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError.for_shapes('matmul', a.shape, b.shape)
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise DimensionError.for_shapes('matmul', a.shape, b.shape)

    def backward(grad):
        da = np.matmul(grad, np.swapaxes(b.value, -1, -2))
        db = np.matmul(np.swapaxes(a.value, -1, -2), grad)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return graph.record('matmul', value, (a, b), backward)


# ============== ELEMENTWISE ==============
def add(a, b):
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _broadcast_shape('add', a, b)
    value = a.value + b.value
    return graph.record('add', value, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _broadcast_shape('sub', a, b)
    value = a.value - b.value
    return graph.record('sub', value, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _broadcast_shape('mul', a, b)
    value = a.value * b.value
    return graph.record('mul', value, (a, b),
                        lambda g: (_unbroadcast(g * b.value, a.shape),
                                   _unbroadcast(g * a.value, b.shape)))


def scale(a, factor):
    factor = float(factor)
    return a.graph.record('scale', a.value * factor, (a,), lambda g: (g * factor,))


def neg(a):
    return scale(a, -1.0)


def relu(a):
    value = np.maximum(a.value, 0.0)
    # subgradient 0 at x == 0
    return a.graph.record('relu', value, (a,), lambda g: (g * (a.value > 0),))


def sigmoid(a):
    value = np.empty_like(a.value)
    positive = a.value >= 0
    value[positive] = 1.0 / (1.0 + np.exp(-a.value[positive]))
    expx = np.exp(a.value[~positive])
    value[~positive] = expx / (1.0 + expx)
    return a.graph.record('sigmoid', value, (a,), lambda g: (g * value * (1.0 - value),))


def exp(a):
    value = np.exp(a.value)
    return a.graph.record('exp', value, (a,), lambda g: (g * value,))


def log(a):
    return a.graph.record('log', np.log(a.value), (a,), lambda g: (g / a.value,))


ELEMENTWISE = {
    'add': add,
    'mul': mul,
    'relu': relu,
    'sigmoid': sigmoid,
    'scale': scale,
}


def elementwise(kind, *operands):
    """Dispatch one of add | mul | relu | sigmoid | scale by name."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f'unknown elementwise op {kind!r}')
    return fn(*operands)


# ============== REDUCTIONS AND SHAPES ==============
def sum(a, axis=None, keepdims=False):
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)

    return a.graph.record('sum', np.asarray(value, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    value = a.value.reshape(shape)
    return a.graph.record('reshape', value, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes):
    inverse = np.argsort(axes)
    value = np.transpose(a.value, axes)
    return a.graph.record('permute', value, (a,), lambda g: (np.transpose(g, inverse),))


def transpose(a):
    """Swap the last two axes."""
    axes = list(range(a.value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(tensors, axis=0):
    graph = _graph_of(*tensors)
    tensors = [_lift(graph, t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError.for_shapes('concat', *(t.shape for t in tensors))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return graph.record('concat', value, tensors, backward)


def take(a, indices, axis=0):
    """Gather along `axis`; backward scatters with accumulation."""
    indices = np.asarray(indices, dtype=np.intp)
    value = np.take(a.value, indices, axis=axis)

    def backward(grad):
        out = np.zeros_like(a.value)
        moved_out = np.moveaxis(out, axis, 0)
        moved_grad = np.moveaxis(grad, list(range(axis, axis + indices.ndim)),
                                 list(range(indices.ndim)))
        np.add.at(moved_out, indices, moved_grad)
        return (out,)

    return a.graph.record('take', value, (a,), backward)


# ============== SOFTMAX AND NORMALISATION ==============
def masked_softmax(scores, mask):
    """Row-wise softmax of scores + mask over the last axis.

    `mask` holds 0 (keep) or -inf (drop) and broadcasts against `scores`.
    Masked entries are exactly 0; an all-masked row is all zeros. Values of
    `scores` at masked positions never reach the output or the gradient.
    """
    mask = np.asarray(mask.value if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if np.any((mask != 0) & (mask != MASKED)):
        raise ContractError('mask entries must be exactly 0 or -inf')
    try:
        keep = np.broadcast_to(mask == 0, scores.shape)
    except ValueError:
        raise DimensionError.for_shapes('masked_softmax', scores.shape, mask.shape)
    safe = np.where(keep, scores.value, MASKED)
    row_max = np.max(safe, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    shifted = np.where(keep, scores.value - row_max, 0.0)
    weights = np.where(keep, np.exp(shifted), 0.0)
    totals = weights.sum(axis=-1, keepdims=True)
    value = np.divide(weights, totals, out=np.zeros_like(weights), where=totals > 0)

    def backward(grad):
        grad = np.where(keep, grad, 0.0)
        inner = np.sum(grad * value, axis=-1, keepdims=True)
        return (np.where(keep, value * (grad - inner), 0.0),)

    return scores.graph.record('masked_softmax', value, (scores,), backward)


def softmax(a):
    return masked_softmax(a, np.zeros(a.shape[-1:]))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise each vector along the last axis, then scale and shift."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError.for_shapes('layer_norm', x.shape, gain.shape, bias.shape)
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    value = normed * gain.value + bias.value

    def backward(grad):
        dnormed = grad * gain.value
        dx = inv_std * (dnormed - dnormed.mean(axis=-1, keepdims=True)
                        - normed * np.mean(dnormed * normed, axis=-1, keepdims=True))
        dgain = _unbroadcast(grad * normed, gain.shape)
        dbias = _unbroadcast(grad, bias.shape)
        return dx, dgain, dbias

    return x.graph.record('layer_norm', value, (x, gain, bias), backward)


# ============== BACKWARD ==============
def backward(graph, loss):
    """Gradients of a scalar node w.r.t. every trainable named leaf.

    Frozen leaves and constants are absent from the returned map; a trainable
    leaf that the loss does not depend on gets an all-zero gradient.
    """
    if loss.graph is not graph:
        raise ContractError('loss node belongs to another graph')
    if loss.value.size != 1:
        raise ContractError(f'loss must be scalar, got shape {loss.shape}')
    grads = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    for node in reversed(graph.nodes[:loss.index + 1]):
        grad = grads[node.index]
        if grad is None or node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if not parent.requires_grad or parent_grad is None:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = np.array(parent_grad, dtype=np.float64)
            else:
                grads[parent.index] = grads[parent.index] + parent_grad
    result = {}
    for name, leaf in graph.parameters.items():
        if not leaf.requires_grad:
            continue
        grad = grads[leaf.index] if leaf.index <= loss.index else None
        result[name] = np.zeros_like(leaf.value) if grad is None else grad
    return result


# ============== PARAMETERS ==============
class ParameterSet:
    """Named float64 arrays with frozen flags, bound into graphs as leaves."""

    def __init__(self):
        self.arrays = {}
        self.frozen = set()

    def add(self, name, array, trainable=True):
        if name in self.arrays:
            raise ContractError(f'duplicate parameter {name!r}')
        self.arrays[name] = np.ascontiguousarray(array, dtype=np.float64)
        if not trainable:
            self.frozen.add(name)
        return self.arrays[name]

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def is_trainable(self, name):
        return name not in self.frozen

    def freeze(self, prefix=''):
        self.frozen.update(name for name in self.arrays if name.startswith(prefix))

    def unfreeze(self, prefix='', keep=()):
        """Make matching parameters trainable again, except names listed in `keep`."""
        for name in list(self.frozen):
            if name.startswith(prefix) and name not in keep:
                self.frozen.discard(name)

    def bind(self, graph):
        return {name: graph.parameter(name, array, name not in self.frozen)
                for name, array in self.arrays.items()}

    def snapshot(self):
        return {name: array.copy() for name, array in self.arrays.items()}

    def restore(self, snapshot):
        for name, array in snapshot.items():
            self.arrays[name][...] = array

    def load(self, arrays, strict=True):
        """Copy arrays into matching parameters; returns the names loaded."""
        loaded = []
        for name, array in arrays.items():
            if name not in self.arrays:
                if strict:
                    raise ContractError(f'unexpected parameter {name!r}')
                continue
            if self.arrays[name].shape != np.shape(array):
                raise DimensionError.for_shapes(f'load {name}', self.arrays[name].shape,
                                                np.shape(array))
            self.arrays[name][...] = array
            loaded.append(name)
        return loaded


# ============== GRADIENT CHECK ==============
@dataclass
class GradientReport:
    """Per-parameter maximum relative error of analytic vs numeric gradients"""
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def failed(self):
        return sorted(name for name, err in self.errors.items() if not err <= self.tolerance)

    @property
    def passed(self):
        return not self.failed


def relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(build_loss, params, tolerance=1e-4, step=1e-5, max_entries=None,
                    seed=0):
    """Compare backward() with central finite differences.

    `build_loss(graph, leaves)` must rebuild the scalar loss from the bound
    parameters. Frozen parameters are skipped and absent from the report.
    """
    graph = ValueGraph()
    loss = build_loss(graph, params.bind(graph))
    analytic = backward(graph, loss)
    rng = np.random.default_rng(seed)

    def evaluate():
        g = ValueGraph()
        return build_loss(g, params.bind(g)).item()

    report = GradientReport(tolerance)
    for name in params:
        if not params.is_trainable(name):
            continue
        array = params[name]
        flat = array.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + step
            upper = evaluate()
            flat[pos] = original - step
            lower = evaluate()
            flat[pos] = original
            numeric = (upper - lower) / (2.0 * step)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[pos], numeric)))
        report.errors[name] = worst
        if worst > tolerance:
            logger.warning('gradient check failed for %s: max relative error %.3e', name, worst)
    return report
