"""Tape-based reverse-mode differentiation over the tensor kernels.

A :class:`Graph` is rebuilt for every forward pass.  Leaves come from
``graph.param(name)`` (trainable, gradients reported) and
``graph.input(name)`` (bound data).  Every op appends a :class:`Node` to the
tape; :meth:`Graph.backward` walks the tape in reverse.

    g = Graph(params, inputs={"x": x})
    loss = total(sigmoid(g.input("x")) * g.param("a"))
    grads = g.backward(loss)
"""
import contextlib

import numpy as np

from . import tensor as T


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("graph", "value", "parents", "vjp", "op", "name", "index")

    def __init__(self, graph, value, parents=(), vjp=None, op="leaf", name=None):
        self.graph = graph
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.name = name
        self.index = len(graph.nodes)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


# gradient-rule corruption hook for negative-control tests: op name -> factor
_corrupt = {}


@contextlib.contextmanager
def corrupted_gradient(op, factor=1.5):
    """Temporarily scale the gradient rule of ``op`` by ``factor``."""
    _corrupt[op] = factor
    try:
        yield
    finally:
        _corrupt.pop(op, None)


class Graph:
    """One recorded forward evaluation.

    ``params`` maps names to arrays (never modified here); ``buffers`` holds
    non-trainable state such as batch-norm running statistics, which
    training-mode batch norm updates in place.
    """

    def __init__(self, params=None, inputs=None, buffers=None, training=False):
        self.params = params if params is not None else {}
        self.inputs = inputs if inputs is not None else {}
        self.buffers = buffers if buffers is not None else {}
        self.training = training
        self.nodes = []
        self._leaves = {}

    def _record(self, node):
        self.nodes.append(node)
        return node

    def param(self, name):
        node = self._leaves.get(name)
        if node is None:
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            node = self._record(Node(self, self.params[name], op="param", name=name))
            self._leaves[name] = node
        return node

    def input(self, name):
        key = "input:" + name
        node = self._leaves.get(key)
        if node is None:
            if name not in self.inputs:
                raise GraphError(f"input {name!r} is not bound")
            node = self._record(Node(self, np.asarray(self.inputs[name]), op="input", name=name))
            self._leaves[key] = node
        return node

    def constant(self, value):
        return self._record(Node(self, np.asarray(value), op="constant"))

    def op(self, op, value, parents, vjp):
        return self._record(Node(self, value, parents, vjp, op))

    def backward(self, loss, seed=None, wrt_inputs=False):
        """Accumulate gradients from ``loss`` back to the leaves.

        Returns a dict mapping every parameter touched by the forward pass to
        its gradient (and ``"input:<name>"`` entries when ``wrt_inputs``).
        """
        if not self.nodes or loss.graph is not self:
            raise GraphError("backward called before a forward pass on this graph")
        if seed is None:
            if loss.value.size != 1:
                raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
            seed = np.ones_like(loss.value)
        grads = [None] * len(self.nodes)
        grads[loss.index] = np.asarray(seed, dtype=loss.value.dtype)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            factor = _corrupt.get(node.op)
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if factor is not None:
                    pg = pg * factor
                i = parent.index
                grads[i] = pg if grads[i] is None else grads[i] + pg
        out = {}
        for key, leaf in self._leaves.items():
            if key.startswith("input:") and not wrt_inputs:
                continue
            g = grads[leaf.index]
            out[key] = np.zeros_like(leaf.value) if g is None else g
        return out


def forward(fn, params=None, inputs=None, buffers=None, training=False):
    """Run ``fn(graph)`` on a fresh graph; returns ``(graph, output_node)``."""
    g = Graph(params, inputs, buffers, training)
    return g, fn(g)


def backward(graph, loss, seed=None):
    return graph.backward(loss, seed)


# ---------------------------------------------------------------- ops


def conv3d(x, w, b=None, stride=1, padding=0, dilation=1):
    g = x.graph
    out = T.conv3d(x.value, w.value, None if b is None else b.value, stride, padding, dilation)
    in_shape, kernel = x.value.shape, w.value.shape[2:]

    def vjp(gout):
        gx = T.conv3d_grad_input(gout, w.value, in_shape, stride, padding, dilation)
        gw = T.conv3d_grad_weight(x.value, gout, kernel, stride, padding, dilation)
        if b is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if b is None else (x, w, b)
    return g.op("conv3d", out, parents, vjp)


def conv_transpose3d(x, w, b=None, stride=2, padding=0, output_padding=0):
    g = x.graph
    out = T.conv_transpose3d(x.value, w.value, None if b is None else b.value, stride, padding, output_padding)
    kernel = w.value.shape[2:]

    def vjp(gout):
        gx = T.conv3d(gout, w.value, None, stride, padding)
        # convT(x, w) = conv3d_grad_input(x, w), so its weight gradient swaps roles
        gw = T.conv3d_grad_weight(gout, x.value, kernel, stride, padding)
        if b is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if b is None else (x, w, b)
    return g.op("conv_transpose3d", out, parents, vjp)


def global_avg_pool(x):
    shape = x.value.shape
    count = shape[2] * shape[3] * shape[4]

    def vjp(gout):
        return (np.broadcast_to(gout / count, shape).copy(),)

    return x.graph.op("global_avg_pool", T.global_avg_pool(x.value), (x,), vjp)


def concat_channels(xs):
    xs = list(xs)
    out = T.concat_channels([x.value for x in xs])
    bounds = np.cumsum([0] + [x.value.shape[1] for x in xs])

    def vjp(gout):
        return tuple(gout[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return xs[0].graph.op("concat", out, xs, vjp)


def relu(x):
    mask = x.value > 0

    def vjp(gout):
        return (gout * mask,)

    return x.graph.op("relu", x.value * mask, (x,), vjp)


def sigmoid(x):
    s = T.sigmoid(x.value)

    def vjp(gout):
        return (gout * s * (1 - s),)

    return x.graph.op("sigmoid", s, (x,), vjp)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_channels(x):
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(gout):
        return (s * (gout - (gout * s).sum(axis=1, keepdims=True)),)

    return x.graph.op("softmax", s, (x,), vjp)


def mul(a, b):
    out = T.broadcast_mul(a.value, b.value)
    sa, sb = a.value.shape, b.value.shape

    def vjp(gout):
        return T.unbroadcast(gout * b.value, sa), T.unbroadcast(gout * a.value, sb)

    return a.graph.op("mul", out, (a, b), vjp)


def add(*xs):
    out = xs[0].value
    for x in xs[1:]:
        out = T.add(out, x.value)
    shapes = [x.value.shape for x in xs]

    def vjp(gout):
        return tuple(T.unbroadcast(gout, s) for s in shapes)

    return xs[0].graph.op("add", out, xs, vjp)


def scale(x, factor):
    def vjp(gout):
        return (gout * factor,)

    return x.graph.op("scale", x.value * factor, (x,), vjp)


def total(x):
    shape = x.value.shape

    def vjp(gout):
        return (np.full(shape, gout.reshape(()), dtype=x.value.dtype),)

    return x.graph.op("sum", np.asarray(x.value.sum()), (x,), vjp)


def inner(x, c):
    """``<x, c>`` for a constant array ``c`` (used to seed random projections)."""
    c = np.asarray(c)

    def vjp(gout):
        return (gout.reshape(()) * c,)

    return x.graph.op("inner", np.asarray((x.value * c).sum()), (x,), vjp)


def batch_norm(x, gamma, beta, running_mean, running_var, momentum=0.1, eps=1e-5):
    """Batch norm; ``running_mean``/``running_var`` are plain arrays."""
    training = x.graph.training
    out, cache = T.batch_norm(
        x.value, gamma.value, beta.value, running_mean, running_var, training, momentum, eps
    )

    def vjp(gout):
        return T.batch_norm_backward(gout, gamma.value, cache)

    return x.graph.op("batch_norm", out, (x, gamma, beta), vjp)


# ------------------------------------------------------------ checking


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _kinks(graph):
    """On/off pattern of every ReLU on the tape."""
    return [n.parents[0].value > 0 for n in graph.nodes if n.op == "relu"]


def _same_kinks(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn, params, inputs=None, buffers=None, eps=1e-4, max_entries=None, seed=0, report=False):
    """Central-difference check of the gradients of the scalar ``fn(graph)``.

    The step for an entry ``p`` is ``eps * max(1, |p|)``.  ``eps`` may be a
    sequence of steps tried in order.  A step whose stencil flips any ReLU
    between on and off straddles a kink, where the function has no
    derivative to compare against, so it is set aside while a kink-free step
    exists; otherwise each entry keeps its best agreement over the steps
    (roundoff spoils a narrow step, a wrong gradient disagrees at all of
    them).  Later steps are skipped once an entry agrees to 1e-7.

    ``max_entries`` caps the number of randomly chosen entries checked per
    parameter (all entries when ``None``).  Returns the maximum relative
    error over the checked entries, or a per-parameter dict of maxima when
    ``report``.  Runs in inference mode so batch norm uses fixed statistics.
    """
    steps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    buffers = {k: np.array(v, dtype=np.float64) for k, v in (buffers or {}).items()}

    def run():
        g, out = forward(fn, params, inputs, {k: v.copy() for k, v in buffers.items()})
        if out.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {out.value.shape}")
        return g, out

    g, out = run()
    base = _kinks(g)
    analytic = g.backward(out)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in sorted(analytic):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            old = flat[i]
            smooth, kinked = np.inf, np.inf
            for step in steps:
                h = step * max(1.0, abs(old))
                hi, lo = old + h, old - h
                flat[i] = hi
                g_up, up = run()
                flat[i] = lo
                g_down, down = run()
                flat[i] = old
                # divide by the step actually taken, not the nominal one
                err = float(_rel(ga[i], (float(up.value) - float(down.value)) / (hi - lo)))
                if _same_kinks(base, _kinks(g_up)) and _same_kinks(base, _kinks(g_down)):
                    smooth = min(smooth, err)
                else:
                    kinked = min(kinked, err)
                if smooth < 1e-7:
                    break
            worst = max(worst, smooth if np.isfinite(smooth) else kinked)
        errors[name] = worst
    if report:
        return errors
    return max(errors.values()) if errors else 0.0
