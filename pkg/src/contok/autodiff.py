"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation as a node in insertion order. Values
are computed eagerly when a node is created, and :meth:`Tape.forward` can
replay the whole tape after leaf values change, which is what the
finite-difference checker relies on.

Example::

    tape = Tape()
    x = tape.leaf(3.0, name="x")
    y = x * x
    tape.backward(y)[x.id]   # -> array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, node_id, message):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    name: str | None = None


class Var:
    """Handle to a node on a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    def __rmul__(self, other):
        return self.tape.apply("mul", other, self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, other)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __getitem__(self, index):
        return self.tape.apply("getitem", self, index=index)

    @property
    def T(self):
        return self.tape.apply("transpose", self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(node_id, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(node_id, f"cannot broadcast {a.shape} with {b.shape}") from None


def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _masked_logsumexp(x, mask, axis):
    if not np.all(np.any(mask, axis=axis)):
        raise ValueError("logsumexp over an empty set")
    masked = np.where(mask, x, -np.inf)
    top = masked.max(axis=axis, keepdims=True)
    top = np.where(np.isneginf(top), 0.0, top)
    out = top + np.log(np.where(mask, np.exp(masked - top), 0.0).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


# Forward rules: (node_id, input values, attrs) -> value
def _fwd_add(nid, a, b):
    _broadcast_shape(nid, a, b)
    return a + b


def _fwd_sub(nid, a, b):
    _broadcast_shape(nid, a, b)
    return a - b


def _fwd_mul(nid, a, b):
    _broadcast_shape(nid, a, b)
    return a * b


def _fwd_div(nid, a, b):
    _broadcast_shape(nid, a, b)
    return a / b


def _fwd_matmul(nid, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(nid, f"matmul of {a.shape} and {b.shape}")
    return a @ b


def _forward(nid, op, vals, attrs):
    if op == "add":
        return _fwd_add(nid, *vals)
    if op == "sub":
        return _fwd_sub(nid, *vals)
    if op == "mul":
        return _fwd_mul(nid, *vals)
    if op == "div":
        return _fwd_div(nid, *vals)
    if op == "matmul":
        return _fwd_matmul(nid, *vals)
    (x,) = vals[:1]
    if op == "neg":
        return -x
    if op == "transpose":
        return x.T
    if op == "reshape":
        shape = attrs["shape"]
        if int(np.prod(shape)) != x.size:
            raise ShapeError(nid, f"cannot reshape {x.shape} to {shape}")
        return x.reshape(shape)
    if op == "sum":
        return x.sum(axis=attrs["axis"], keepdims=attrs["keepdims"])
    if op == "relu":
        return np.maximum(x, 0.0)
    if op == "exp":
        return np.exp(x)
    if op == "log":
        return np.log(x)
    if op == "softmax":
        return _softmax(x, attrs["axis"])
    if op == "logsumexp":
        axis = attrs["axis"]
        mask = attrs["mask"]
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        elif mask.shape != x.shape:
            raise ShapeError(nid, f"mask shape {mask.shape} != input shape {x.shape}")
        return _masked_logsumexp(x, mask, axis)
    if op == "l2_normalize":
        norm = np.sqrt((x * x).sum(axis=attrs["axis"], keepdims=True))
        return x / np.maximum(norm, NORM_EPS)
    if op == "concat":
        try:
            return np.concatenate(vals, axis=attrs["axis"])
        except ValueError as exc:
            raise ShapeError(nid, str(exc)) from None
    if op == "getitem":
        return np.asarray(x[attrs["index"]])
    raise ValueError(f"unknown op {op!r}")


def _backward(op, g, vals, out, attrs):
    """Return gradients for each input, given the output gradient ``g``."""
    if op == "add":
        a, b = vals
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    if op == "sub":
        a, b = vals
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    if op == "mul":
        a, b = vals
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == "div":
        a, b = vals
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)
    if op == "matmul":
        a, b = vals
        return g @ b.T, a.T @ g
    x = vals[0]
    if op == "neg":
        return (-g,)
    if op == "transpose":
        return (g.T,)
    if op == "reshape":
        return (g.reshape(x.shape),)
    if op == "sum":
        axis = attrs["axis"]
        if axis is not None and not attrs["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    if op == "relu":
        # subgradient at exactly 0 is 0
        return (g * (x > 0.0),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / x,)
    if op == "softmax":
        axis = attrs["axis"]
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    if op == "logsumexp":
        axis = attrs["axis"]
        mask = attrs["mask"]
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        lse = np.expand_dims(out, axis)
        weights = np.exp(np.where(mask, x - lse, -np.inf))
        return (weights * np.expand_dims(g, axis),)
    if op == "l2_normalize":
        axis = attrs["axis"]
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        # below the clamp the op is a plain scaling by 1 / NORM_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            full = (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm
        return (np.where(norm < NORM_EPS, g / NORM_EPS, full),)
    if op == "concat":
        axis = attrs["axis"]
        splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.split(g, splits, axis=axis))
    if op == "getitem":
        gx = np.zeros_like(x)
        np.add.at(gx, attrs["index"], g)
        return (gx,)
    raise ValueError(f"no backward rule for {op!r}")


class Tape:
    """Append-only record of operations; insertion order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, attrs, value, name=None):
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(op, tuple(inputs), attrs, value, name))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name=None):
        """A differentiable input."""
        return self._push("leaf", (), {}, np.array(value, dtype=np.float64), name)

    def const(self, value, name=None):
        """A non-differentiable input (gradients are not reported for it)."""
        return self._push("const", (), {}, np.array(value, dtype=np.float64), name)

    def _as_var(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x
        return self.const(x)

    def apply(self, op, *args, **attrs):
        inputs = [self._as_var(a) for a in args]
        vals = [self.nodes[v.id].value for v in inputs]
        nid = len(self.nodes)
        value = _forward(nid, op, vals, attrs)
        return self._push(op, [v.id for v in inputs], attrs, value)

    def set_value(self, var, value):
        node = self.nodes[var.id]
        if node.op not in ("leaf", "const"):
            raise ValueError(f"node {var.id} is not an input")
        value = np.array(value, dtype=np.float64)
        if value.shape != node.value.shape:
            raise ShapeError(var.id, f"new value shape {value.shape} != {node.value.shape}")
        node.value = value

    def forward(self, outputs=None):
        """Recompute every non-input node in insertion order.

        Returns the values of ``outputs`` (a Var or list of Vars) if given.
        """
        for nid, node in enumerate(self.nodes):
            if node.op in ("leaf", "const"):
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            node.value = _forward(nid, node.op, vals, node.attrs)
        if outputs is None:
            return None
        if isinstance(outputs, Var):
            return outputs.value
        return [o.value for o in outputs]

    def backward(self, loss):
        """Gradients of scalar ``loss`` with respect to every leaf.

        Returns a dict mapping leaf node id to a gradient array shaped like
        the leaf. Leaves the loss does not depend on get zeros.
        """
        out = self.nodes[loss.id]
        if out.value.size != 1:
            raise ValueError(f"loss node {loss.id} is not scalar (shape {out.value.shape})")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(out.value)}
        for nid in range(loss.id, -1, -1):
            node = self.nodes[nid]
            if node.op in ("leaf", "const"):
                continue
            g = grads.pop(nid, None)
            if g is None:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, _backward(node.op, g, vals, node.value, node.attrs)):
                if self.nodes[i].op == "const":
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {
            nid: grads.get(nid, np.zeros_like(node.value))
            for nid, node in enumerate(self.nodes)
            if node.op == "leaf"
        }

    def leaves(self):
        return [Var(self, i) for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def min_abs_relu_input(self):
        """Smallest |x| fed to any ReLU; used to avoid kinks in gradient checks."""
        best = np.inf
        for node in self.nodes:
            if node.op == "relu":
                x = self.nodes[node.inputs[0]].value
                if x.size:
                    best = min(best, float(np.abs(x).min()))
        return best


# Functional wrappers for the op set.

def matmul(a, b):
    return a.tape.apply("matmul", a, b)


def reshape(x, shape):
    return x.tape.apply("reshape", x, shape=tuple(shape))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return x.tape.apply("sum", x, axis=axis, keepdims=keepdims)


def relu(x):
    return x.tape.apply("relu", x)


def exp(x):
    return x.tape.apply("exp", x)


def log(x):
    return x.tape.apply("log", x)


def softmax(x, axis=-1):
    return x.tape.apply("softmax", x, axis=axis)


def logsumexp(x, axis=-1, mask=None):
    """Log-sum-exp along ``axis``, optionally restricted to ``mask`` entries."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return x.tape.apply("logsumexp", x, axis=axis, mask=mask)


def l2_normalize(x, axis=-1):
    return x.tape.apply("l2_normalize", x, axis=axis)


def concat(xs, axis=0):
    tape = xs[0].tape
    return tape.apply("concat", *xs, axis=axis)


def finite_diff(f: Callable[[], float], params, step=1e-5, set_value=None):
    """Central-difference gradient of ``f`` with respect to ``params``.

    ``params`` is a list of numpy arrays that ``f`` reads; they are perturbed
    in place one coordinate at a time and restored afterwards. ``set_value``,
    if given, is called as ``set_value(index, array)`` after each perturbation
    (e.g. to push the value into a tape).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = []
    for pi, p in enumerate(params):
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            if set_value is not None:
                set_value(pi, p)
            fp = f()
            flat[j] = orig - step
            if set_value is not None:
                set_value(pi, p)
            fm = f()
            flat[j] = orig
            if set_value is not None:
                set_value(pi, p)
            gflat[j] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state: AdamState, lr):
    """Bias-corrected Adam step, in place on the arrays in ``params``.

    ``params`` and ``grads`` are dicts keyed by parameter name.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(name, f"gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
