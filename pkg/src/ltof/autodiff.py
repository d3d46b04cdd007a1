"""Reverse-mode automatic differentiation on a flat tape of numpy ops.

Every primitive appends one node to a :class:`Tape`; node inputs always
reference earlier nodes, so a single reverse sweep over the tape computes
gradients for everything.  Only the ops the trainers need are provided:
dense linear algebra, ReLU/sin/square elementwise maps, reductions, dropout
with an explicit mask, and batch normalization in both modes.
"""

import numpy as np

__all__ = [
    "Tape", "Var", "constant", "add", "sub", "mul", "neg", "matmul",
    "relu", "hinge", "sin", "square", "reduce_sum", "reduce_mean",
    "dropout", "batch_norm_train", "batch_norm_infer", "backward",
    "grad_of", "numeric_gradient",
]


class Tape:
    """Append-only sequence of primitive-op records."""

    def __init__(self):
        self.values = []    # ndarray per node
        self.parents = []   # tuple of parent node ids per node
        self.vjps = []      # callable(grad_out) -> tuple of parent grads, or None for leaves

    def __len__(self):
        return len(self.values)

    def _append(self, value, parents=(), vjp=None):
        for p in parents:
            assert p < len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1)


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.tape.values[self.idx].shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


def constant(tape, value):
    """Lift a numpy array (or scalar) onto the tape as a leaf."""
    return tape._append(np.asarray(value, dtype=np.float64))


def _lift(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return constant(tape, x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._append(out, (a.idx, b.idx), vjp)


def sub(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape._append(out, (a.idx, b.idx), vjp)


def mul(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    out = va * vb

    def vjp(g):
        return _unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)

    return tape._append(out, (a.idx, b.idx), vjp)


def neg(a):
    out = -a.value

    def vjp(g):
        return (-g,)

    return a.tape._append(out, (a.idx,), vjp)


def matmul(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ValueError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
    out = va @ vb

    def vjp(g):
        return g @ vb.T, va.T @ g

    return tape._append(out, (a.idx, b.idx), vjp)


def relu(a):
    mask = a.value > 0
    out = np.where(mask, a.value, 0.0)

    def vjp(g):
        return (g * mask,)

    return a.tape._append(out, (a.idx,), vjp)


# max(., 0): same map as the activation, kept under the constraint-penalty name.
hinge = relu


def sin(a):
    va = a.value
    out = np.sin(va)

    def vjp(g):
        return (g * np.cos(va),)

    return a.tape._append(out, (a.idx,), vjp)


def square(a):
    va = a.value
    out = va * va

    def vjp(g):
        return (2.0 * g * va,)

    return a.tape._append(out, (a.idx,), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    va = a.value
    out = va.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, va.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, va.shape).copy(),)

    return a.tape._append(np.asarray(out, dtype=np.float64), (a.idx,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    va = a.value
    count = va.size if axis is None else va.shape[axis]
    out = va.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, va.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, va.shape).copy(),)

    return a.tape._append(np.asarray(out, dtype=np.float64), (a.idx,), vjp)


def dropout(a, mask, keep_prob):
    """Inverted dropout with a caller-supplied 0/1 mask."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    scale = mask / keep_prob
    out = a.value * scale

    def vjp(g):
        return (g * scale,)

    return a.tape._append(out, (a.idx,), vjp)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Batch normalization using the batch's own statistics.

    Returns (out, batch_mean, batch_var); the caller owns the running-stat
    update.  Variance is the biased (population) estimate.
    """
    tape = x.tape
    gamma, beta = _lift(tape, gamma), _lift(tape, beta)
    vx = x.value
    if vx.ndim != 2:
        raise ValueError(f"batch norm expects a 2-d batch, got shape {vx.shape}")
    n = vx.shape[0]
    mean = vx.mean(axis=0)
    var = vx.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (vx - mean) * inv
    out = xhat * gamma.value + beta.value
    gv = gamma.value

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gv
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    var_node = tape._append(out, (x.idx, gamma.idx, beta.idx), vjp)
    return var_node, mean, var


def batch_norm_infer(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Batch normalization using frozen running statistics (affine in x)."""
    tape = x.tape
    gamma, beta = _lift(tape, gamma), _lift(tape, beta)
    rm = np.asarray(running_mean, dtype=np.float64)
    inv = 1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps)
    vx = x.value
    xhat = (vx - rm) * inv
    out = xhat * gamma.value + beta.value
    gv = gamma.value

    def vjp(g):
        return g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return tape._append(out, (x.idx, gamma.idx, beta.idx), vjp)


def backward(tape, loss):
    """Reverse sweep from a scalar loss node; returns grads indexed by node id."""
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if np.asarray(loss.value).ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {np.asarray(loss.value).shape}")
    grads = [None] * len(tape)
    grads[loss.idx] = np.asarray(1.0)
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None or tape.vjps[i] is None:
            continue
        parent_grads = tape.vjps[i](g)
        for p, pg in zip(tape.parents[i], parent_grads):
            if grads[p] is None:
                grads[p] = pg.copy() if isinstance(pg, np.ndarray) else np.asarray(pg)
            else:
                grads[p] = grads[p] + pg
    return grads


def grad_of(grads, var):
    """Gradient for `var` out of a backward() result (zeros if unused)."""
    g = grads[var.idx]
    if g is None:
        return np.zeros_like(var.value)
    return np.asarray(g, dtype=np.float64).reshape(var.value.shape)


def numeric_gradient(f, x, step=1e-5):
    """Central finite differences of a scalar function at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g
