"""Minimal define-by-run reverse-mode autodiff over float64 arrays.

Operations executed inside an active :class:`Tape` are recorded when any
input requires a gradient. ``tape.backward(loss)`` walks the record in
reverse and accumulates into ``.grad`` of every leaf that requires one. A
tape can be consumed once; ``reset()`` clears it for the next step.

Shapes must match exactly for elementwise ops; the only broadcast is
``bias_add`` (row vector over a matrix). Python scalars are accepted by
``scale``/``shift`` and the arithmetic operators that forward to them.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "StaleTapeError",
    "add", "sub", "mul", "matmul", "bias_add", "relu", "sum", "mean", "square",
    "exp", "log", "sigmoid", "scale", "shift", "slice_cols",
    "gaussian_log_likelihood", "bernoulli_log_likelihood", "softmax_cross_entropy",
    "backward", "no_grad", "numerical_grad", "check_grad",
]

_active: list["Tape"] = []


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        if self._consumed:
            raise StaleTapeError("tape already consumed by backward(); call reset() first")
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def reset(self):
        self._nodes.clear()
        self._consumed = False

    def _record(self, out: Tensor, inputs, vjp):
        if self._consumed:
            raise StaleTapeError("recording onto a consumed tape; call reset() first")
        out.requires_grad = True
        out._tape = self
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise StaleTapeError("backward() already ran on this tape; call reset() first")
        if loss._tape is not self and loss.requires_grad:
            raise ValueError("loss was not recorded on this tape")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        if loss._tape is None and loss.requires_grad:
            # the loss is itself a leaf
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def backward(loss: Tensor):
    """Backpropagate through the tape that recorded ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        # constant loss: nothing recorded, all gradients zero
        return
    loss._tape.backward(loss)


def _op(data, inputs, vjp):
    out = Tensor(data)
    if _active and any(t.requires_grad for t in inputs):
        _active[-1]._record(out, inputs, vjp)
    return out


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# --- primitives ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _op(
        a.data * b.data, (a, b),
        lambda g: (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None),
    )


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _op(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
    )


def bias_add(x, bias):
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add: cannot add bias {bias.shape} to {x.shape}")
    return _op(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum(x, axis=None):
    x = _as_tensor(x)
    if axis is not None and not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.shape}")
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _op(np.sum(x.data, axis=axis), (x,), vjp)


def mean(x, axis=None):
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def square(x):
    x = _as_tensor(x)
    return _op(np.square(x.data), (x,), lambda g: (2.0 * x.data * g,))


def exp(x):
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _op(y, (x,), lambda g: (g * y,))


def log(x):
    x = _as_tensor(x)
    return _op(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _op(y, (x,), lambda g: (g * y * (1.0 - y),))


def scale(x, c: float):
    x = _as_tensor(x)
    c = float(c)
    return _op(x.data * c, (x,), lambda g: (g * c,))


def shift(x, c: float):
    x = _as_tensor(x)
    return _op(x.data + float(c), (x,), lambda g: (g,))


def slice_cols(x, start: int, stop: int):
    x = _as_tensor(x)
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: bad column range [{start}, {stop}) for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _op(x.data[:, start:stop], (x,), vjp)


# --- fused likelihoods --------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_likelihood(x, mean, variance, axis=None):
    """sum of log N(x_i; mean_i, variance_i); ``variance`` is a scalar or a tensor."""
    x, mean = _as_tensor(x), _as_tensor(mean)
    _same_shape("gaussian_log_likelihood", x, mean)
    if _is_scalar(variance):
        if not variance > 0:
            raise ValueError(f"gaussian_log_likelihood: variance must be > 0, got {variance}")
        var_t = None
        var = np.full(x.shape, float(variance))
    else:
        var_t = _as_tensor(variance)
        _same_shape("gaussian_log_likelihood", x, var_t)
        var = var_t.data
        if not np.all(var > 0):
            raise ValueError("gaussian_log_likelihood: variance must be > 0 elementwise")
    r = x.data - mean.data
    terms = -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * r * r / var
    shape = x.shape

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    def vjp(g):
        g = expand(g)
        gx = -g * r / var
        gv = g * (0.5 * r * r / var - 0.5) / var
        return gx, -gx, gv

    inputs = (x, mean) if var_t is None else (x, mean, var_t)
    return _op(np.sum(terms, axis=axis), inputs, lambda g: vjp(g)[: len(inputs)])


def bernoulli_log_likelihood(x, logits, axis=None):
    """sum of x*log(sigmoid(l)) + (1-x)*log(1-sigmoid(l)), stable for large |l|."""
    x, logits = _as_tensor(x), _as_tensor(logits)
    _same_shape("bernoulli_log_likelihood", x, logits)
    if not np.all((x.data == 0.0) | (x.data == 1.0)):
        raise ValueError("bernoulli_log_likelihood: targets must be binary (0 or 1)")
    l = logits.data
    softplus = np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))
    terms = x.data * l - softplus
    shape = x.shape

    def vjp(g):
        g = np.broadcast_to(g if axis is None else np.expand_dims(g, axis), shape)
        return None, g * (x.data - _sigmoid(l))

    return _op(np.sum(terms, axis=axis), (x, logits), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _op(loss, (logits,), vjp)


# --- gradient checking ----------------------------------------------------------

def numerical_grad(fn, inputs, eps: float = 1e-5):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every input element."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    tape = Tape()
    with tape:
        loss = fn(*inputs)
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


@contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


def check_grad(fn, inputs, eps: float = 1e-5, rtol: float = 1e-5, atol: float = 1e-8):
    """Compare backprop against central differences; raise AssertionError on mismatch.

    Each element passes if it is within ``rtol`` relative or ``atol`` absolute.
    Returns the largest relative discrepancy seen.
    """
    analytic = analytic_grad(fn, inputs)
    with no_grad():
        numeric = numerical_grad(fn, inputs, eps)
    worst = 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        diff = np.abs(a - n)
        rel = diff / np.maximum(np.abs(n), 1e-300)
        bad = (diff > atol) & (rel > rtol)
        if np.any(bad):
            i = np.flatnonzero(bad.reshape(-1))[0]
            raise AssertionError(
                f"gradient mismatch in input {k} element {i}: "
                f"analytic {a.reshape(-1)[i]!r} vs numeric {n.reshape(-1)[i]!r}"
            )
        ok = diff > atol
        if np.any(ok):
            worst = max(worst, float(rel[ok].max()))
    return worst
