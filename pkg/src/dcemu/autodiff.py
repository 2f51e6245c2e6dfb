"""
Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array and, when gradients are enabled,
remembers the tensors it was computed from together with a closure that maps
the upstream gradient to gradients for each parent.  ``Tensor.backward`` walks
the graph in reverse topological order and accumulates into the ``grad`` of
leaf tensors that require gradients (normally :class:`Parameter` objects).

Only the operations needed by the emulator networks are provided: elementwise
arithmetic with broadcasting, reductions, a pixelwise dense layer, a 3x3
"same" convolution, ReLU/sigmoid/softplus, the concrete dropout gate, the
variational regularizer and Adam.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, TrainingError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor tagged with its role in the network."""

    __slots__ = ("role", "name")

    ROLES = ("weight", "bias", "dropout-logit")

    def __init__(self, data, role="weight", name=""):
        if role not in self.ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        super().__init__(data, requires_grad=True)
        self.role = role
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name or self.role}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def add_same(a, b):
    """Addition that refuses to broadcast (skip connections)."""
    if a.shape != b.shape:
        raise DimensionError(f"add: left operand {a.shape} != right operand {b.shape}")
    return add(a, b)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    x = a.data
    return _make(x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    return _make(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def clip(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def where(mask, a, b):
    """Select from ``a`` where mask else ``b``; ``mask`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                            _unbroadcast(np.where(mask, 0.0, g), sb)))


# ---------------------------------------------------------------------------
# reductions and reshaping


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take_channels(a, start, stop):
    """Slice ``a[..., start:stop]``."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), backward)


# ---------------------------------------------------------------------------
# layers


def dense(x, weights, bias):
    """Affine map over the last axis: ``x @ W + b``.

    ``x`` may carry any number of leading axes, which lets the same layer run
    pixelwise over ``[B, H, W, C]`` rasters.
    """
    if weights.ndim != 2:
        raise DimensionError(f"dense: weights must be 2-D, got shape {weights.shape}")
    f_in, f_out = weights.shape
    if x.shape[-1] != f_in:
        raise DimensionError(f"dense: input has {x.shape[-1]} features but weights expect {f_in}")
    if bias.shape != (f_out,):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({f_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, f_in)
    w = weights.data
    out = (x2 @ w + bias.data).reshape(*lead, f_out)

    def backward(g):
        g2 = g.reshape(-1, f_out)
        gx = (g2 @ w.T).reshape(*lead, f_in) if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, weights, bias), backward)


def _im2col3(x):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 3, 3, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, 9 * c)


def conv2d_same(x, kernel, bias):
    """3x3 cross-correlation with zero padding; output keeps ``H`` and ``W``."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d_same: input must be [B,H,W,C], got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d_same: kernel must be [3,3,C_in,C_out], got {kernel.shape}")
    b, h, w, c_in = x.shape
    if kernel.shape[2] != c_in:
        raise DimensionError(f"conv2d_same: input has {c_in} channels but kernel expects {kernel.shape[2]}")
    c_out = kernel.shape[3]
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d_same: bias shape {bias.shape} != ({c_out},)")
    cols = _im2col3(x.data)
    kmat = kernel.data.reshape(9 * c_in, c_out)
    out = (cols @ kmat + bias.data).reshape(b, h, w, c_out)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(b, h, w, 3, 3, c_in)
            gxp = np.zeros((b, h + 2, w + 2, c_in))
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gk, g2.sum(axis=0)

    return _make(out, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# concrete dropout


def logit(p):
    return math.log(p) - math.log1p(-p)


@dataclass
class ConcreteDropoutLayer:
    """Learnable-rate dropout relaxed with the concrete distribution.

    ``weight_scale`` multiplies the squared weight norm of the following layer
    and ``dropout_scale`` the Bernoulli entropy of the rate, see
    :func:`kl_regularizer`.
    """

    logit: Parameter
    in_features: int
    temperature: float = 0.1
    weight_scale: float = 0.0
    dropout_scale: float = 0.0

    @classmethod
    def create(cls, in_features, init_rate=0.1, temperature=0.1, name=""):
        if temperature <= 0:
            raise DomainError("temperature must be positive")
        return cls(Parameter(np.array(logit(init_rate)), role="dropout-logit", name=name),
                   in_features, temperature)

    @property
    def rate(self):
        return float(_sigmoid(self.logit.data))

    def set_scales(self, length_scale, tau, n):
        """Regularizer scales for a training set of ``n`` examples."""
        self.weight_scale = length_scale / n
        self.dropout_scale = 2.0 / (tau * n)


def concrete_gate(layer, activations, noise):
    """Apply a relaxed dropout mask drawn from uniform ``noise``.

    The relaxed drop indicator is
    ``z = sigmoid((log p - log(1-p) + log u - log(1-u)) / temperature)``
    whose mean over ``u`` is the drop rate ``p``; surviving activations are
    rescaled by ``1/(1-p)`` so the layer is unbiased.  ``noise`` may be the
    activation shape or anything broadcastable to it (one draw per channel).
    """
    noise = np.asarray(noise, dtype=DTYPE)
    if np.any(noise <= 0.0) or np.any(noise >= 1.0):
        raise DomainError("concrete_gate: noise must lie strictly inside (0, 1)")
    try:
        np.broadcast_shapes(noise.shape, activations.shape)
    except ValueError:
        raise DimensionError(f"concrete_gate: noise {noise.shape} does not broadcast "
                             f"to activations {activations.shape}") from None
    drop = drop_gate(layer, noise)
    p = sigmoid(layer.logit)
    keep = (1.0 - drop) / (1.0 - p)
    return activations * keep


def drop_gate(layer, noise):
    """The relaxed drop indicator ``z`` as a differentiable tensor."""
    noise_logit = np.log(noise) - np.log1p(-noise)
    return sigmoid((layer.logit + noise_logit) * (1.0 / layer.temperature))


def bernoulli_entropy(logit_t):
    """H(p) for p = sigmoid(logit), in nats."""
    p = sigmoid(logit_t)
    log_p = -softplus(-logit_t)
    log_q = -softplus(logit_t)
    return -(p * log_p + (1.0 - p) * log_q)


def kl_regularizer(pairs):
    """Variational regularizer summed over ``(dropout_layer, weights)`` pairs.

    Each pair contributes
    ``weight_scale * ||W||^2 / (1-p) - dropout_scale * K * H(p)``
    with ``K`` the number of input features of the dropped layer.
    """
    total = Tensor(0.0)
    for layer, weights in pairs:
        p = sigmoid(layer.logit)
        if layer.weight_scale:
            total = total + layer.weight_scale * tsum(weights * weights) / (1.0 - p)
        if layer.dropout_scale:
            total = total - layer.dropout_scale * layer.in_features * bernoulli_entropy(layer.logit)
    return total


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam; zeroes gradients after each step."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for {p.role} parameter {p.name!r}",
                                    role=p.role, term=p.name)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def grad_check(fn, params, step=1e-6, tolerance=1e-5, max_coords=None, rng=None, floor=1e-8):
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph on every call.  Relative error per coordinate
    is ``|a - n| / max(|a|, |n|, floor)``.  With ``max_coords`` only that many
    randomly chosen coordinates per parameter are probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = np.zeros_like(p.data)
    out = fn()
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar output")
    out.backward()
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(0.0, tolerance=tolerance)
    with no_grad():
        for idx, (p, ga) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for k in coords:
                orig = flat[k]
                flat[k] = orig + step
                f_plus = fn().item()
                flat[k] = orig - step
                f_minus = fn().item()
                flat[k] = orig
                num = (f_plus - f_minus) / (2.0 * step)
                a = ga.reshape(-1)[k]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            name = getattr(p, "name", "") or f"param{idx}"
            report.per_parameter[name] = worst
            report.max_rel_error = max(report.max_rel_error, worst)
    for p in params:
        p.grad = np.zeros_like(p.data)
    return report
