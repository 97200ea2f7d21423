"""Array-valued reverse-mode tape plus a forward-mode jet layer.

The tape differentiates scalar losses with respect to parameter arrays.
Input derivatives (gradients, diagonal second derivatives) are obtained by
propagating jets -- (value, tangent, second-tangent) triples -- through the
same operations, so losses containing input derivatives remain
differentiable with respect to parameters (reverse over forward).

Every operation accepts either a ``Var`` or a plain numpy array / scalar;
plain operands are treated as constants and receive no gradient.
"""

from __future__ import annotations

import numpy as np


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Var:
    """Node of the recorded computation graph."""

    # keep numpy from hijacking ndarray <op> Var
    __array_ufunc__ = None
    __slots__ = ("value", "grad", "_parents")

    def __init__(self, value, parents=()):
        self.value = _as_array(value)
        self.grad = None
        # parents: tuple of (Var, vjp) where vjp maps output grad -> contribution
        self._parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)


def value_of(x):
    """Underlying numpy value of a Var or constant."""
    return x.value if isinstance(x, Var) else _as_array(x)


def _make(value, *pairs):
    """Build a Var recording only the Var operands among ``pairs``."""
    parents = tuple((p, vjp) for p, vjp in pairs if isinstance(p, Var))
    if not parents:
        return value  # pure-constant expression stays a plain array
    return Var(value, parents)


# -- primitive operations ------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _make(
        out,
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    )


def neg(a):
    return _make(-value_of(a), (a, lambda g: -g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _make(
        av * bv,
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    )


def power(a, p):
    av = value_of(a)
    out = av**p
    return _make(out, (a, lambda g: g * (p * av ** (p - 1))))


def matmul(a, b):
    """a: (..., m, k) against b: (k, n); b is always a 2-D matrix here."""
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def vjp_a(g):
        return g @ bv.T

    def vjp_b(g):
        return av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return _make(out, (a, vjp_a), (b, vjp_b))


def exp(a):
    ev = np.exp(value_of(a))
    return _make(ev, (a, lambda g: g * ev))


def log(a):
    av = value_of(a)
    return _make(np.log(av), (a, lambda g: g / av))


def log1p(a):
    av = value_of(a)
    return _make(np.log1p(av), (a, lambda g: g / (1.0 + av)))


def sqrt(a):
    sv = np.sqrt(value_of(a))
    return _make(sv, (a, lambda g: g * (0.5 / sv)))


def tanh(a):
    tv = np.tanh(value_of(a))
    return _make(tv, (a, lambda g: g * (1.0 - tv * tv)))


def sigmoid(a):
    """Numerically stable logistic function."""
    av = value_of(a)
    sv = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                  np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
    return _make(sv, (a, lambda g: g * (sv * (1.0 - sv))))


def softplus(a):
    """log(1 + exp(a)) without overflow."""
    av = value_of(a)
    out = np.logaddexp(0.0, av)

    def vjp(g):
        s = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                     np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
        return g * s

    return _make(out, (a, vjp))


def clip(a, lo, hi):
    """Clamp values; gradient passes only where unclipped."""
    av = value_of(a)
    out = np.clip(av, lo, hi)
    mask = ((av > lo) & (av < hi)).astype(np.float64)
    return _make(out, (a, lambda g: g * mask))


def vsum(a, axis=None):
    av = value_of(a)
    out = av.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _make(out, (a, vjp))


def vmean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return vsum(a, axis=axis) * (1.0 / n)


def reshape(a, shape):
    av = value_of(a)
    return _make(av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def take(a, idx):
    """Static basic indexing (slices / integers along leading axes)."""
    av = value_of(a)
    out = av[idx]

    def vjp(g):
        full = np.zeros_like(av)
        full[idx] = g
        return full

    return _make(out, (a, vjp))


def concat(parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    pairs = []
    start = 0
    for p, v in zip(parts, vals):
        stop = start + v.shape[ax]
        sl = tuple(slice(None) if i != ax else slice(start, stop)
                   for i in range(out.ndim))
        pairs.append((p, (lambda s: (lambda g: g[s]))(sl)))
        start = stop
    return _make(out, *pairs)


# -- reverse pass --------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into .grad for every Var reachable from loss."""
    if not isinstance(loss, Var):
        raise TypeError("loss is a constant; nothing to differentiate")
    if loss.value.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite loss")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            # grads are only ever rebound (never mutated in place), so
            # aliasing a child's buffer here is safe
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib


def parameter_gradient(loss, params):
    """Gradient of a taped scalar loss with respect to each Var in params."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.value)
            for p in params]


# -- forward-mode jets ----------------------------------------------------


def _mid(v):
    """Insert a direction axis: (n, k) -> (n, 1, k); scalars pass through."""
    s = value_of(v).shape
    if len(s) == 0:
        return v
    return reshape(v, (s[0], 1, s[1])) if isinstance(v, Var) else v.reshape(s[0], 1, s[1])


class Jet:
    """Value with per-input-direction first (and optionally second) tangents.

    val: (n, k); tan: (n, D, k); tan2: (n, D, k) holding d^2/dx_i^2 entries.
    Components may be Vars (parameter-dependent) or plain arrays.
    """

    __slots__ = ("val", "tan", "tan2")

    def __init__(self, val, tan=None, tan2=None):
        self.val = val
        self.tan = tan
        self.tan2 = tan2

    @staticmethod
    def seed(x, order):
        """Identity-tangent jet for input points x of shape (n, D)."""
        x = _as_array(x)
        n, d = x.shape
        if order == 0:
            return Jet(x)
        tan = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        tan2 = np.zeros((n, d, d)) if order >= 2 else None
        return Jet(x, tan, tan2)

    @property
    def order(self):
        if self.tan is None:
            return 0
        return 1 if self.tan2 is None else 2

    # -- linear structure -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet):
            tan = None if self.tan is None else self.tan + other.tan
            tan2 = None if self.tan2 is None else self.tan2 + other.tan2
            return Jet(self.val + other.val, tan, tan2)
        return Jet(self.val + other, self.tan, self.tan2)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val,
                   None if self.tan is None else -self.tan,
                   None if self.tan2 is None else -self.tan2)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Jet) else -_as_array(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.val * other,
                       None if self.tan is None else self.tan * other,
                       None if self.tan2 is None else self.tan2 * other)
        u, v = self, other
        val = u.val * v.val
        tan = tan2 = None
        if u.tan is not None:
            ue, ve = _mid(u.val), _mid(v.val)
            tan = u.tan * ve + ue * v.tan
            if u.tan2 is not None:
                tan2 = u.tan2 * ve + 2.0 * (u.tan * v.tan) + ue * v.tan2
        return Jet(val, tan, tan2)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.power(-1.0)
        return self * (1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return self.power(-1.0) * other

    # -- elementwise chain rule -------------------------------------------

    def _chain(self, fval, d1, d2):
        """Apply f given value f(v), derivative f'(v) and second derivative."""
        if self.tan is None:
            return Jet(fval)
        de = _mid(d1)
        tan = de * self.tan
        tan2 = None
        if self.tan2 is not None:
            tan2 = _mid(d2) * (self.tan * self.tan) + de * self.tan2
        return Jet(fval, tan, tan2)

    def tanh(self):
        t = tanh(self.val)
        d1 = 1.0 - t * t
        d2 = None if self.tan2 is None else -2.0 * t * d1
        return self._chain(t, d1, d2)

    def exp(self):
        e = exp(self.val)
        return self._chain(e, e, e if self.tan2 is not None else None)

    def log1p(self):
        inv = power(1.0 + self.val, -1.0)
        d2 = None if self.tan2 is None else -1.0 * inv * inv
        return self._chain(log1p(self.val), inv, d2)

    def log(self):
        inv = power(self.val, -1.0)
        d2 = None if self.tan2 is None else -1.0 * inv * inv
        return self._chain(log(self.val), inv, d2)

    def sigmoid(self):
        s = sigmoid(self.val)
        d1 = s * (1.0 - s)
        d2 = None if self.tan2 is None else d1 * (1.0 - 2.0 * s)
        return self._chain(s, d1, d2)

    def softplus(self):
        s = sigmoid(self.val)
        d2 = None if self.tan2 is None else s * (1.0 - s)
        return self._chain(softplus(self.val), s, d2)

    def power(self, p):
        v = self.val
        d1 = p * power(v, p - 1)
        d2 = None if self.tan2 is None else p * (p - 1) * power(v, p - 2)
        return self._chain(power(v, p), d1, d2)

    def square(self):
        d2 = None if self.tan2 is None else 2.0 * np.ones(())
        return self._chain(self.val * self.val, 2.0 * self.val, d2)

    def clip_sym(self, lim):
        """Clamp values to [-lim, lim]; tangents are masked where clamped."""
        av = value_of(self.val)
        mask = ((av > -lim) & (av < lim)).astype(np.float64)
        out = clip(self.val, -lim, lim)
        zero = None if self.tan2 is None else np.zeros(())
        return self._chain(out, mask, zero)

    def sum_features(self):
        """Sum over the feature (last) axis, keeping a width-1 column."""
        k = value_of(self.val).shape[-1]
        return self.matmul(np.ones((k, 1)))

    # -- structure ---------------------------------------------------------

    def matmul(self, w):
        """Right-multiply by a (k, m) matrix (independent of the inputs)."""
        return Jet(matmul(self.val, w),
                   None if self.tan is None else matmul(self.tan, w),
                   None if self.tan2 is None else matmul(self.tan2, w))

    def col(self, idx):
        """Select feature columns (last axis); idx is a slice or int list."""
        sel = (Ellipsis, idx)
        return Jet(self.val[sel] if not isinstance(self.val, Var) else take(self.val, sel),
                   None if self.tan is None else _take_any(self.tan, sel),
                   None if self.tan2 is None else _take_any(self.tan2, sel))

    @staticmethod
    def cat(parts):
        """Concatenate jets along the feature (last) axis."""
        tan = tan2 = None
        val = concat([p.val for p in parts], axis=-1)
        if parts[0].tan is not None:
            tan = concat([p.tan for p in parts], axis=-1)
        if parts[0].tan2 is not None:
            tan2 = concat([p.tan2 for p in parts], axis=-1)
        return Jet(val, tan, tan2)


def _take_any(x, sel):
    return take(x, sel) if isinstance(x, Var) else x[sel]
