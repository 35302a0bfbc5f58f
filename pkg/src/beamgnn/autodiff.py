"""Reverse-mode autodiff on a tensor-granularity tape, plus second-order jets.

A :class:`Tape` records one entry per array operation (matmul, gather,
activation, reduction, ...).  ``tape.gradient(out)`` sweeps the records in
reverse and returns gradients for every registered parameter.

:class:`Jet2` carries (value, gradient, packed Hessian) with respect to three
spatial coordinates.  Every lane is itself a tape tensor, so a loss built from
Hessian lanes can be reverse-differentiated with respect to the parameters.

    >>> tape = Tape()
    >>> w = tape.param("w", np.array([1.0, 2.0]))
    >>> tape.gradient(sum_(w * w))["w"]
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tape:
    def __init__(self):
        self.records = []  # (out_id, parents, backward)
        self.params = {}  # name -> Tensor
        self._n = 0

    def _new_id(self):
        self._n += 1
        return self._n - 1

    def param(self, name, value):
        """Register a named leaf whose gradient will be reported."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value, dtype=np.float64), self, self._new_id(), True)
        self.params[name] = t
        return t

    def constant(self, value):
        return Tensor(np.asarray(value, dtype=np.float64), self, -1, False)

    def record(self, value, parents, backward):
        """Create the output tensor of an op; ``backward(g)`` returns one
        gradient (or None) per parent."""
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(value, self, -1, False)
        out = Tensor(value, self, self._new_id(), True)
        self.records.append((out.id, parents, backward))
        return out

    def release(self):
        """Drop recorded closures so intermediate arrays can be freed at once
        (tensors and their tape form a reference cycle)."""
        self.records.clear()

    def gradient(self, output, params=None):
        """Gradients of the scalar ``output`` w.r.t. registered parameters.

        Parameters the output does not depend on get an all-zero gradient.
        """
        if np.size(output.value) != 1:
            raise ValueError("gradient() needs a scalar output")
        grads = {}
        if output.requires_grad:
            grads[output.id] = np.ones_like(output.value)
        for out_id, parents, backward in reversed(self.records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for p, gp in zip(parents, backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p.id in grads:
                    grads[p.id] = grads[p.id] + gp
                else:
                    grads[p.id] = gp
        names = self.params if params is None else params
        out = {}
        for name in names:
            t = self.params[name]
            g = grads.get(t.id)
            out[name] = np.zeros_like(t.value) if g is None else np.asarray(g).reshape(t.value.shape)
        return out


class Tensor:
    __slots__ = ("value", "tape", "id", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, tape, id_, requires_grad):
        self.value = value
        self.tape = tape
        self.id = id_
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_lift(self.tape, o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)


def _lift(tape, x):
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return _lift(tape, a), _lift(tape, b), tape


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b, tape = _pair(a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b, tape = _pair(a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(out, (a, b),
                       lambda g: (_unbroadcast(g / bv, av.shape),
                                  _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c):
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def square(a):
    v = a.value
    return a.tape.record(v * v, (a,), lambda g: (2.0 * g * v,))


def exp(a):
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


# -- activations with derivatives up to third order -----------------------

def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x, k):
    s = _sig(x)
    if k == 0:
        return x * s
    sp_ = s * (1.0 - s)
    if k == 1:
        return s + x * sp_
    if k == 2:
        return sp_ * (2.0 + x * (1.0 - 2.0 * s))
    if k == 3:
        return sp_ * ((1.0 - 2.0 * s) * (3.0 + x * (1.0 - 2.0 * s)) - 2.0 * x * sp_)
    raise ValueError(k)


def _relu(x, k, slope=0.0):
    if k == 0:
        return np.maximum(x, 0.0) if slope == 0.0 else np.where(x > 0, x, slope * x)
    if k == 1:
        return (x > 0).astype(x.dtype) if slope == 0.0 else np.where(x > 0, 1.0, slope)
    return np.zeros_like(x)


def _identity(x, k):
    if k == 0:
        return x.copy()
    if k == 1:
        return np.ones_like(x)
    return np.zeros_like(x)


ACTIVATIONS = {
    "silu": _silu,
    "relu": _relu,
    "leaky_relu": lambda x, k: _relu(x, k, 0.2),
    "identity": _identity,
}


def activation(a, name, order=0):
    """``order``-th derivative of activation ``name`` applied elementwise."""
    fn = ACTIVATIONS[name]
    x = a.value
    if order >= 3 and name == "silu":
        # fourth derivative is not needed by any consumer in this package
        return a.tape.constant(fn(x, order))
    return a.tape.record(fn(x, order), (a,), lambda g: (g * fn(x, order + 1),))


def relu(a):
    return activation(a, "relu")


def silu(a):
    return activation(a, "silu")


def leaky_relu(a):
    return activation(a, "leaky_relu")


# -- linear algebra and structure ------------------------------------------

def matmul(a, b):
    a, b, tape = _pair(a, b)
    av, bv = a.value, b.value
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, W, b=None):
    """x @ W.T (+ b) with W stored as (out, in)."""
    xv, Wv = x.value, W.value
    out = xv @ Wv.T
    if b is None:
        return x.tape.record(out, (x, W), lambda g: (g @ Wv, g.T @ xv))
    out += b.value
    return x.tape.record(out, (x, W, b), lambda g: (g @ Wv, g.T @ xv, g.sum(axis=0)))


def sum_(a, axis=None):
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(out, (a,), back)


def mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def concat(xs, axis=1):
    tape = next(x.tape for x in xs if isinstance(x, Tensor))
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return tape.record(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.split(g, cuts, axis=axis)))


def columns(a, start, stop):
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return a.tape.record(a.value[:, start:stop], (a,), back)


def reshape(a, shape):
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather(a, idx, n_rows=None):
    """Rows ``a[idx]``; backward scatters with a sparse transpose."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    shape = a.shape

    def back(g):
        S = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
        g2 = g.reshape(len(idx), -1)
        return ((S @ g2).reshape(shape),)

    return a.tape.record(a.value[idx], (a,), back)


def spmm(A, x):
    """Constant sparse (or dense) matrix times tensor."""
    xv = x.value
    shape = xv.shape
    cols = int(np.prod(shape[1:]))
    out = A @ xv.reshape(shape[0], cols)
    out = np.asarray(out).reshape((A.shape[0],) + shape[1:])

    def back(g):
        r = A.T @ g.reshape(A.shape[0], cols)
        return (np.asarray(r).reshape(shape),)

    return x.tape.record(out, (x,), back)


def segment_softmax(scores, seg, n_seg):
    """Softmax of ``scores`` (E, H) over entries sharing the same ``seg`` id."""
    s = scores.value
    seg = np.asarray(seg, dtype=np.int64)
    m = np.full((n_seg,) + s.shape[1:], -np.inf)
    np.maximum.at(m, seg, s)
    e = np.exp(s - m[seg])
    S = sp.csr_matrix((np.ones(len(seg)), (seg, np.arange(len(seg)))), shape=(n_seg, len(seg)))
    z = np.asarray(S @ e.reshape(len(seg), -1)).reshape(m.shape)
    alpha = e / z[seg]

    def back(g):
        ag = alpha * g
        tot = np.asarray(S @ ag.reshape(len(seg), -1)).reshape(m.shape)
        return (ag - alpha * tot[seg],)

    return scores.tape.record(alpha, (scores,), back)


# -- second-order jets -----------------------------------------------------

# packed symmetric Hessian order
HESS_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_PACK = {(i, j): k for k, (i, j) in enumerate(HESS_INDEX)}
_PACK.update({(j, i): k for (i, j), k in list(_PACK.items())})


def hess_slot(i, j):
    return _PACK[(i, j)]


def _zadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _zmul(a, b):
    if a is None or b is None:
        return None
    return mul(a, b)


class Jet2:
    """Value, 3-gradient and packed 6-Hessian, each a (possibly absent) tensor.

    Absent lanes (None) are exact zeros and are skipped in arithmetic.
    """

    def __init__(self, v, g=None, h=None):
        self.v = v
        self.g = list(g) if g is not None else [None] * 3
        self.h = list(h) if h is not None else [None] * 6

    @classmethod
    def constant(cls, v):
        return cls(v)

    @classmethod
    def seed(cls, tape, x, k, dxdk=1.0):
        """Jet of coordinate input ``x`` (value array) along axis ``k``."""
        v = tape.constant(x)
        g = [None] * 3
        g[k] = tape.constant(np.full_like(np.asarray(x, dtype=np.float64), dxdk))
        return cls(v, g)

    def __add__(self, o):
        if not isinstance(o, Jet2):
            return Jet2(add(self.v, o), self.g, self.h)
        return Jet2(add(self.v, o.v),
                    [_zadd(a, b) for a, b in zip(self.g, o.g)],
                    [_zadd(a, b) for a, b in zip(self.h, o.h)])

    def __sub__(self, o):
        return self + o.scale(-1.0)

    def scale(self, c):
        f = (lambda t: None if t is None else scale(t, c))
        return Jet2(scale(self.v, c), [f(t) for t in self.g], [f(t) for t in self.h])

    def __mul__(self, o):
        if not isinstance(o, Jet2):
            return self.scale(o)
        a, b = self, o
        g = [_zadd(_zmul(ag, b.v), _zmul(a.v, bg)) for ag, bg in zip(a.g, b.g)]
        h = []
        for k, (i, j) in enumerate(HESS_INDEX):
            t = _zadd(_zmul(a.h[k], b.v), _zmul(a.v, b.h[k]))
            t = _zadd(t, _zmul(a.g[i], b.g[j]))
            t = _zadd(t, _zmul(b.g[i], a.g[j]))
            h.append(t)
        return Jet2(mul(a.v, b.v), g, h)

    def linear(self, W, b=None):
        """Affine map lane-wise: value gets the bias, derivative lanes do not."""
        f = (lambda t: None if t is None else linear(t, W))
        return Jet2(linear(self.v, W, b), [f(t) for t in self.g], [f(t) for t in self.h])

    def apply(self, name):
        """Smooth unary function applied elementwise (chain rule to 2nd order)."""
        v = activation(self.v, name, 0)
        if all(t is None for t in self.g) and all(t is None for t in self.h):
            return Jet2(v)
        d1 = activation(self.v, name, 1)
        need2 = any(t is not None for t in self.g)
        d2 = activation(self.v, name, 2) if need2 else None
        g = [_zmul(d1, t) for t in self.g]
        h = []
        for k, (i, j) in enumerate(HESS_INDEX):
            t = _zmul(d1, self.h[k])
            if d2 is not None:
                t = _zadd(t, _zmul(d2, _zmul(self.g[i], self.g[j])))
            h.append(t)
        return Jet2(v, g, h)

    def columns(self, start, stop):
        f = (lambda t: None if t is None else columns(t, start, stop))
        return Jet2(columns(self.v, start, stop), [f(t) for t in self.g], [f(t) for t in self.h])

    def hessian(self, i, j):
        return self.h[hess_slot(i, j)]


def jet_concat(jets, axis=1):
    """Concatenate jets along features; absent lanes are materialised as zeros."""
    def lane(ts, vals):
        if all(t is None for t in ts):
            return None
        tape = vals[0].tape
        return concat([t if t is not None else tape.constant(np.zeros_like(v.value))
                       for t, v in zip(ts, vals)], axis=axis)

    vals = [j.v for j in jets]
    return Jet2(concat(vals, axis=axis),
                [lane([j.g[k] for j in jets], vals) for k in range(3)],
                [lane([j.h[k] for j in jets], vals) for k in range(6)])


# -- fused graph ops ---------------------------------------------------------

def _incidence(rows, n_rows, data=None):
    n = len(rows)
    data = np.ones(n) if data is None else data
    return sp.csr_matrix((data, (rows, np.arange(n))), shape=(n_rows, n))


def edge_dot(q, k, dst, src, heads):
    """Per-edge, per-head dot products q[dst] . k[src]  ->  (E, heads).

    ``q`` and ``k`` are (N, heads * d) tensors laid out head-major.
    """
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    N = q.shape[0]
    qv = q.value.reshape(N, heads, -1)
    kv = k.value.reshape(k.shape[0], heads, -1)
    out = np.einsum("ehd,ehd->eh", qv[dst], kv[src])

    def back(g):
        Sd = _incidence(dst, N)
        Ss = _incidence(src, k.shape[0])
        gq = (Sd @ (g[:, :, None] * kv[src]).reshape(len(dst), -1))
        gk = (Ss @ (g[:, :, None] * qv[dst]).reshape(len(src), -1))
        return np.asarray(gq).reshape(q.shape), np.asarray(gk).reshape(k.shape)

    return q.tape.record(out, (q, k), back)


def attention_aggregate(alpha, x, dst, src, n_out, heads):
    """out[v, h] = sum over edges e with dst_e = v of alpha[e, h] * x[src_e, h].

    ``x`` is (N, heads * d) head-major; result is (n_out, heads * d).
    """
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    a = alpha.value
    xv = x.value.reshape(x.shape[0], heads, -1)
    d = xv.shape[2]
    mats = [sp.csr_matrix((a[:, h], (dst, src)), shape=(n_out, x.shape[0])) for h in range(heads)]
    out = np.empty((n_out, heads, d))
    for h in range(heads):
        out[:, h] = mats[h] @ xv[:, h]

    def back(g):
        g3 = g.reshape(n_out, heads, d)
        gx = np.empty_like(xv)
        for h in range(heads):
            gx[:, h] = mats[h].T @ g3[:, h]
        ga = np.einsum("ehd,ehd->eh", g3[dst], xv[src])
        return ga, gx.reshape(x.shape)

    return x.tape.record(out.reshape(n_out, heads * d), (alpha, x), back)
