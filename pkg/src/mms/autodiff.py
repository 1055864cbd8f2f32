"""A small tape-based reverse-mode autodiff engine on top of numpy.

Tensors are immutable wrappers around float64 arrays. Operations executed
inside an active :class:`Tape` that touch a tensor with ``requires_grad``
are recorded in creation order, which is automatically a topological order;
:func:`backward` walks the tape in reverse once.

>>> w = Tensor(np.ones((2, 2)), requires_grad=True)
>>> with Tape():
...     loss = sum_all(mul(w, w))
...     grads = backward(loss)
>>> grads[w]
array([[2., 2.],
       [2., 2.]])

Broadcasting is deliberately limited to scalars; row-vector biases go
through :func:`linear` and :func:`add_rowvec`.
"""

import threading

import numpy as np

from .errors import InvalidEps, InvalidLoss, InvalidShape, ShapeError
from .rng import gaussian_block, uniform_block

DTYPE = np.float64
GELU_C = 0.7978845608  # sqrt(2/pi), fixed so results do not depend on libm
GELU_A = 0.044715

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def default_dtype():
    return getattr(_local, "dtype", DTYPE)


class precision:
    """Context manager switching the dtype new tensors are stored in.

    float64 is the default; float32 halves matmul cost for long runs.
    """

    def __init__(self, name):
        self.dtype = np.dtype(name)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported precision {name!r}")

    def __enter__(self):
        self._prev = default_dtype()
        _local.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _local.dtype = self._prev
        return False


class Tensor:
    """Dense float array with optional participation in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=default_dtype())
        if any(d < 1 for d in arr.shape):
            raise InvalidShape(f"dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def construct(shape, init="zeros", value=0.0, lo=0.0, hi=1.0, mean=0.0, std=1.0,
              seed=None, requires_grad=False):
    """Build a tensor from one of the named initialisers.

    ``init`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (``lo``, ``hi``) or ``gaussian`` (``mean``, ``std``); random inits need
    ``seed`` and draw from :mod:`mms.rng`.
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise InvalidShape(f"dimensions must be >= 1, got {shape}")
    n = int(np.prod(shape)) if shape else 1
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "constant":
        data = np.full(shape, float(value))
    elif init in ("uniform", "gaussian"):
        if seed is None:
            raise ValueError(f"{init} init requires a seed")
        if init == "uniform":
            data = uniform_block(seed, n, lo, hi).reshape(shape)
        else:
            data = gaussian_block(seed, n, mean, std).reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("inputs", "backward", "leaf")

    def __init__(self, inputs, backward, leaf=None):
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside it are recorded when at
    least one input needs a gradient.
    """

    def __init__(self):
        self.nodes = []
        self._leaf_ids = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []
        self._leaf_ids = {}

    def _id_of(self, t):
        if t._tape is self:
            return t.node_id
        if t.requires_grad:
            key = id(t)
            if key not in self._leaf_ids:
                self._leaf_ids[key] = len(self.nodes)
                self.nodes.append(_Node((), None, leaf=t))
            return self._leaf_ids[key]
        return None

    def record(self, out_data, inputs, backward):
        ids = tuple(self._id_of(t) for t in inputs)
        out = Tensor.__new__(Tensor)
        out.data = out_data
        if all(i is None for i in ids):
            out.requires_grad = False
            out.node_id = None
            out._tape = None
            return out
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(ids, backward))
        return out


def _make(out_data, inputs, backward):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = False
        out.node_id = None
        out._tape = None
        return out
    return tape.record(out_data, inputs, backward)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss):
    """Gradients of a scalar ``loss`` for every ``requires_grad`` leaf.

    Returns a dict keyed by leaf tensor. The tape is reset afterwards.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise InvalidLoss("backward needs a scalar loss tensor")
    tape = loss._tape
    if tape is None:
        raise InvalidLoss("loss was not recorded on a tape (no input requires grad?)")
    pending = {loss.node_id: np.ones_like(loss.data)}
    out = {}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.leaf is not None:
            out[node.leaf] = g
            continue
        for iid, ig in zip(node.inputs, node.backward(g)):
            if iid is None or ig is None:
                continue
            if iid in pending:
                pending[iid] = pending[iid] + ig
            else:
                pending[iid] = ig
    tape.reset()
    return out


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data - c, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def elementwise(a, b, kind):
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def matmul(a, b):
    """Matrix product; 2-D, or batched over identical leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)

    def bw(g):
        g = np.ascontiguousarray(g)
        return (g @ np.ascontiguousarray(np.swapaxes(bd, -1, -2)),
                np.ascontiguousarray(np.swapaxes(ad, -1, -2)) @ g)

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} for weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw)


def add_rowvec(x, v):
    """Add a vector along the last axis of ``x``."""
    if v.shape != (x.shape[-1],):
        raise ShapeError(f"add_rowvec: {x.shape} + {v.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=lead)))


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} for width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


def gelu(x):
    """Tanh-approximated GELU with the fixed constant ``GELU_C``."""
    xd = x.data
    x2 = xd * xd
    t = x2 * GELU_A
    t += 1.0
    t *= xd
    t *= GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 A x^2)
        d = x2 * (3.0 * GELU_A)
        d += 1.0
        d *= GELU_C
        d *= xd
        tt = t * t
        np.subtract(1.0, tt, out=tt)
        d *= tt
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (x,), bw)


def softmax_rows(x):
    """Softmax over the last axis, with max subtraction."""
    xd = x.data
    p = xd - xd.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = g - (g * p).sum(axis=-1, keepdims=True)
        gx *= p
        return (gx,)

    return _make(p, (x,), bw)


def _check_index(idx, n):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")
    return idx


def gather_rows(x, idx):
    """Rows ``x[idx]`` in the given order; gradients scatter-add back."""
    n = x.shape[0]
    idx = _check_index(idx, n)
    if idx.size == 0:
        raise InvalidShape("gather_rows: empty index")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), bw)


def interleave_rows(rows, fill, positions, n):
    """Length-``n`` sequence with ``rows`` at ``positions`` and ``fill`` elsewhere.

    ``rows`` is ``[len(positions), d]`` and ``fill`` is a ``[d]`` vector.
    Used to put mask tokens back between encoded visible tokens.
    """
    positions = _check_index(positions, n)
    d = fill.shape[0]
    if rows.shape != (positions.size, d):
        raise ShapeError(f"interleave_rows: rows {rows.shape} for {positions.size} positions, width {d}")
    if np.unique(positions).size != positions.size:
        raise ValueError("interleave_rows: duplicate positions")
    out = np.empty((n, d), dtype=rows.data.dtype)
    out[:] = fill.data
    out[positions] = rows.data
    is_fill = np.ones(n, dtype=bool)
    is_fill[positions] = False

    def bw(g):
        return g[positions], g[is_fill].sum(axis=0)

    return _make(out, (rows, fill), bw)


def concat_rows(parts):
    """Concatenate tensors along axis 0."""
    parts = list(parts)
    tail = parts[0].shape[1:]
    if any(p.shape[1:] != tail for p in parts):
        raise ShapeError("concat_rows: trailing shapes differ")
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def slice_rows(x, start, stop):
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise IndexError(f"slice [{start}, {stop}) out of range for {n} rows")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop], (x,), bw)


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum_all(x):
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.size)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``[n, c]`` logits against integer labels."""
    ld = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    n = ld.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), bw)


def finite_diff_check(f, x, eps=1e-5, indices=None):
    """Largest relative gap between autodiff and central-difference gradients.

    ``f`` maps a Tensor shaped like ``x`` to a scalar Tensor. The error per
    element is ``|g_ad - g_fd| / max(1, |g_fd|)``. ``indices`` optionally
    restricts the comparison to some flat positions (large tensors).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidEps(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape():
        grads = backward(f(leaf))
    g_ad = grads.get(leaf, np.zeros_like(x0)).reshape(-1)
    flat = x0.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        xp = flat.copy()
        xp[i] += eps
        xm = flat.copy()
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        g_fd = (fp - fm) / (2.0 * eps)
        worst = max(worst, abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd)))
    return worst
