"""Reverse-mode automatic differentiation on dense float64 tensors.

A ComputationRecord is an eager tape: every operation appends a node holding
its result and a closure that maps the node's cotangent to cotangents of its
parents. Backward walks the tape once, in reverse creation order, which is a
valid topological order by construction.

Complex quantities are carried as (real, imag) pairs of real tensors; the
only complex-aware primitive is `cabs2` (squared magnitude of such a pair).
"""

from __future__ import annotations

import numpy as np

_LN2 = float(np.log(2.0))


class AdiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AdiffError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(AdiffError):
    """Operand values outside the operation's domain (e.g. log2 of <= 0)."""


class Tensor:
    """A node on a ComputationRecord.

    `values` is always a float64 ndarray. Leaves are created through
    ComputationRecord.leaf / .constant; everything else through ops.
    """

    __slots__ = ("values", "rec", "idx", "parents", "vjp_fn", "is_leaf", "name")

    def __init__(self, values, rec, parents=(), vjp_fn=None, is_leaf=False, name=None):
        self.values = values
        self.rec = rec
        self.parents = parents
        self.vjp_fn = vjp_fn
        self.is_leaf = is_leaf
        self.name = name
        self.idx = len(rec.nodes)
        rec.nodes.append(self)

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    # Arithmetic sugar; all operations live in module-level functions below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(_lift(self.rec, other), self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(_lift(self.rec, other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)


class ComputationRecord:
    """Ordered tape of operations; single-threaded by contract."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, values, name=None) -> Tensor:
        """Register a differentiable input (parameter or data)."""
        arr = np.asarray(values, dtype=np.float64)
        return Tensor(arr, self, is_leaf=True, name=name)

    def constant(self, values) -> Tensor:
        """Register a non-differentiable input; backward never reaches it."""
        arr = np.asarray(values, dtype=np.float64)
        return Tensor(arr, self)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def _sweep(self, output: Tensor, seed: np.ndarray) -> list:
        """One reverse pass; returns per-node cotangents (None if unreached)."""
        if output.rec is not self:
            raise AdiffError("output tensor does not belong to this record")
        cot = [None] * len(self.nodes)
        cot[output.idx] = seed
        for i in range(output.idx, -1, -1):
            g = cot[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp_fn is None:
                continue
            for parent, pg in zip(node.parents, node.vjp_fn(g)):
                if pg is None:
                    continue
                j = parent.idx
                cot[j] = pg if cot[j] is None else cot[j] + pg
        return cot

    def backward(self, output: Tensor, leaves=None) -> dict:
        """Gradient of a scalar output for every requested leaf.

        Unreached leaves get zero tensors. Keys are the leaf Tensor objects.
        """
        if output.values.shape != ():
            raise ShapeError(
                f"backward needs a scalar output, got shape {output.values.shape}"
            )
        if leaves is None:
            leaves = self.leaves()
        for lf in leaves:
            self._check_leaf(lf)
        cot = self._sweep(output, np.ones((), dtype=np.float64))
        out = {}
        for lf in leaves:
            g = cot[lf.idx]
            out[lf] = np.zeros_like(lf.values) if g is None else np.asarray(g)
        return out

    def vjp(self, output: Tensor, cotangent, leaf: Tensor) -> np.ndarray:
        """cotangent^T (d output / d leaf) without forming the Jacobian."""
        self._check_leaf(leaf)
        seed = np.asarray(cotangent, dtype=np.float64)
        if seed.shape != output.values.shape:
            raise ShapeError(
                f"cotangent shape {seed.shape} != output shape {output.values.shape}"
            )
        cot = self._sweep(output, seed)
        g = cot[leaf.idx]
        return np.zeros_like(leaf.values) if g is None else np.asarray(g)

    def _check_leaf(self, leaf):
        if not isinstance(leaf, Tensor) or leaf.rec is not self or not leaf.is_leaf:
            raise AdiffError("requested leaf is not a leaf of this record")


def _lift(rec, x):
    if isinstance(x, Tensor):
        if x.rec is not rec:
            raise AdiffError("operands belong to different records")
        return x
    return rec.constant(x)


def _rec_of(*args):
    for a in args:
        if isinstance(a, Tensor):
            return a.rec
    raise AdiffError("at least one operand must be a Tensor")


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes_ok(a, b):
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b):
    rec = _rec_of(a, b)
    a, b = _lift(rec, a), _lift(rec, b)
    _binary_shapes_ok(a.values, b.values)
    out = a.values + b.values
    return Tensor(out, rec, (a, b),
                  lambda g: (_unbroadcast(g, a.values.shape),
                             _unbroadcast(g, b.values.shape)))


def subtract(a, b):
    rec = _rec_of(a, b)
    a, b = _lift(rec, a), _lift(rec, b)
    _binary_shapes_ok(a.values, b.values)
    out = a.values - b.values
    return Tensor(out, rec, (a, b),
                  lambda g: (_unbroadcast(g, a.values.shape),
                             _unbroadcast(-g, b.values.shape)))


def multiply(a, b):
    rec = _rec_of(a, b)
    a, b = _lift(rec, a), _lift(rec, b)
    _binary_shapes_ok(a.values, b.values)
    out = a.values * b.values
    return Tensor(out, rec, (a, b),
                  lambda g: (_unbroadcast(g * b.values, a.values.shape),
                             _unbroadcast(g * a.values, b.values.shape)))


def divide(a, b):
    rec = _rec_of(a, b)
    a, b = _lift(rec, a), _lift(rec, b)
    _binary_shapes_ok(a.values, b.values)
    out = a.values / b.values
    return Tensor(out, rec, (a, b),
                  lambda g: (_unbroadcast(g / b.values, a.values.shape),
                             _unbroadcast(-g * a.values / (b.values * b.values),
                                          b.values.shape)))


def negate(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    return Tensor(-a.values, rec, (a,), lambda g: (-g,))


def matmul(a, b):
    rec = _rec_of(a, b)
    a, b = _lift(rec, a), _lift(rec, b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} vs {bv.shape}")
    out = av @ bv

    def vjp_fn(g):
        # collapsing batch dims when the right operand is a shared 2-d matrix
        # turns a stack of small products into one fat BLAS call
        if bv.ndim == 2 and g.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape)
            gb = av.reshape(-1, av.shape[-1]).T @ g2
        else:
            ga = _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)
            gb = _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)
        return ga, gb

    return Tensor(out, rec, (a, b), vjp_fn)


def affine(x, w, b):
    """x @ w + b with the bias broadcast over leading axes (fused linear)."""
    rec = _rec_of(x, w, b)
    x, w, b = _lift(rec, x), _lift(rec, w), _lift(rec, b)
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim < 2 or wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"affine needs (..., d_in) @ (d_in, d_out), got "
                         f"{xv.shape} and {wv.shape}")
    if bv.shape != (wv.shape[1],):
        raise ShapeError(f"bias shape {bv.shape} != ({wv.shape[1]},)")
    out = xv @ wv + bv

    def vjp_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        return gx, gw, g2.sum(axis=0)

    return Tensor(out, rec, (x, w, b), vjp_fn)


def exp(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.exp(a.values)
    return Tensor(out, rec, (a,), lambda g: (g * out,))


def log2(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    if np.any(a.values <= 0.0):
        raise DomainError("log2 of non-positive value")
    out = np.log2(a.values)
    return Tensor(out, rec, (a,), lambda g: (g / (a.values * _LN2),))


def sqrt(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    if np.any(a.values <= 0.0):
        raise DomainError("sqrt of non-positive value (derivative undefined)")
    out = np.sqrt(a.values)
    return Tensor(out, rec, (a,), lambda g: (g * (0.5 / out),))


def tanh(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.tanh(a.values)
    return Tensor(out, rec, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.maximum(a.values, 0.0)
    # subgradient 1 at the kink, matching max(0, .) penalty usage
    mask = a.values >= 0.0
    return Tensor(out, rec, (a,), lambda g: (np.where(mask, g, 0.0),))


def softplus(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.logaddexp(0.0, a.values)

    def vjp_fn(g):
        sig = np.empty_like(a.values)
        pos = a.values >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
        ex = np.exp(a.values[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * sig,)

    return Tensor(out, rec, (a,), vjp_fn)


def sin(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    return Tensor(np.sin(a.values), rec, (a,), lambda g: (g * np.cos(a.values),))


def cos(a):
    rec = _rec_of(a)
    a = _lift(rec, a)
    return Tensor(np.cos(a.values), rec, (a,), lambda g: (-g * np.sin(a.values),))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.sum(a.values, axis=axis, keepdims=keepdims)
    shape = a.values.shape
    return Tensor(np.asarray(out), rec, (a,),
                  lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.mean(a.values, axis=axis, keepdims=keepdims)
    shape = a.values.shape
    count = a.values.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return Tensor(np.asarray(out), rec, (a,),
                  lambda g: (_expand_reduced(g / count, shape, axis, keepdims),))


def broadcast_to(a, shape):
    rec = _rec_of(a)
    a = _lift(rec, a)
    try:
        out = np.broadcast_to(a.values, shape)
    except ValueError:
        raise ShapeError(
            f"cannot broadcast shape {a.values.shape} to {tuple(shape)}") from None
    return Tensor(np.ascontiguousarray(out), rec, (a,),
                  lambda g: (_unbroadcast(g, a.values.shape),))


def reshape(a, shape):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = a.values.reshape(shape)
    return Tensor(out, rec, (a,), lambda g: (g.reshape(a.values.shape),))


def transpose(a, axes=None):
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = np.transpose(a.values, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return Tensor(np.ascontiguousarray(out), rec, (a,),
                  lambda g: (np.transpose(g, inv),))


def concatenate(tensors, axis=0):
    rec = _rec_of(*tensors)
    tensors = [_lift(rec, t) for t in tensors]
    parts = [t.values for t in tensors]
    nd = parts[0].ndim
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(
                f"concatenate rank mismatch: {parts[0].shape} vs {p.shape}")
    out = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, rec, tuple(tensors), vjp_fn)


def slice_(a, key):
    """Basic (non-overlapping) slicing: ints, slices, or tuples thereof."""
    rec = _rec_of(a)
    a = _lift(rec, a)
    out = a.values[key]

    def vjp_fn(g):
        full = np.zeros_like(a.values)
        full[key] = g
        return (full,)

    return Tensor(np.ascontiguousarray(out), rec, (a,), vjp_fn)


def cabs2(re, im):
    """Squared magnitude of a complex pair: re^2 + im^2."""
    rec = _rec_of(re, im)
    re, im = _lift(rec, re), _lift(rec, im)
    if re.values.shape != im.values.shape:
        raise ShapeError(
            f"cabs2 parts differ in shape: {re.values.shape} vs {im.values.shape}")
    out = re.values * re.values + im.values * im.values
    return Tensor(out, rec, (re, im),
                  lambda g: (2.0 * g * re.values, 2.0 * g * im.values))


# Composite helpers -----------------------------------------------------------

def stack_last(tensors):
    """Stack along a new trailing axis (reshape + concatenate composite)."""
    expanded = [reshape(t, t.values.shape + (1,)) for t in tensors]
    return concatenate(expanded, axis=-1)


def complex_matmul(a_re, a_im, b_re, b_im):
    """(A_re + i A_im) @ (B_re + i B_im) as a pair of real tensors."""
    out_re = matmul(a_re, b_re) - matmul(a_im, b_im)
    out_im = matmul(a_re, b_im) + matmul(a_im, b_re)
    return out_re, out_im


# Name -> callable registry; the grad-check suite and the generic `forward`
# dispatcher both iterate over this.
OPS = {
    "matmul": matmul,
    "affine": affine,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "exp": exp,
    "log2": log2,
    "sqrt": sqrt,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "sin": sin,
    "cos": cos,
    "sum": sum_,
    "mean": mean,
    "broadcast_to": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
    "concatenate": concatenate,
    "slice": slice_,
    "cabs2": cabs2,
}


def forward(kind, *args, **kwargs):
    """Dispatch an operation by registry name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise AdiffError(f"unknown op kind {kind!r}") from None
    return fn(*args, **kwargs)


def backward(record: ComputationRecord, output: Tensor, leaves=None):
    return record.backward(output, leaves)


def vjp(record: ComputationRecord, output: Tensor, cotangent, leaf: Tensor):
    return record.vjp(output, cotangent, leaf)
