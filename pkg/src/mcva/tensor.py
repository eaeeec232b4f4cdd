"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which doubles as inference mode::

    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]
"""
import math
import os

import numpy as np

from . import kernels
from .errors import EmptyKeySet, NumericalError, ShapeError

CHECK_FINITE = os.environ.get("MCVA_CHECK_FINITE", "1") != "0"

_TAPES = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents = ()
        self.backward_fn = None
        self.op = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / scalar)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in creation order, so walking the list backwards is a
    reverse topological order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss):
        """Return a :class:`Gradients` map for every tensor reached from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        keep = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    keep[key] = parent
        return Gradients(grads, keep)


class Gradients:
    """Gradient buffers keyed by tensor identity; unreached tensors read as zero."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor):
        g = self._grads.get(id(tensor))
        if g is None or self._tensors.get(id(tensor)) is not tensor:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor):
        return self._tensors.get(id(tensor)) is tensor


def no_tape():
    return not _TAPES


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data, parents, backward_fn, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        out.op = op
        _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return _result(a.data * s, (a,), lambda g: (_unbroadcast(g * s, a.shape),), "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def abs_(a):
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def reciprocal(a):
    out = 1.0 / a.data
    return _result(out.astype(a.dtype, copy=False), (a,), lambda g: (-g * out * out,), "reciprocal")


def relu(a):
    pos = a.data > 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = x2 * (0.044715 * _GELU_C)
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    out = t + 1
    out *= x
    out *= 0.5

    def backward(g):
        dinner = x2 * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        dinner *= x * (1 - t * t)
        dinner += 1 + t
        dinner *= g
        dinner *= 0.5
        return (dinner,)

    return _result(out, (a,), backward, "gelu")


def sigmoid(a):
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def mask_fill(a, mask):
    """Keep entries where ``mask`` is true, write exact zeros elsewhere.

    Equivalent to multiplying by a binary mask but never produces ``-0.0`` and
    never lets a masked value influence the output bits.
    """
    mask = np.asarray(mask, dtype=bool)
    zero = np.zeros((), dtype=a.dtype)
    return _result(np.where(mask, a.data, zero), (a,),
                   lambda g: (_unbroadcast(np.where(mask, g, zero), a.shape),), "mask_fill")


# ------------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, shape)),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------- shaping


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # [..., d] @ [d, e]: fold the leading axes into one gemm
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), backward, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def softmax(a, axis=-1, mask=None):
    """Max-subtracted softmax. ``mask`` (broadcastable bool) drops entries exactly."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out.astype(a.dtype, copy=False), (a,), backward, "softmax")


def layer_norm(a, gamma, beta, eps=1e-5):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = x.shape[-1]

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = g * gd
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(xhat * gd + beta.data, (a, gamma, beta), backward, "layer_norm")


def scaled_dot_attention(q, k, v, key_mask=None):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``key_mask`` is a bool array broadcastable to the score shape [..., m, n];
    false entries are removed from the key/value set.
    """
    if k.shape[-2] == 0:
        raise EmptyKeySet("attention needs at least one key")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    d = q.shape[-1]
    nd = k.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = matmul(q, transpose(k, axes)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1, mask=key_mask), v)


# ------------------------------------------------------------------ convolution


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """Cross-correlation on [N, Cin, H, W] (or [Cin, H, W]) inputs.

    Padding defaults to (k - 1) / 2, giving ceil(H / stride) output rows.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d expects {cin} input channels, got {c}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    p = (k - 1) // 2 if padding is None else padding
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    hp, wp = h + 2 * p, w + 2 * p
    # channels-last copy so each tap gathers contiguous channel runs
    xl = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xl[:, p:p + h, p:p + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xl[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    del xl
    out = cols @ weight.data.transpose(0, 2, 3, 1).reshape(cout, -1).T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gt @ cols).reshape(cout, k, k, c).transpose(0, 3, 1, 2))
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        if not x.requires_grad:
            return None, gw, gb
        # column gradients laid out [C, k, k, N, Ho, Wo] so each tap is one block
        gcols = (weight.data.reshape(cout, -1).T @ gt).reshape(c, k, k, n, ho, wo)
        gxp = kernels.col2im(gcols, stride, hp, wp)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx.transpose(1, 0, 2, 3), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = _result(np.ascontiguousarray(out), parents, backward, "conv2d")
    if unbatched:
        res = reshape(res, res.shape[1:])
    return res


# -------------------------------------------------------------------- cropping


def crop_patch(maps, centers, size):
    """Bilinear ``size x size`` crops of each map [N, H, W] around centers [N, 2].

    Centers are (row, col) in grid units and are treated as constants.
    """
    centers = np.asarray(centers, dtype=np.float64)
    _, h, w = maps.shape
    out = kernels.crop_forward(maps.data, centers, size)

    def backward(g):
        return (kernels.crop_backward(g, centers, size, h, w),)

    return _result(out, (maps,), backward, "crop_patch")
