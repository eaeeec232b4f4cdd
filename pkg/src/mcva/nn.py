"""Small layer library on top of :mod:`mcva.tensor`."""
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container. Tensors, modules and lists of modules held as
    attributes are discovered in attribute order."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    out.update(sub.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def set_requires_grad(self, flag):
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def astype(self, dtype):
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


def param(data, dtype):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, zero=False, scale=1.0):
        std = 0.0 if zero else scale / math.sqrt(d_in)
        self.weight = param(rng.normal(0.0, 1.0, (d_in, d_out)) * std, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class FFN(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in, d_out, rng, hidden=None, dtype=np.float32, zero_out=False):
        hidden = hidden or d_out
        self.fc1 = Linear(d_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d_out, rng, dtype, zero=zero_out)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Conv(Module):
    """3x3 convolution with He (fan-in) initialisation."""

    def __init__(self, c_in, c_out, rng, k=3, stride=1, dtype=np.float32):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = param(rng.normal(0.0, std, (c_out, c_in, k, k)), dtype)
        self.bias = param(np.zeros(c_out), dtype)
        self.stride = stride

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


def sinusoidal_2d(rows, cols, dim, max_period=100.0):
    """Fixed 2D sinusoidal encoding of continuous (row, col) locations.

    Returns [len(rows), dim]: a quarter of the channels each for sin/cos of
    the row and of the column, at geometrically spaced frequencies.
    """
    if dim % 4:
        raise ValueError(f"positional encoding dim must be a multiple of 4, got {dim}")
    rows = np.asarray(rows, dtype=np.float64).reshape(-1)
    cols = np.asarray(cols, dtype=np.float64).reshape(-1)
    nf = dim // 4
    freqs = np.exp(-math.log(max_period) * np.arange(nf) / nf)
    r = rows[:, None] * freqs[None]
    c = cols[:, None] * freqs[None]
    return np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)
