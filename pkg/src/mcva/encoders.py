"""Frozen-by-default convolutional image and context encoders."""
import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Conv, Module
from .tensor import Tensor

NORM_EPS = 1e-6


@dataclass
class FeatureMap:
    values: Tensor  # [D, H, W]
    stride_to_image: int

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


class ConvEncoder(Module):
    """conv s2 -> ReLU -> conv s2 -> ReLU -> conv s1; 4 image pixels per cell.

    Images in [0, 1] are mapped to [-1, 1] before the first layer. With
    ``normalize`` each output cell is rescaled to unit root-mean-square over
    channels, so dot products between cells measure direction, not brightness.
    """

    stride_to_image = 4

    def __init__(self, out_dim, seed, hidden=32, frozen=True, normalize=False, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv(3, hidden, rng, stride=2, dtype=dtype)
        self.conv2 = Conv(hidden, hidden, rng, stride=2, dtype=dtype)
        self.conv3 = Conv(hidden, out_dim, rng, stride=1, dtype=dtype)
        self._seed = seed
        self.normalize = normalize
        self._frozen = None
        self.frozen = frozen

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, flag):
        self._frozen = bool(flag)
        self.set_requires_grad(not flag)

    @property
    def init_seed(self):
        return self._seed

    def __call__(self, images):
        """images: Tensor or array [B, 3, H_I, W_I] (or [3, H_I, W_I])."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        s = self.stride_to_image
        h, w = x.shape[-2:]
        if h % s or w % s:
            raise ShapeError(f"image size {h}x{w} must be a multiple of {s}")
        x = x * 2.0 - 1.0
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        x = self.conv3(x)
        if self.normalize:
            ms = T.mean(T.square(x), axis=-3, keepdims=True)
            x = x * T.reciprocal(T.sqrt(ms + NORM_EPS))
        return x

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def receptive_field(self):
        """Image-pixel extent [lo, hi] (inclusive, per axis) feeding cell 0."""
        lo, hi = 0, 0
        for conv in (self.conv3, self.conv2, self.conv1):
            k = conv.weight.shape[-1]
            r = (k - 1) // 2
            lo = lo * conv.stride - r
            hi = hi * conv.stride + r
        return lo, hi


def encode_image(img, encoder):
    return FeatureMap(encoder(img), encoder.stride_to_image)


encode_context = encode_image
