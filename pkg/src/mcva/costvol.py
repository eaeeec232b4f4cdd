"""All-pairs cost volume and bilinear cost-patch cropping."""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import FeatureMap
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class CostVolume:
    values: Tensor  # [H, W, H, W] or batched [B, H, W, H, W]
    scale: float

    @property
    def grid(self):
        return self.values.shape[-4:-2]

    def cost_map(self, source):
        i, j = source
        return self.values.data[..., i, j, :, :]


@dataclass
class CostPatch:
    center: tuple
    size: int
    values: np.ndarray


def correlate(f1, f2):
    """Batched all-pairs correlation: [B, D, H, W] x2 -> [B, H, W, H, W]."""
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ in shape: {f1.shape} vs {f2.shape}")
    b, d, h, w = f1.shape
    a = T.transpose(T.reshape(f1, (b, d, h * w)), (0, 2, 1))
    c = T.reshape(f2, (b, d, h * w))
    corr = T.matmul(a, c) * (1.0 / math.sqrt(d))
    return T.reshape(corr, (b, h, w, h, w))


def build_cost_volume(f1, f2):
    v1 = f1.values if isinstance(f1, FeatureMap) else f1
    v2 = f2.values if isinstance(f2, FeatureMap) else f2
    if v1.shape != v2.shape:
        raise ShapeError(f"feature maps differ in shape: {v1.shape} vs {v2.shape}")
    d = v1.shape[0]
    corr = correlate(T.reshape(v1, (1,) + v1.shape), T.reshape(v2, (1,) + v2.shape))
    return CostVolume(T.reshape(corr, corr.shape[1:]), 1.0 / math.sqrt(d))


def crop_patch(cv, source, center, size):
    """Bilinear ``size x size`` patch of source pixel ``source``'s cost map,
    centred at continuous (row, col) ``center``; outside samples are zero."""
    if size % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {size}")
    h, w = cv.values.shape[:2]
    i, j = source
    if not (0 <= i < h and 0 <= j < w):
        raise ShapeError(f"source pixel {source} outside {h}x{w} grid")
    maps = T.reshape(cv.values[i, j], (1, cv.values.shape[2], cv.values.shape[3]))
    patch = T.crop_patch(maps, np.asarray([center], dtype=np.float64), size)
    return CostPatch(tuple(center), size, patch.data[0])
