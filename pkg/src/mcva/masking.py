"""Block-sharing cost-map masking, mask pyramids and the copy-oracle leakage metric."""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

LEVELS = 4  # M^0 (full) .. M^3 (1/8)


@dataclass
class BlockPartition:
    block_id: np.ndarray  # [H, W] int64
    num_blocks: int
    side_range: tuple


@dataclass
class MaskPyramidSet:
    """Per-block base masks shared by every source pixel of the block.

    ``base`` is [num_blocks, Hc/8, Wc/8] with True = visible (1), False = masked (0).
    """

    partition: BlockPartition
    base: np.ndarray
    ratio: float
    cost_shape: tuple

    def pixel_base(self):
        """[H, W, Hc/8, Wc/8] base mask of every source pixel."""
        return self.base[self.partition.block_id]

    def level(self, i):
        """[H, W, Hc/2^i, Wc/2^i] mask M^i of every source pixel."""
        return upsample(self.pixel_base(), 2 ** (LEVELS - 1 - i))

    def pyramid(self, source):
        b = self.base[self.partition.block_id[source]]
        return build_pyramid(b)


def round_half_up(x):
    return int(math.floor(x + 0.5))


def default_side_range(extent):
    """Block side range along one grid axis of length ``extent``."""
    if extent >= 32:
        return (32, 120)
    return (max(1, extent // 4), extent)


def partition_blocks(h, w, side_range=None, rng=None):
    """Tile an h x w grid with axis-aligned rectangles.

    Row bands get heights drawn from ``side_range`` until the grid is covered
    (the last one clipped); each band is then cut into widths the same way.
    ``side_range`` of None uses :func:`default_side_range` per axis.
    """
    rng = np.random.default_rng() if rng is None else rng
    rows = default_side_range(h) if side_range is None else tuple(side_range)
    cols = default_side_range(w) if side_range is None else tuple(side_range)
    for lo, hi in (rows, cols):
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid block side range [{lo}, {hi}]")
    block_id = np.empty((h, w), dtype=np.int64)
    nid = 0
    r = 0
    while r < h:
        bh = min(int(rng.integers(rows[0], rows[1] + 1)), h - r)
        c = 0
        while c < w:
            bw = min(int(rng.integers(cols[0], cols[1] + 1)), w - c)
            block_id[r:r + bh, c:c + bw] = nid
            nid += 1
            c += bw
        r += bh
    return BlockPartition(block_id, nid, rows if rows == cols else (rows, cols))


def singleton_partition(h, w):
    return BlockPartition(np.arange(h * w, dtype=np.int64).reshape(h, w), h * w, (1, 1))


def masked_count(ratio, cells):
    return round_half_up(ratio * cells)


def sample_base_mask(h8, w8, ratio, rng):
    """Binary [h8, w8] grid (True = visible) with exactly round(ratio*cells) zeros."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    cells = h8 * w8
    mask = np.ones(cells, dtype=bool)
    mask[rng.choice(cells, size=masked_count(ratio, cells), replace=False)] = False
    return mask.reshape(h8, w8)


def upsample(mask, factor):
    """Nearest-neighbour upsampling of the last two axes."""
    if factor == 1:
        return mask
    return np.repeat(np.repeat(mask, factor, axis=-2), factor, axis=-1)


def build_pyramid(base, cost_shape=None):
    """[M^0, M^1, M^2, M^3] from a base mask at 1/8 resolution."""
    base = np.asarray(base, dtype=bool)
    h8, w8 = base.shape[-2:]
    if cost_shape is not None:
        hc, wc = cost_shape
        if hc % 8 or wc % 8 or hc // 8 != h8 or wc // 8 != w8:
            raise ShapeError(f"cost map {hc}x{wc} does not match a {h8}x{w8} base mask at 1/8")
    return [upsample(base, 2 ** (LEVELS - 1 - i)) for i in range(LEVELS)]


def generate_block_sharing_masks(partition, hc, wc, ratio, rng):
    """One base mask per block; every pixel of a block shares its pyramid."""
    if hc % 8 or wc % 8:
        raise ShapeError(f"cost map extents {hc}x{wc} must be divisible by 8")
    base = np.stack([sample_base_mask(hc // 8, wc // 8, ratio, rng)
                     for _ in range(partition.num_blocks)])
    return MaskPyramidSet(partition, base, ratio, (hc, wc))


def generate_random_masks(h, w, hc, wc, ratio, rng):
    """Per-pixel masking: the same pipeline over a partition of singletons."""
    return generate_block_sharing_masks(singleton_partition(h, w), hc, wc, ratio, rng)


def leakage_oracle_mse(cv, masks):
    """MSE of reconstructing masked costs by copying from the nearest source
    pixel (Euclidean, ties row-major) that sees the cell; 0 without a donor."""
    values = cv.values.data if hasattr(cv, "values") else np.asarray(cv)
    h, w, hc, wc = values.shape
    if (hc, wc) != tuple(masks.cost_shape) or masks.partition.block_id.shape != (h, w):
        raise ShapeError("masks do not match the cost volume extents")
    h8, w8 = hc // 8, wc // 8
    p, c = h * w, h8 * w8
    visible = masks.pixel_base().reshape(p, c)
    if visible.all():
        return 0.0
    yy, xx = np.divmod(np.arange(p), w)
    donors = kernels.nearest_donors(visible, np.stack([yy, xx], axis=1))
    # [P, C, 64]: cost values grouped by the base cell that controls them
    cells = values.reshape(p, h8, 8, w8, 8).transpose(0, 1, 3, 2, 4).reshape(p, c, 64)
    cells = cells.astype(np.float64)
    hidden_px, hidden_cell = np.nonzero(~visible)
    target = cells[hidden_px, hidden_cell]
    d = donors[hidden_px, hidden_cell]
    pred = np.where((d >= 0)[:, None], cells[np.maximum(d, 0), hidden_cell], 0.0)
    return float(np.mean((target - pred) ** 2))
