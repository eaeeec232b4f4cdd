"""Hot loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``MCVA_NUMBA`` is not
set to ``0``. Both paths are importable directly (``*_numba`` / ``*_numpy``)
so tests and the benchmark can compare them.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MCVA_NUMBA", "1") != "0"


# ---------------------------------------------------------------- bilinear crop


def _lattice(size):
    r = (size - 1) // 2
    return np.arange(-r, r + 1, dtype=np.float64)


def crop_forward_numpy(maps, centers, size):
    """Bilinear crop of ``size x size`` windows; out-of-range corners read as 0.

    maps: [N, H, W]; centers: [N, 2] as (row, col).
    """
    n, h, w = maps.shape
    off = _lattice(size)
    ys = centers[:, 0, None].astype(np.float64) + off[None, :]  # [N, S]
    xs = centers[:, 1, None].astype(np.float64) + off[None, :]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = (ys - y0).astype(maps.dtype)
    wx = (xs - x0).astype(maps.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    flat = maps.reshape(n, h * w)
    rows = np.arange(n)[:, None, None]
    out = np.zeros((n, size, size), dtype=maps.dtype)
    for dy in (0, 1):
        yy = y0 + dy
        wy_c = wy if dy else 1 - wy
        vy = (yy >= 0) & (yy < h)
        for dx in (0, 1):
            xx = x0 + dx
            wx_c = wx if dx else 1 - wx
            vx = (xx >= 0) & (xx < w)
            valid = vy[:, :, None] & vx[:, None, :]
            idx = np.clip(yy, 0, h - 1)[:, :, None] * w + np.clip(xx, 0, w - 1)[:, None, :]
            vals = flat[rows, idx]
            wgt = wy_c[:, :, None] * wx_c[:, None, :]
            out += np.where(valid, wgt * vals, 0)
    return out


def crop_backward_numpy(grad, centers, size, h, w):
    """Adjoint of :func:`crop_forward_numpy` with respect to ``maps``."""
    n = grad.shape[0]
    off = _lattice(size)
    ys = centers[:, 0, None].astype(np.float64) + off[None, :]
    xs = centers[:, 1, None].astype(np.float64) + off[None, :]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = (ys - y0).astype(grad.dtype)
    wx = (xs - x0).astype(grad.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = np.zeros(n * h * w, dtype=grad.dtype)
    base = (np.arange(n) * h * w)[:, None, None]
    for dy in (0, 1):
        yy = y0 + dy
        wy_c = wy if dy else 1 - wy
        vy = (yy >= 0) & (yy < h)
        for dx in (0, 1):
            xx = x0 + dx
            wx_c = wx if dx else 1 - wx
            vx = (xx >= 0) & (xx < w)
            valid = vy[:, :, None] & vx[:, None, :]
            idx = base + yy[:, :, None] * w + xx[:, None, :]
            contrib = grad * wy_c[:, :, None] * wx_c[:, None, :]
            np.add.at(out, idx[valid], contrib[valid])
    return out.reshape(n, h, w)


# --------------------------------------------------------- nearest visible donor


def nearest_donors_numpy(visible, coords):
    """For every (pixel, cell) with the cell hidden, index of the nearest pixel
    that sees that cell; -1 where the cell is visible or no donor exists.

    visible: [P, C] bool, coords: [P, 2] int. Ties go to the lowest pixel index.
    """
    p, c = visible.shape
    out = np.full((p, c), -1, dtype=np.int64)
    cy = coords[:, 0].astype(np.int64)
    cx = coords[:, 1].astype(np.int64)
    for cell in range(c):
        vis = visible[:, cell]
        hidden = np.flatnonzero(~vis)
        donors = np.flatnonzero(vis)
        if hidden.size == 0 or donors.size == 0:
            continue
        d2 = (cy[hidden, None] - cy[None, donors]) ** 2 + (cx[hidden, None] - cx[None, donors]) ** 2
        # argmin returns the first minimum, donors are ascending -> row-major tie-break
        out[hidden, cell] = donors[np.argmin(d2, axis=1)]
    return out


# ------------------------------------------------------------- conv col2im


def col2im_numpy(gcols, stride, hp, wp):
    """Scatter-add column gradients [C, k, k, N, Ho, Wo] into a padded [C, N, Hp, Wp] image."""
    c, k, _, n, ho, wo = gcols.shape
    out = np.zeros((c, n, hp, wp), dtype=gcols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def crop_forward_numba(maps, centers, size):
        n, h, w = maps.shape
        r = (size - 1) // 2
        out = np.zeros((n, size, size), dtype=maps.dtype)
        for i in range(n):
            for a in range(size):
                y = centers[i, 0] + (a - r)
                y0 = int(np.floor(y))
                wy = y - y0
                for b in range(size):
                    x = centers[i, 1] + (b - r)
                    x0 = int(np.floor(x))
                    wx = x - x0
                    acc = 0.0
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= h:
                            continue
                        wyc = wy if dy == 1 else 1.0 - wy
                        for dx in range(2):
                            xx = x0 + dx
                            if xx < 0 or xx >= w:
                                continue
                            wxc = wx if dx == 1 else 1.0 - wx
                            acc += wyc * wxc * maps[i, yy, xx]
                    out[i, a, b] = acc
        return out

    @njit(cache=True)
    def crop_backward_numba(grad, centers, size, h, w):
        n = grad.shape[0]
        r = (size - 1) // 2
        out = np.zeros((n, h, w), dtype=grad.dtype)
        for i in range(n):
            for a in range(size):
                y = centers[i, 0] + (a - r)
                y0 = int(np.floor(y))
                wy = y - y0
                for b in range(size):
                    x = centers[i, 1] + (b - r)
                    x0 = int(np.floor(x))
                    wx = x - x0
                    g = grad[i, a, b]
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= h:
                            continue
                        wyc = wy if dy == 1 else 1.0 - wy
                        for dx in range(2):
                            xx = x0 + dx
                            if xx < 0 or xx >= w:
                                continue
                            wxc = wx if dx == 1 else 1.0 - wx
                            out[i, yy, xx] += wyc * wxc * g
        return out

    @njit(cache=True)
    def nearest_donors_numba(visible, coords):
        p, c = visible.shape
        out = np.full((p, c), -1, dtype=np.int64)
        for cell in range(c):
            for i in range(p):
                if visible[i, cell]:
                    continue
                best = -1
                best_d = np.iinfo(np.int64).max
                for j in range(p):
                    if not visible[j, cell]:
                        continue
                    dy = coords[i, 0] - coords[j, 0]
                    dx = coords[i, 1] - coords[j, 1]
                    d = dy * dy + dx * dx
                    if d < best_d:
                        best_d = d
                        best = j
                out[i, cell] = best
        return out

    @njit(cache=True)
    def col2im_numba(gcols, stride, hp, wp):
        c, k, _, n, ho, wo = gcols.shape
        out = np.zeros((c, n, hp, wp), dtype=gcols.dtype)
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    for ni in range(n):
                        for i in range(ho):
                            row = i * stride + di
                            for j in range(wo):
                                out[ci, ni, row, j * stride + dj] += gcols[ci, di, dj, ni, i, j]
        return out


def col2im(gcols, stride, hp, wp):
    gcols = np.ascontiguousarray(gcols)
    if USE_NUMBA:
        return col2im_numba(gcols, stride, hp, wp)
    return col2im_numpy(gcols, stride, hp, wp)


def crop_forward(maps, centers, size):
    maps = np.ascontiguousarray(maps)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if USE_NUMBA:
        return crop_forward_numba(maps, centers, size)
    return crop_forward_numpy(maps, centers, size)


def crop_backward(grad, centers, size, h, w):
    grad = np.ascontiguousarray(grad)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    if USE_NUMBA:
        return crop_backward_numba(grad, centers, size, h, w)
    return crop_backward_numpy(grad, centers, size, h, w)


def nearest_donors(visible, coords):
    visible = np.ascontiguousarray(visible, dtype=np.bool_)
    coords = np.ascontiguousarray(coords, dtype=np.int64)
    if USE_NUMBA:
        return nearest_donors_numba(visible, coords)
    return nearest_donors_numpy(visible, coords)
