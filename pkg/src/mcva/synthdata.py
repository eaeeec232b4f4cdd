"""Reproducible synthetic frame pairs with ground-truth flow, and the dataset layout.

Flow convention: ``flow[:, y, x] = (u, v)`` moves frame-1 pixel (x, y) to
(x + u, y + v) in frame 2, so ``warp_image(frame2, flow) ~= frame1``.
"""
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, FormatError
from .flowio import read_flo, read_ppm, write_flo, write_ppm


@dataclass
class FlowConfig:
    max_translation: float = 8.0
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    perturbation: float = 2.0
    perturbation_cells: int = 3
    cap: float = 12.0

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)

    def gradient_bound(self, h, w):
        """Upper bound on |f(x + e) - f(x)| for a unit grid step e."""
        rot = math.radians(self.max_rotation_deg)
        smax = max(abs(s) for s in self.scale_range)
        linear = smax * (1 - math.cos(rot) + math.sin(rot)) + max(abs(s - 1) for s in self.scale_range)
        cell = (min(h, w) - 1) / self.perturbation_cells
        return linear + 2 * math.sqrt(2) * self.perturbation / cell


@dataclass
class ScenePair:
    frame1: np.ndarray
    frame2: np.ndarray
    flow_gt: np.ndarray = None
    seed: object = None


def bilinear_sample(img, ys, xs):
    """Sample [C, H, W] at float coordinates with edge clamping."""
    _, h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    return ((1 - wy) * ((1 - wx) * img[:, y0, x0] + wx * img[:, y0, x1])
            + wy * ((1 - wx) * img[:, y1, x0] + wx * img[:, y1, x1]))


def _resize(coarse, h, w):
    gh, gw = coarse.shape[-2:]
    ys = np.linspace(0, gh - 1, h)[:, None] * np.ones((1, w))
    xs = np.ones((h, 1)) * np.linspace(0, gw - 1, w)[None, :]
    return bilinear_sample(coarse, ys, xs)


def _polygon_mask(h, w, verts):
    """Even-odd rule fill of a closed polygon given as [(x, y), ...]."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        if y1 == y2:
            continue
        crosses = (yy >= min(y1, y2)) & (yy < max(y1, y2))
        xint = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xx < xint)
    return inside


def make_texture(seed, h, w, octaves=4, polygons=(4, 9)):
    """Multi-octave value noise plus random polygons, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    img = np.zeros((3, h, w))
    amp, total = 1.0, 0.0
    base = max(2, min(h, w) // 32)
    for o in range(octaves):
        g = base * 2 ** o
        img += amp * _resize(rng.random((3, g + 1, g + 1)), h, w)
        total += amp
        amp *= 0.6
    img /= total
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    img = (img - lo) / np.maximum(hi - lo, 1e-9)
    for _ in range(int(rng.integers(*polygons))):
        cy, cx = rng.random(2) * (h, w)
        radius = rng.uniform(0.05, 0.2) * min(h, w)
        k = int(rng.integers(3, 8))
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = radius * rng.uniform(0.5, 1.0, k)
        verts = list(zip(cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
        inside = _polygon_mask(h, w, verts)
        color = rng.random(3)[:, None]
        img[:, inside] = 0.5 * color + 0.5 * img[:, inside]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def affine_flow(h, w, translation=(0.0, 0.0), rotation_deg=0.0, scale=1.0):
    """Flow of x -> c + s R (x - c) + t about the image centre c; [2, H, W] (u, v)."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    th = math.radians(rotation_deg)
    dx, dy = xx - cx, yy - cy
    nx = cx + scale * (math.cos(th) * dx - math.sin(th) * dy) + translation[0]
    ny = cy + scale * (math.sin(th) * dx + math.cos(th) * dy) + translation[1]
    return np.stack([nx - xx, ny - yy])


def cap_magnitude(flow, cap):
    mag = np.hypot(flow[0], flow[1])
    scale = np.where(mag > cap, cap / np.maximum(mag, 1e-12), 1.0)
    return flow * scale


def sample_flow_field(seed, h, w, cfg=None):
    """Random affine motion plus a smooth low-frequency perturbation, capped."""
    cfg = cfg or FlowConfig()
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi)
    mag = cfg.max_translation * math.sqrt(rng.random())
    t = (mag * math.cos(ang), mag * math.sin(ang))
    rot = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    s = rng.uniform(*cfg.scale_range)
    flow = affine_flow(h, w, t, rot, s)
    if cfg.perturbation > 0:
        g = cfg.perturbation_cells + 1
        coarse = rng.uniform(-1, 1, (2, g, g))
        pert = _resize(coarse, h, w)
        peak = np.hypot(pert[0], pert[1]).max()
        flow = flow + pert * (cfg.perturbation / max(peak, 1e-9))
    return cap_magnitude(flow, cfg.cap).astype(np.float32)


def warp_image(img, flow):
    """Backward warp: out(x) = img(x + flow(x)), bilinear, edges clamped."""
    img = np.asarray(img)
    flow = np.asarray(flow, dtype=np.float64)
    if img.shape[1:] != flow.shape[1:]:
        raise ValueError(f"image {img.shape} and flow {flow.shape} differ in size")
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = bilinear_sample(img.astype(np.float64), yy + flow[1], xx + flow[0])
    return out.astype(img.dtype)


def invert_flow(flow, iters=20):
    """Displacement b on the target grid with b(y) = -flow(y + b(y))."""
    back = -np.asarray(flow, dtype=np.float64)
    for _ in range(iters):
        back = -warp_image(np.asarray(flow, dtype=np.float64), back)
    return back


def make_scene_pair(seed, h, w, cfg=None, noise=0.01, labeled=True):
    """frame1 is a texture crop; frame2 shows the same canvas moved by the flow."""
    cfg = cfg or FlowConfig()
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [seed])
    tex_seed, flow_seed, noise_seed = ss.spawn(3)
    pad = int(math.ceil(cfg.cap)) + 4
    canvas = make_texture(tex_seed, h + 2 * pad, w + 2 * pad)
    flow = sample_flow_field(flow_seed, h + 2 * pad, w + 2 * pad, cfg)
    moved = warp_image(canvas, invert_flow(flow))
    frame1 = canvas[:, pad:pad + h, pad:pad + w]
    frame2 = moved[:, pad:pad + h, pad:pad + w]
    if noise > 0:
        frame2 = frame2 + np.random.default_rng(noise_seed).normal(0.0, noise, frame2.shape)
    frame2 = np.clip(frame2, 0.0, 1.0).astype(np.float32)
    gt = flow[:, pad:pad + h, pad:pad + w].copy() if labeled else None
    return ScenePair(np.ascontiguousarray(frame1), frame2, gt, seed)


# ------------------------------------------------------------------ on disk


MANIFEST_KEYS = ("seed", "count", "width", "height", "noise", "labeled", "motion")


def write_dataset(out_dir, count, seed, h, w, labeled=False, noise=0.01, static=False):
    """Write ``pair_%05d/{frame1,frame2}.ppm`` (+ ``flow.flo``) and ``manifest.txt``."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = FlowConfig.zero() if static else FlowConfig()
    for i in range(count):
        pair = make_scene_pair([seed, i], h, w, cfg, noise, labeled)
        d = os.path.join(out_dir, f"pair_{i:05d}")
        os.makedirs(d, exist_ok=True)
        write_ppm(os.path.join(d, "frame1.ppm"), pair.frame1)
        write_ppm(os.path.join(d, "frame2.ppm"), pair.frame2)
        if labeled:
            write_flo(os.path.join(d, "flow.flo"), pair.flow_gt)
    manifest = {"seed": seed, "count": count, "width": w, "height": h, "noise": noise,
                "labeled": int(labeled), "motion": "static" if static else "random"}
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for k in MANIFEST_KEYS:
            f.write(f"{k}={manifest[k]}\n")
    return manifest


def read_manifest(path):
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


class Dataset:
    """Frame pairs of a dataset directory, loaded lazily and memoised."""

    def __init__(self, root):
        mpath = os.path.join(root, "manifest.txt")
        if not os.path.isfile(mpath):
            raise DatasetError(f"{root}: missing manifest.txt")
        self.root = root
        self.manifest = read_manifest(mpath)
        try:
            self.count = int(self.manifest["count"])
            self.height = int(self.manifest["height"])
            self.width = int(self.manifest["width"])
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{mpath}: incomplete manifest") from exc
        self.labeled = self.manifest.get("labeled", "0") == "1"
        self._cache = {}

    def __len__(self):
        return self.count

    def pair_dir(self, i):
        return os.path.join(self.root, f"pair_{i:05d}")

    def __getitem__(self, i):
        if i not in self._cache:
            d = self.pair_dir(i)
            if not os.path.isdir(d):
                raise DatasetError(f"{d}: missing pair directory")
            f1 = read_ppm(os.path.join(d, "frame1.ppm"))
            f2 = read_ppm(os.path.join(d, "frame2.ppm"))
            fpath = os.path.join(d, "flow.flo")
            gt = read_flo(fpath) if os.path.isfile(fpath) else None
            self._cache[i] = ScenePair(f1, f2, gt, i)
        return self._cache[i]

    def require_labels(self):
        if not self.labeled:
            raise DatasetError(f"{self.root}: dataset has no flow labels")
