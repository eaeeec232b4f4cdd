"""Binary PPM and Middlebury .flo readers/writers, plus flow colour coding."""
import struct

import numpy as np

from .errors import FormatError

FLO_MAGIC = 202021.25


def write_ppm(path, image):
    """image: [3, H, W] floats in [0, 1] -> binary P6 with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"{path}: PPM needs a [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def _ppm_tokens(buf, path):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    with open(path, "rb") as f:
        buf = f.read()
    tokens, offset = _ppm_tokens(buf, path)
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: unsupported PPM header {w}x{h} maxval {maxval}")
    data = buf[offset:offset + w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_flo(path, flow):
    """flow: [2, H, W] (u, v) -> Middlebury .flo (little endian)."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"{path}: flow must be [2, H, W], got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.transpose(1, 2, 0).astype("<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo size {w}x{h}")
    n = w * h * 2
    if len(buf) != 12 + 4 * n:
        raise FormatError(f"{path}: .flo payload has {len(buf) - 12} bytes, expected {4 * n}")
    data = np.frombuffer(buf[12:], dtype="<f4").reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float32)


def flow_to_color(flow, max_mag=None):
    """HSV colour wheel: hue = direction, saturation = magnitude. Returns [3, H, W]."""
    u, v = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(u, v)
    max_mag = max_mag or max(float(mag.max()), 1e-9)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    table = [(one, t, p), (q, one, p), (p, one, t), (p, q, one), (t, p, one), (one, p, q)]
    rgb = np.zeros((3,) + sat.shape)
    for k, chans in enumerate(table):
        sel = i == k
        for c in range(3):
            rgb[c][sel] = chans[c][sel]
    return rgb
