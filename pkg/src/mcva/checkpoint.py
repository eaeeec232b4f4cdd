"""Binary checkpoint format.

Layout (little endian): ``b"MCVA"``, u32 version, u32 entry count, then per
entry u16 name length, UTF-8 name, u8 rank, u32 dims[rank], float32 payload.
A u32-length-prefixed UTF-8 config echo closes the file.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"MCVA"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 array; optimizer state lives under "optim."
    config_text: str = ""
    history: dict = field(default_factory=dict, compare=False)  # not serialised

    @property
    def params(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}

    @property
    def optimizer_state(self):
        return {k: v for k, v in self.tensors.items() if k.startswith("optim.")}


def encode_checkpoint(ckpt):
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 255:
            raise FormatError(f"tensor {name!r} has rank {a.ndim} > 255")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    echo = ckpt.config_text.encode("utf-8")
    out.append(struct.pack("<I", len(echo)) + echo)
    return b"".join(out)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf, path="<bytes>"):
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not UTF-8") from None
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    (elen,) = r.unpack("<I", "config echo length")
    try:
        echo = r.take(elen, "config echo").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config echo is not UTF-8") from None
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after config echo")
    return Checkpoint(tensors, echo)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(ckpt))


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    return decode_checkpoint(buf, path)
