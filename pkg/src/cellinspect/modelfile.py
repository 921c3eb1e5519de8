"""Binary container for trained models (CNNs and SVM pipelines).

Layout, all little-endian::

    magic       4 bytes  b"CIMF"
    version     u16
    arch id     u16 length + utf-8
    classes     u16
    metadata    u32 length + utf-8 JSON (sorted keys)
    n_tensors   u32
    headers     per tensor: u16 name length + utf-8 name, u8 ndim, u32 dims...
    payload     float32 values of every tensor, in header order
    checksum    u32 CRC-32 of every preceding byte
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CIMF"
VERSION = 1


class ModelFileError(ValueError):
    pass


def encode(arch, n_classes, meta, tensors):
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    a = arch.encode()
    out += struct.pack("<H", len(a)) + a
    out += struct.pack("<H", n_classes)
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(m)) + m
    out += struct.pack("<I", len(tensors))
    arrays = []
    for name, t in tensors.items():
        t = np.asarray(t)
        nm = name.encode()
        out += struct.pack("<H", len(nm)) + nm
        out += struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        arrays.append(t)
    for t in arrays:
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFileError("truncated model file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf):
    if len(buf) < len(MAGIC) + 6:
        raise ModelFileError("truncated model file")
    if buf[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    if zlib.crc32(body) != crc:
        raise ModelFileError("checksum mismatch")
    (alen,) = r.unpack("<H")
    arch = r.take(alen).decode()
    (n_classes,) = r.unpack("<H")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode())
    (count,) = r.unpack("<I")
    headers = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        headers.append((name, r.unpack(f"<{ndim}I") if ndim else ()))
    tensors = {}
    for name, shape in headers:
        size = int(np.prod(shape, dtype=np.int64))
        raw = r.take(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise ModelFileError("trailing bytes before checksum")
    return arch, n_classes, meta, tensors


def write(path, arch, n_classes, meta, tensors):
    Path(path).write_bytes(encode(arch, n_classes, meta, tensors))


def read(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc
    return decode(buf)
