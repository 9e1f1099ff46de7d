"""On-disk formats: raw tensors, PPM images, simplicial complexes, checkpoints.

All multi-byte values are little-endian.

Raw tensor (``.vten``)::

    magic   4 bytes  b"VTEN"
    version u8       1
    dtype   u8       4 = float32, 8 = float64
    ndim    u16
    dims    ndim x u32
    data    prod(dims) values, row-major

Simplicial complex (``.vsc``)::

    magic   4 bytes  b"VSCX"
    version u32      1
    epsilon f64
    N       u32      number of simplices
    ndim    u32, dims ndim x u32    image shape
    base    float64 image
    N times: M u32, then M float64 vertex images

Encoder checkpoint (``.vckpt``)::

    magic   8 bytes  b"VESCAENC"
    version u32      1
    hlen    u32      header length in bytes
    header  UTF-8 JSON {"spec": {...}, "variant": str,
                        "params": [[name, [dims...]], ...]}
    data    float32 arrays in header order, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderSpec
from .geometry import Simplex, SimplicialComplex

TENSOR_MAGIC = b"VTEN"
COMPLEX_MAGIC = b"VSCX"
CHECKPOINT_MAGIC = b"VESCAENC"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ParseError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                             self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, shape, dtype, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dtype.itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def magic(self, expected: bytes):
        got = self.take(len(expected), "magic")
        if got != expected:
            raise ParseError(f"bad magic {got!r}, expected {expected!r}", 0)

    def done(self):
        if self.pos != len(self.buf):
            raise ParseError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


# --- raw tensors -------------------------------------------------------------

def encode_tensor(arr, dtype=np.float32) -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt.itemsize not in _DTYPES or dt.kind != "f":
        raise ValueError("raw tensors hold float32 or float64 data")
    arr = np.ascontiguousarray(arr, dtype=dt)
    head = TENSOR_MAGIC + struct.pack("<BBH", 1, dt.itemsize, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    r.magic(TENSOR_MAGIC)
    version, code, ndim = r.unpack("BBH", "header")
    if version != 1:
        raise ParseError(f"unsupported tensor version {version}", 4)
    if code not in _DTYPES:
        raise ParseError(f"unknown dtype code {code}", 5)
    shape = r.unpack(f"{ndim}I", "dims")
    out = r.array(shape, _DTYPES[code], "tensor data")
    r.done()
    return out.astype(_DTYPES[code].newbyteorder("="))


def save_tensor(path, arr, dtype=np.float32) -> None:
    Path(path).write_bytes(encode_tensor(arr, dtype))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- PPM ---------------------------------------------------------------------

def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM output needs an (H, W, 3) image")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    pos = 0
    fields = []

    def skip_ws(p):
        while p < len(buf):
            if buf[p:p + 1] == b"#":
                while p < len(buf) and buf[p:p + 1] not in (b"\n", b"\r"):
                    p += 1
            elif buf[p:p + 1].isspace():
                p += 1
            else:
                break
        return p

    while len(fields) < 4:
        pos = skip_ws(pos)
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header", pos)
        fields.append(buf[start:pos])
    if fields[0] != b"P6":
        raise ParseError(f"not a binary PPM (magic {fields[0]!r})", 0)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ParseError("non-numeric PPM header field", pos) from exc
    if maxval != 255:
        raise ParseError(f"only 8-bit PPM is supported (maxval {maxval})", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header", pos)
    pos += 1
    r = _Reader(buf)
    r.pos = pos
    data = r.array((h, w, 3), np.dtype(np.uint8), "PPM pixel data")
    r.done()
    return data.astype(np.float64) / 255.0


def save_image(path, image) -> None:
    """Write an image; ``.ppm`` paths get 8-bit PPM, anything else a raw float32 tensor."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        path.write_bytes(encode_ppm(image))
    else:
        save_tensor(path, image, np.float32)


def load_image(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    return decode_tensor(buf)


# --- simplicial complexes ----------------------------------------------------

def encode_complex(k: SimplicialComplex) -> bytes:
    base = np.ascontiguousarray(k.base_image, dtype="<f8")
    parts = [COMPLEX_MAGIC, struct.pack("<IdI", 1, float(k.epsilon), len(k.simplices)),
             struct.pack("<I", base.ndim), struct.pack(f"<{base.ndim}I", *base.shape),
             base.tobytes()]
    for s in k.simplices:
        parts.append(struct.pack("<I", s.num_vertices))
        for v in s.vertices:
            parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_complex(buf: bytes) -> SimplicialComplex:
    r = _Reader(buf)
    r.magic(COMPLEX_MAGIC)
    version, epsilon, n = r.unpack("IdI", "header")
    if version != 1:
        raise ParseError(f"unsupported complex version {version}", 4)
    (ndim,) = r.unpack("I", "ndim")
    shape = r.unpack(f"{ndim}I", "dims")
    f8 = np.dtype("<f8")
    base = r.array(shape, f8, "base image")
    simplices = []
    for _ in range(n):
        (m,) = r.unpack("I", "vertex count")
        verts = [r.array(shape, f8, "vertex") for _ in range(m)]
        simplices.append(Simplex(base, verts, epsilon))
    r.done()
    return SimplicialComplex(simplices)


def save_complex(path, k: SimplicialComplex) -> None:
    Path(path).write_bytes(encode_complex(k))


def load_complex(path) -> SimplicialComplex:
    return decode_complex(Path(path).read_bytes())


# --- encoder checkpoints -----------------------------------------------------

def encode_checkpoint(encoder: Encoder, variant: str = "surrogate") -> bytes:
    header = {
        "spec": encoder.spec.to_dict(),
        "variant": variant,
        "params": [[name, list(arr.shape)] for name, arr in encoder.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", 1, len(hb)), hb]
    for arr in encoder.params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, dtype=np.float32) -> tuple:
    """Returns ``(encoder, variant)``."""
    r = _Reader(buf)
    r.magic(CHECKPOINT_MAGIC)
    version, hlen = r.unpack("II", "header")
    if version != 1:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    start = r.pos
    try:
        header = json.loads(r.take(hlen, "JSON header").decode("utf-8"))
        spec = EncoderSpec(**header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"invalid checkpoint header: {exc}", start) from exc
    params = {}
    f4 = np.dtype("<f4")
    for name, shape in header["params"]:
        params[name] = r.array(tuple(shape), f4, f"weights {name}").astype(np.float32)
    r.done()
    return Encoder(spec, params, dtype), header.get("variant", "")


def save_checkpoint(path, encoder: Encoder, variant: str = "surrogate") -> None:
    Path(path).write_bytes(encode_checkpoint(encoder, variant))


def load_checkpoint(path, dtype=np.float32) -> tuple:
    return decode_checkpoint(Path(path).read_bytes(), dtype)
