"""Binary voxel files and PPM images.

Voxel file (binary occupancy)::

    b"RVOX1" | u32 dx | u32 dy | u32 dz | ceil(dx*dy*dz / 8) bytes

All integers little-endian. Occupancy is bit-packed with x varying
fastest, then y, then z; within a byte the first voxel is the least
significant bit. Unused trailing bits are zero.

Probability variant: b"RVOXF", the same dims, then dx*dy*dz little-endian
float32 values in the same x-fastest order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"RVOX1"
MAGIC_FLOAT = b"RVOXF"
_DIMS = struct.Struct("<3I")
_HEADER = len(MAGIC) + _DIMS.size


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def encode_voxels(v: np.ndarray) -> bytes:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"voxel grid must be 3-d, got shape {v.shape}")
    bits = np.packbits(v.astype(bool).ravel(order="F"), bitorder="little")
    return MAGIC + _DIMS.pack(*v.shape) + bits.tobytes()


def encode_voxels_float(v: np.ndarray) -> bytes:
    v = np.asarray(v, dtype="<f4")
    if v.ndim != 3:
        raise ValueError(f"voxel grid must be 3-d, got shape {v.shape}")
    return MAGIC_FLOAT + _DIMS.pack(*v.shape) + v.ravel(order="F").tobytes()


def _parse_header(blob: bytes, path, magic: bytes):
    if len(blob) < len(magic):
        raise FormatError("truncated magic", offset=len(blob), path=path)
    if blob[:len(magic)] != magic:
        raise FormatError(f"bad magic {blob[:len(magic)]!r}, expected {magic!r}", offset=0, path=path)
    if len(blob) < _HEADER:
        raise FormatError("truncated dimensions", offset=len(blob), path=path)
    dims = _DIMS.unpack_from(blob, len(magic))
    if 0 in dims:
        raise FormatError(f"zero dimension in {dims}", offset=len(magic), path=path)
    return dims


def decode_voxels(blob: bytes, path=None) -> np.ndarray:
    dims = _parse_header(blob, path, MAGIC)
    n = dims[0] * dims[1] * dims[2]
    need = (n + 7) // 8
    payload = blob[_HEADER:]
    if len(payload) < need:
        raise FormatError(f"truncated payload: {len(payload)} of {need} bytes", offset=len(blob), path=path)
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes", offset=_HEADER + need, path=path)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if bits[n:].any():
        raise FormatError("nonzero padding bits", offset=len(blob) - 1, path=path)
    return bits[:n].astype(bool).reshape(dims, order="F")


def decode_voxels_float(blob: bytes, path=None) -> np.ndarray:
    dims = _parse_header(blob, path, MAGIC_FLOAT)
    need = 4 * dims[0] * dims[1] * dims[2]
    payload = blob[_HEADER:]
    if len(payload) != need:
        kind = "truncated" if len(payload) < need else "oversized"
        raise FormatError(f"{kind} payload: {len(payload)} of {need} bytes",
                          offset=min(len(blob), _HEADER + need), path=path)
    return np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)


def save_voxels(path, v: np.ndarray) -> None:
    _atomic_write(path, encode_voxels(v))


def load_voxels(path) -> np.ndarray:
    return decode_voxels(_read(path), path=path)


def save_voxels_float(path, v: np.ndarray) -> None:
    _atomic_write(path, encode_voxels_float(v))


def load_voxels_float(path) -> np.ndarray:
    return decode_voxels_float(_read(path), path=path)


# ---------------------------------------------------------------- PPM (P6)


def quantize(image: np.ndarray) -> np.ndarray:
    """(3, h, w) floats -> (h, w, 3) bytes, ``round(255 * v)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be (3, h, w), got {image.shape}")
    return np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8).transpose(1, 2, 0)


def encode_image(image: np.ndarray) -> bytes:
    q = np.ascontiguousarray(quantize(image))
    h, w, _ = q.shape
    return b"P6\n%d %d\n255\n" % (w, h) + q.tobytes()


def _ppm_tokens(blob: bytes, path, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", offset=pos, path=path)
        tokens.append((blob[start:pos], start))
    if pos >= len(blob):
        raise FormatError("truncated PPM header", offset=pos, path=path)
    return tokens, pos + 1  # one whitespace byte ends the header


def decode_image(blob: bytes, path=None) -> np.ndarray:
    """PPM bytes -> (3, h, w) float32 image with values ``byte / 255``."""
    if blob[:2] != b"P6":
        raise FormatError(f"bad magic {blob[:2]!r}, expected b'P6'", offset=0, path=path)
    tokens, data_start = _ppm_tokens(blob, path, 4)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PPM header field", offset=tokens[1][1], path=path) from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=tokens[3][1], path=path)
    need = w * h * 3
    payload = blob[data_start:]
    if len(payload) < need:
        raise FormatError(f"truncated pixel data: {len(payload)} of {need} bytes", offset=len(blob), path=path)
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes", offset=data_start + need, path=path)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def save_image(path, image: np.ndarray) -> None:
    _atomic_write(path, encode_image(image))


def load_image(path) -> np.ndarray:
    return decode_image(_read(path), path=path)
