"""Binary grid dumps (VOGD), parameter checkpoints (VOCP), PPM heatmaps.

All integers little-endian.

VOGD: b"VOGD", u16 version, u8 dtype tag (0=f32, 1=u8), u8 rank,
      rank x u32 extents, row-major payload.
VOCP: b"VOCP", u16 version, u32 tensor count, then per tensor
      u16 name length, utf-8 name, u8 rank, rank x u32 extents,
      f32 payload.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

VOGD_MAGIC = b"VOGD"
VOCP_MAGIC = b"VOCP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def _read_header(f: BinaryIO, magic: bytes) -> int:
    m = _read_exact(f, 4)
    if m != magic:
        raise FormatError(f"bad magic {m!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(f, 2))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return version


def _read_extents(f: BinaryIO) -> tuple[int, ...]:
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    return struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))


# -------------------------------------------------------------------- VOGD

def encode_vogd(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"VOGD stores float32 or uint8, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    tag = _TAGS[arr.dtype]
    head = VOGD_MAGIC + struct.pack("<HBB", VERSION, tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode_vogd(f: BinaryIO) -> np.ndarray:
    _read_header(f, VOGD_MAGIC)
    (tag,) = struct.unpack("<B", _read_exact(f, 1))
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    shape = _read_extents(f)
    dt = _DTYPES[tag]
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    arr = np.frombuffer(_read_exact(f, n), dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save_vogd(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_vogd(arr))


def load_vogd(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_vogd(f)


# -------------------------------------------------------------------- VOCP

def encode_vocp(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [VOCP_MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_vocp(f: BinaryIO) -> dict[str, np.ndarray]:
    _read_header(f, VOCP_MAGIC)
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, ln).decode("utf-8")
        shape = _read_extents(f)
        n = int(np.prod(shape, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(_read_exact(f, n), dtype="<f4").reshape(shape).astype(np.float32)
    if f.read(1):
        raise FormatError("trailing bytes after last tensor")
    return tensors


def save_vocp(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_vocp(tensors))


def load_vocp(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_vocp(f)


# --------------------------------------------------------------------- PPM

# cool -> warm anchors; 0.5 maps to the neutral middle
_COLORMAP = np.array([
    [59, 76, 192],
    [221, 221, 221],
    [180, 4, 38],
], dtype=np.float64)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB along a blue-grey-red ramp."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * (len(_COLORMAP) - 1)
    i = np.minimum(np.floor(v).astype(np.int64), len(_COLORMAP) - 2)
    w = (v - i)[..., None]
    rgb = _COLORMAP[i] * (1 - w) + _COLORMAP[i + 1] * w
    return np.round(rgb).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise FormatError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
