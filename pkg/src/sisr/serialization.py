"""Named-tensor binary container shared by checkpoints, images and saliency export.

Layout (little-endian): magic b"SISR", format version u32, tensor count u32,
then per tensor: name length u16 + UTF-8 name, rank u8, dims u32 each, f64
payload in row-major order.  Checkpoints append a trailing UTF-8 JSON config
snapshot after the last tensor.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SISR"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _write_tensor(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor container")
    return buf


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims)
    return name, data.astype(np.float64)


def save_tensors(path, tensors, config: dict | None = None):
    """Write an ordered name -> ndarray mapping, optionally with a JSON trailer."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, np.asarray(arr, dtype=np.float64))
        if config is not None:
            fh.write(json.dumps(config, sort_keys=True).encode("utf-8"))


def load_tensors(path):
    """Read a container back; returns (OrderedDict name -> ndarray, config or None)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise FormatError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = OrderedDict()
        for _ in range(count):
            name, arr = _read_tensor(fh)
            tensors[name] = arr
        trailer = fh.read()
    config = json.loads(trailer.decode("utf-8")) if trailer else None
    return tensors, config


def save_image(path, pixels: np.ndarray):
    """Store one H x W x C image as a single tensor named "image"."""
    save_tensors(path, {"image": pixels})


def load_image(path) -> np.ndarray:
    tensors, _ = load_tensors(path)
    return tensors["image"]
