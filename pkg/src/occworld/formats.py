"""Binary on-disk formats: OCCG voxel grids and raw label images.

OCCG layout (little-endian)::

    b"OCCG" | u16 version=1 | u16 kind | [u16 D, kind 2 only]
    | u32 X | u32 Y | u32 Z | f32 resolution | 3 x f32 origin | payload

kind 0 is one u8 category per voxel, kind 1 one f32 density, kind 2 D f32
features. Voxels are written x fastest, then y, then z.

Label images carry a 16-byte header ``magic(4) | u16 version | u16 channels
| u32 width | u32 height`` followed by row-major pixels.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import GridGeometry, SemanticGrid

OCCG_MAGIC = b"OCCG"
OCCG_VERSION = 1
KIND_CATEGORY, KIND_DENSITY, KIND_FEATURE = 0, 1, 2

LABEL_VERSION = 1
LABEL_MAGIC = {"depth": b"OCDP", "sem": b"OCSM", "rgb": b"OCRG"}
LABEL_DTYPE = {"depth": np.dtype("<f4"), "sem": np.dtype("u1"), "rgb": np.dtype("u1")}


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


class VersionError(FormatError):
    pass


def _f32_to_float(x: float) -> float:
    # shortest decimal that round-trips through f32, so 0.4 reads back as 0.4
    return float(str(np.float32(x)))


def _geometry_header(g: GridGeometry) -> bytes:
    return struct.pack("<3I4f", *g.dims, g.resolution, *g.origin)


def encode_occg(geometry: GridGeometry, payload: np.ndarray, kind: int) -> bytes:
    x, y, z = geometry.dims
    if kind == KIND_CATEGORY:
        arr = np.asarray(payload)
        if arr.shape != (x, y, z):
            raise FormatError(f"category payload shape {arr.shape} != {geometry.dims}")
        head = struct.pack("<4sHH", OCCG_MAGIC, OCCG_VERSION, kind)
        body = arr.astype("u1").transpose(2, 1, 0).tobytes()
    elif kind == KIND_DENSITY:
        arr = np.asarray(payload)
        if arr.shape != (x, y, z):
            raise FormatError(f"density payload shape {arr.shape} != {geometry.dims}")
        head = struct.pack("<4sHH", OCCG_MAGIC, OCCG_VERSION, kind)
        body = arr.astype("<f4").transpose(2, 1, 0).tobytes()
    elif kind == KIND_FEATURE:
        arr = np.asarray(payload)
        if arr.ndim != 4 or arr.shape[:3] != (x, y, z):
            raise FormatError(f"feature payload shape {arr.shape} incompatible with {geometry.dims}")
        d = arr.shape[3]
        if not 1 <= d < 2 ** 16:
            raise FormatError(f"feature dimension {d} out of range")
        head = struct.pack("<4sHHH", OCCG_MAGIC, OCCG_VERSION, kind, d)
        body = arr.astype("<f4").transpose(2, 1, 0, 3).tobytes()
    else:
        raise FormatError(f"unknown OCCG payload kind {kind}")
    return head + _geometry_header(geometry) + body


def decode_occg(data: bytes, source: str = "<bytes>") -> tuple[GridGeometry, np.ndarray, int]:
    """Parse OCCG bytes into (geometry, payload array, kind)."""
    if len(data) < 8 or data[:4] != OCCG_MAGIC:
        raise FormatError(f"{source}: bad magic bytes, expected {OCCG_MAGIC!r}")
    version, kind = struct.unpack_from("<HH", data, 4)
    if version != OCCG_VERSION:
        raise VersionError(f"{source}: OCCG version {version} unsupported (expected {OCCG_VERSION})")
    off = 8
    d = 1
    if kind == KIND_FEATURE:
        (d,) = struct.unpack_from("<H", data, off)
        off += 2
    elif kind not in (KIND_CATEGORY, KIND_DENSITY):
        raise FormatError(f"{source}: unknown payload kind {kind}")
    if len(data) < off + 28:
        raise FormatError(f"{source}: truncated header")
    x, y, z, res, ox, oy, oz = struct.unpack_from("<3I4f", data, off)
    off += 28
    geometry = GridGeometry((x, y, z), _f32_to_float(res), tuple(_f32_to_float(o) for o in (ox, oy, oz)))
    dtype = np.dtype("u1") if kind == KIND_CATEGORY else np.dtype("<f4")
    count = x * y * z * d
    if len(data) != off + count * dtype.itemsize:
        raise FormatError(f"{source}: payload size mismatch")
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=off)
    if kind == KIND_FEATURE:
        arr = flat.reshape(z, y, x, d).transpose(2, 1, 0, 3)
    else:
        arr = flat.reshape(z, y, x).transpose(2, 1, 0)
    return geometry, np.ascontiguousarray(arr), kind


def write_grid(path, grid: SemanticGrid) -> None:
    Path(path).write_bytes(encode_occg(grid.geometry, grid.categories, KIND_CATEGORY))


def read_grid(path, num_classes: int) -> SemanticGrid:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing grid file {path}")
    geometry, arr, kind = decode_occg(path.read_bytes(), str(path))
    if kind != KIND_CATEGORY:
        raise FormatError(f"{path}: expected a category grid, found payload kind {kind}")
    return SemanticGrid(geometry, arr, num_classes)


def write_field(path, geometry: GridGeometry, values: np.ndarray) -> None:
    """Density (X,Y,Z) or feature (X,Y,Z,D) arrays."""
    kind = KIND_DENSITY if np.ndim(values) == 3 else KIND_FEATURE
    Path(path).write_bytes(encode_occg(geometry, values, kind))


def read_field(path) -> tuple[GridGeometry, np.ndarray]:
    path = Path(path)
    geometry, arr, kind = decode_occg(path.read_bytes(), str(path))
    if kind == KIND_CATEGORY:
        raise FormatError(f"{path}: expected a float field, found a category grid")
    return geometry, arr


# -- label images ------------------------------------------------------------------

def encode_label(kind: str, image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    channels = 1 if arr.ndim == 2 else arr.shape[2]
    head = struct.pack("<4sHHII", LABEL_MAGIC[kind], LABEL_VERSION, channels, w, h)
    return head + arr.astype(LABEL_DTYPE[kind]).tobytes()


def decode_label(kind: str, data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 16 or data[:4] != LABEL_MAGIC[kind]:
        raise FormatError(f"{source}: bad magic bytes, expected {LABEL_MAGIC[kind]!r}")
    version, channels, w, h = struct.unpack_from("<HHII", data, 4)
    if version != LABEL_VERSION:
        raise VersionError(f"{source}: label version {version} unsupported (expected {LABEL_VERSION})")
    dtype = LABEL_DTYPE[kind]
    count = w * h * channels
    if len(data) != 16 + count * dtype.itemsize:
        raise FormatError(f"{source}: payload size mismatch")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=16)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return arr.reshape(shape).copy()


def write_label(path, kind: str, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_label(kind, image))


def read_label(path, kind: str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing label file {path}")
    return decode_label(kind, path.read_bytes(), str(path))
