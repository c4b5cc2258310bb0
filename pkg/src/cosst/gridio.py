"""GRIDv1 raster files: one text header line followed by little-endian values.

Header: ``GRIDv1 <channels> <height> <width> <f32|i32>``. Values are row-major
and channel-major, i.e. the bytes of a C-ordered (channels, height, width) array.
"""
import logging
from pathlib import Path
from typing import Union

import numpy as np

from .core import GridImage, LabelMap
from .exceptions import RasterFormatError

logger = logging.getLogger(__name__)

MAGIC = "GRIDv1"
DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}

PathLike = Union[str, Path]


def write_raster(path: PathLike, array: np.ndarray, dtype: str) -> Path:
    """Write an array as a .npy raster, creating parent directories."""
    if dtype not in DTYPES:
        raise RasterFormatError(f"Unsupported raster dtype: {dtype}")
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise RasterFormatError(f"Raster must be 2D or 3D, got shape {array.shape}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    channels, height, width = array.shape
    header = f"{MAGIC} {channels} {height} {width} {dtype}\n".encode("ascii")
    payload = np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes()
    path.write_bytes(header + payload)
    return path


def read_raster(path: PathLike) -> np.ndarray:
    """Read a raster as a (channels, height, width) array in its stored dtype."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Raster not found: {path}")

    data = path.read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise RasterFormatError(f"{path}: missing header line")

    try:
        magic, channels, height, width, dtype = data[:newline].decode("ascii").split()
        shape = (int(channels), int(height), int(width))
    except (UnicodeDecodeError, ValueError) as e:
        raise RasterFormatError(f"{path}: malformed header") from e

    if magic != MAGIC:
        raise RasterFormatError(f"{path}: expected {MAGIC} header, got {magic}")
    if dtype not in DTYPES:
        raise RasterFormatError(f"{path}: unsupported dtype {dtype}")
    if min(shape) < 1:
        raise RasterFormatError(f"{path}: invalid shape {shape}")

    payload = data[newline + 1:]
    expected = int(np.prod(shape)) * DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise RasterFormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=DTYPES[dtype]).reshape(shape)


def write_image(path: PathLike, image: GridImage) -> Path:
    return write_raster(path, image.values, "f32")


def read_image(path: PathLike) -> GridImage:
    """Read a (C, H, W) float image raster."""
    array = read_raster(path)
    if array.dtype != DTYPES["f32"]:
        raise RasterFormatError(f"{path}: images must be stored as f32")
    return GridImage(array.astype(np.float64))


def write_label(path: PathLike, label: LabelMap) -> Path:
    return write_raster(path, label.labels, "i32")


def read_label(path: PathLike) -> LabelMap:
    """Read a (H, W) integer label raster."""
    array = read_raster(path)
    if array.dtype != DTYPES["i32"] or array.shape[0] != 1:
        raise RasterFormatError(f"{path}: label maps must be single-channel i32")
    return LabelMap(array[0].astype(np.int64))
