"""
On-disk formats: FLT1 tensor files, binary PGM images and JSON helpers.

FLT1 layout: magic ``b"FLT1"``, u32 ndim, ndim x u32 dims, little-endian f32 payload.
"""

import json
import logging
import struct
from datetime import date, datetime
from pathlib import Path
from typing import Any, Union

import numpy as np

from errors import DatasetError, ShapeError

logger = logging.getLogger(__name__)

FLT_MAGIC = b"FLT1"
UNLABELED = 255

PathLike = Union[str, Path]


class NumpyJSONEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars/arrays, dates and enums"""

    def default(self, obj):
        if isinstance(obj, (datetime, date)):
            return obj.isoformat()
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, Path):
            return str(obj)
        elif hasattr(obj, "value") and hasattr(obj, "name"):
            return obj.value
        return super().default(obj)


def safe_json_dumps(data: Any, indent: int = 2) -> str:
    """Serialize data containing numpy and other non-JSON types"""
    return json.dumps(data, indent=indent, cls=NumpyJSONEncoder, sort_keys=True)


def write_json(path: PathLike, data: Any) -> None:
    Path(path).write_text(safe_json_dumps(data) + "\n", encoding="utf-8")


def read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DatasetError(f"Missing JSON file: {path}") from e


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    """Write ``array`` as an FLT1 file (values are stored as float32)"""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = FLT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def load_tensor(path: PathLike) -> np.ndarray:
    """Read an FLT1 file into a float32 array"""
    raw = Path(path).read_bytes()
    if raw[:4] != FLT_MAGIC:
        raise DatasetError(f"{path} is not an FLT1 tensor file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if offset + 4 * count != len(raw):
        raise ShapeError(f"{path}: payload holds {len(raw) - offset} bytes, header promises {4 * count}")
    return payload.reshape(dims).astype(np.float32)


def write_pgm(path: PathLike, image: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-D integer image as binary PGM (P5); 16-bit samples are big-endian"""
    if image.ndim != 2:
        raise ShapeError(f"PGM images must be 2-D, got shape {image.shape}")
    if maxval not in (255, 65535):
        raise ValueError(f"Unsupported PGM maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.clip(image, 0, maxval).astype(dtype)
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`"""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path} is not a binary PGM file")
    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos).reshape(height, width).copy()
