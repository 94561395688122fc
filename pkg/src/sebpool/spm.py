from __future__ import annotations

# SPM1 matrix files: the magic bytes "SPM1", rows and cols as little-endian u32 and
# then rows * cols little-endian float64 values in row-major order.

from pathlib import Path
import logging

import numpy as np

from .exceptions import ValidationError, DimensionError

logger = logging.getLogger(__name__)

MAGIC = b"SPM1"
_HEADER_DTYPE = np.dtype("<u4")
_VALUE_DTYPE = np.dtype("<f8")
_HEADER_SIZE = len(MAGIC) + 2 * _HEADER_DTYPE.itemsize


def encode(mat: np.ndarray) -> bytes:
    """Vectors are stored as a single row"""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise DimensionError(f"Only matrices and vectors can be encoded, found {mat.ndim} dimensions")

    header = np.array(mat.shape, dtype=_HEADER_DTYPE).tobytes()
    return MAGIC + header + np.ascontiguousarray(mat, dtype=_VALUE_DTYPE).tobytes()


def decode(data: bytes) -> np.ndarray:
    if len(data) < _HEADER_SIZE or data[:len(MAGIC)] != MAGIC:
        raise ValidationError("Not an SPM1 file: missing magic bytes")

    rows, cols = np.frombuffer(data, dtype=_HEADER_DTYPE, count=2, offset=len(MAGIC))
    expected = int(rows) * int(cols) * _VALUE_DTYPE.itemsize
    payload = data[_HEADER_SIZE:]
    if len(payload) != expected:
        raise ValidationError(
            f"SPM1 payload of {len(payload)} bytes does not match a {rows}x{cols} matrix"
        )

    values = np.frombuffer(payload, dtype=_VALUE_DTYPE)
    return values.reshape(int(rows), int(cols)).astype(np.float64)


def save(path: str | Path, mat: np.ndarray):
    Path(path).write_bytes(encode(mat))
    logger.info("Saved %s matrix to %s", np.shape(mat), path)


def load(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes())
