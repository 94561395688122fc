from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence
import csv
import logging

import numpy as np
from PIL import Image

from . import spm, utils
from .exceptions import DimensionError, ValidationError

logger = logging.getLogger(__name__)


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Linear min-max normalization onto [0, 255]"""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError("Only finite maps can be exported as images")
    return np.rint(utils.min_max_normalize(values) * 255.0).astype(np.uint8)


def save_pgm(path: str | Path, values: np.ndarray):
    values = np.asarray(values)
    if values.ndim != 2:
        raise DimensionError(f"A PGM image must be 2-D, found {values.ndim} dimensions")

    # A 2-D uint8 array becomes an "L" image, which Pillow writes as binary PGM (P5)
    Image.fromarray(to_gray8(values)).save(path, format="PPM")
    logger.info("Saved a %dx%d map to %s", *values.shape, path)


def save_matrix(path: str | Path, values: np.ndarray):
    spm.save(path, values)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]):
    """Floats are written with repr so the files are exact and reproducible"""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    logger.info("Saved %s", path)
