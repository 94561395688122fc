from __future__ import annotations

import numpy as np


def transpose(a: np.ndarray) -> np.ndarray:
    """Transposes the last two axes, so it works for a single matrix and for a stack"""
    return np.swapaxes(a, -1, -2)


def sym(a: np.ndarray) -> np.ndarray:
    # (a + a^T)_ij and (a + a^T)_ji are the same sum, so the result is exactly symmetric
    return 0.5 * (a + transpose(a))


def compose(u: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Returns U diag(values) U^T"""
    return sym((u * values[..., None, :]) @ transpose(u))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error, measured against the larger of the two operands"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def min_max_normalize(values: np.ndarray) -> np.ndarray:
    """Maps the values linearly onto [0, 1]. A constant input maps to zeros"""
    low, high = float(values.min()), float(values.max())
    if high == low:
        return np.zeros_like(values, dtype=np.float64)
    return (values - low) / (high - low)
