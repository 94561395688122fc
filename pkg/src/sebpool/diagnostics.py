from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
import logging

import numpy as np

from . import export
from .linalg import SymEig, sym_eig
from .spectral import Log, mat_fn
from .exceptions import DomainError, UndefinedFractionError, ValidationError

logger = logging.getLogger(__name__)


# Eigenvalues at or below RANK_RTOL * lambda_max are numerically zero
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class Conditioning:
    # lambda_max / lambda_min, +inf when the matrix is singular
    kappa: float
    rank_deficient: bool
    # Number of eigenvalues above RANK_RTOL * lambda_max
    rank: int
    # lambda_max over the smallest of those. Finite for any nonzero spectrum, so it can
    # still be compared when the covariances are singular
    kappa_on_range: float


def condition_number(eig: SymEig) -> Conditioning:
    """Rank-deficient spectra are flagged instead of raising, GCP covariances are
    singular whenever there are fewer features than channels"""
    return spectrum_conditioning(eig.lam)


def spectrum_conditioning(lam) -> Conditioning:
    lam = np.asarray(lam, dtype=np.float64)
    lam_max, lam_min = float(lam.max()), float(lam.min())
    if lam_max <= 0:
        return Conditioning(kappa=float("inf"), rank_deficient=True, rank=0, kappa_on_range=float("inf"))

    on_range = lam[lam > RANK_RTOL * lam_max]
    rank, kappa_on_range = int(on_range.size), lam_max / float(on_range.min())
    if lam_min <= 0:
        logger.debug("Rank-deficient spectrum (lambda_min = %.3e)", lam_min)
        return Conditioning(kappa=float("inf"), rank_deficient=True, rank=rank, kappa_on_range=kappa_on_range)

    return Conditioning(kappa=lam_max / lam_min, rank_deficient=False, rank=rank, kappa_on_range=kappa_on_range)


def log_euclidean_dist(p1, p2) -> float:
    """||log(P1) - log(P2)||_F for positive definite matrices"""
    diff = mat_fn(sym_eig(p1), Log()) - mat_fn(sym_eig(p2), Log())
    return float(np.linalg.norm(diff))


def energy_fraction(lam, t: int) -> float:
    """Share of the energy carried by the eigenvalues after the first t"""
    lam = np.asarray(lam, dtype=np.float64)
    d = lam.shape[0]
    if not 0 <= t <= d:
        raise ValidationError(f"The split must be in [0, {d}], found {t}")
    if np.any(lam < 0):
        raise DomainError("The energy of a spectrum with negative eigenvalues is not defined")

    total = lam.sum()
    if total == 0:
        raise UndefinedFractionError("The spectrum is zero, its energy cannot be split")

    return float(lam[t:].sum() / total)


@dataclass(frozen=True)
class SpectrumHistogram:
    # log2-spaced, bins + 1 of them
    bin_edges: np.ndarray
    counts: np.ndarray
    # Eigenvalues <= 0, which have no place in a logarithmic axis
    underflow: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow

    def to_csv(self, path: str | Path):
        rows = [("underflow", 0.0, float(self.bin_edges[0]), self.underflow)]
        rows += [
            (i, float(self.bin_edges[i]), float(self.bin_edges[i + 1]), int(count))
            for i, count in enumerate(self.counts)
        ]
        export.write_csv(path, ["bin", "low", "high", "count"], rows)


def spectrum_histogram(spectra: Sequence[np.ndarray], bins: int = 20) -> SpectrumHistogram:
    if bins < 1:
        raise ValidationError(f"At least one bin is needed, found {bins}")

    arrays = [np.asarray(s, dtype=np.float64).ravel() for s in spectra]
    values = np.concatenate(arrays) if arrays else np.empty(0)
    if values.size == 0:
        raise ValidationError("There are no eigenvalues to bin")

    positive = values[values > 0]
    underflow = int(values.size - positive.size)
    if positive.size == 0:
        raise ValidationError("None of the eigenvalues is positive")

    low, high = float(positive.min()), float(positive.max())
    if low == high:
        # A single distinct value gets one octave on each side
        low, high = low / 2.0, high * 2.0

    edges = np.exp2(np.linspace(np.log2(low), np.log2(high), bins + 1))
    # exp2(log2(x)) is not always x, the outermost edges must include the extremes
    edges[0], edges[-1] = low, high

    counts, _ = np.histogram(positive, bins=edges)
    return SpectrumHistogram(bin_edges=edges, counts=counts, underflow=underflow)


def spectrum_spread(spectra: Sequence[np.ndarray]) -> float:
    """Octaves between the smallest and the largest positive eigenvalue of all the
    spectra, the width of the axis spectrum_histogram bins on"""
    arrays = [np.asarray(s, dtype=np.float64).ravel() for s in spectra]
    values = np.concatenate(arrays) if arrays else np.empty(0)
    positive = values[values > 0]
    if positive.size == 0:
        raise ValidationError("None of the eigenvalues is positive")
    return float(np.log2(positive.max() / positive.min()))


def write_kappa_csv(
    path: str | Path,
    series: Sequence[tuple[int, float]],
    rank_deficient: Sequence[tuple[int, float]] | None = None
):
    """One row per epoch. 'rank_deficient' adds the share of rank-deficient samples"""
    if rank_deficient is None:
        export.write_csv(path, ["epoch", "kappa"], ((epoch, float(kappa)) for epoch, kappa in series))
        return

    fractions = dict(rank_deficient)
    export.write_csv(
        path, ["epoch", "kappa", "rank_deficient"],
        ((epoch, float(kappa), float(fractions[epoch])) for epoch, kappa in series)
    )
