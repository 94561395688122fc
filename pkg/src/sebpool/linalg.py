from __future__ import annotations

# Dense real linear algebra for the rest of the package. Matrices are plain float64
# numpy arrays; the only thing implemented here that numpy would otherwise give us
# is the symmetric eigensolver, because its ordering, sign convention and
# convergence criterion have to be fixed for the gradient oracles downstream.

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Iterable
import logging

import numpy as np

from . import utils
from .exceptions import DimensionError, ValidationError, NumericError

logger = logging.getLogger(__name__)

# Mat: a finite 2-D float64 array, row-major
Mat = np.ndarray

ASYMMETRY_TOLERANCE = 1e-8
CONVERGENCE_THRESHOLD = 1e-14
MAX_SWEEPS = 100
CLAMP_TOLERANCE = 1e-12

# Components whose magnitudes differ by less than this (relative) count as a tie
# when fixing the sign of an eigenvector
_SIGN_TIE = 1e-12


@dataclass(frozen=True)
class SymEig:
    # Columns are the eigenvectors
    u: np.ndarray
    # Sorted in a non-increasing order
    lam: np.ndarray

    @property
    def d(self) -> int:
        return self.lam.shape[0]

    def reconstruct(self) -> np.ndarray:
        return utils.compose(self.u, self.lam)

    def with_values(self, lam: np.ndarray) -> SymEig:
        """Same eigenvectors, different eigenvalues. The order of 'lam' is not checked,
        so the result may not respect the non-increasing invariant"""
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != self.lam.shape:
            raise DimensionError(
                f"Expected {self.lam.shape[0]} eigenvalues but found {lam.shape}"
            )
        return replace(self, lam=lam)


def as_mat(a, name: str = "matrix") -> np.ndarray:
    """Copies 'a' into a 2-D float64 array and checks that every entry is finite"""
    mat = np.array(a, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionError(f"The {name} must be 2-D but it has {mat.ndim} dimensions")
    if not np.all(np.isfinite(mat)):
        raise ValidationError(f"The {name} contains NaN or infinite entries")
    return mat


def as_square(a, name: str = "matrix") -> np.ndarray:
    mat = as_mat(a, name)
    if mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"The {name} must be square but its shape is {mat.shape}")
    return mat


def fro_inner(a, b) -> float:
    a = as_mat(a)
    b = as_mat(b)
    if a.shape != b.shape:
        raise DimensionError(f"Cannot take the inner product of {a.shape} and {b.shape}")
    return float(np.sum(a * b))


def fro_norm(a) -> float:
    return float(np.sqrt(fro_inner(a, a)))


def sym_eig(p, max_sweeps: int = MAX_SWEEPS) -> SymEig:
    """Eigendecomposition of a symmetric matrix with cyclic Jacobi rotations.

    The input is symmetrized before solving, so an asymmetry of up to 1e-8 relative
    is tolerated. The eigenvalues come sorted in a non-increasing order and the
    largest-magnitude component of every eigenvector is positive."""

    return sym_eig_many([p], max_sweeps)[0]


def sym_eig_many(ps: Iterable, max_sweeps: int = MAX_SWEEPS) -> list[SymEig]:
    """Same as sym_eig but for several matrices of the same size at once. The rotations
    of a round are applied to all of them together, which is much faster than calling
    sym_eig in a loop"""

    mats = [_check_symmetric(p) for p in ps]
    if len(mats) == 0:
        return []

    d = mats[0].shape[0]
    if any(mat.shape[0] != d for mat in mats):
        raise DimensionError("All the matrices must have the same size")

    lam, v = _jacobi(np.stack(mats), max_sweeps)
    return _finalize(lam, v)


def _check_symmetric(p) -> np.ndarray:
    p = as_square(p)
    asymmetry = np.linalg.norm(p - p.T)
    if asymmetry > ASYMMETRY_TOLERANCE * np.linalg.norm(p):
        raise ValidationError(
            f"The matrix is not symmetric (||P - P^T||_F = {asymmetry:.3e})"
        )
    return utils.sym(p)


@lru_cache(maxsize=None)
def _round_robin_pairs(d: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Splits the d(d-1)/2 index pairs into d-1 (d even) or d (d odd) rounds of
    disjoint pairs, so the rotations of a round commute and can be applied at once.
    This is the usual tournament schedule: the first player is fixed and the rest rotate"""

    n = d if d % 2 == 0 else d + 1
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        pairs = [
            (min(players[i], players[n - 1 - i]), max(players[i], players[n - 1 - i]))
            for i in range(n // 2)
        ]
        # With an odd size, whoever plays against the dummy player rests this round
        pairs = [pair for pair in pairs if pair[1] < d]
        rounds.append((
            np.array([p for p, _ in pairs], dtype=np.intp),
            np.array([q for _, q in pairs], dtype=np.intp),
        ))
        players = [players[0], players[-1]] + players[1:-1]

    return tuple(rounds)


def _off_norm(a: np.ndarray) -> np.ndarray:
    # Taken from the off-diagonal entries themselves: ||A||^2 - ||diag||^2 cancels
    # catastrophically and never gets below sqrt(eps) ||A||
    off = a * (1.0 - np.eye(a.shape[-1]))
    return np.sqrt(np.sum(off ** 2, axis=(-2, -1)))


def _jacobi(a: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """a: (batch, d, d) stack of symmetric matrices. Returns the unsorted
    eigenvalues (batch, d) and eigenvectors (batch, d, d)"""

    a = a.copy()
    batch, d, _ = a.shape
    eye = np.eye(d)
    v = np.broadcast_to(eye, a.shape).copy()

    threshold = CONVERGENCE_THRESHOLD * np.linalg.norm(a, axis=(-2, -1))
    rounds = _round_robin_pairs(d)
    rows = np.arange(batch)[:, None]

    for sweep in range(max_sweeps + 1):
        off = _off_norm(a)
        if np.all(off <= threshold):
            logger.debug("Jacobi converged after %d sweeps (batch of %d)", sweep, batch)
            return np.diagonal(a, axis1=-2, axis2=-1).copy(), v

        if sweep == max_sweeps:
            break

        for p, q in rounds:
            app = a[:, p, p]
            aqq = a[:, q, q]
            apq = a[:, p, q]

            rotate = apq != 0.0
            # A subnormal apq overflows tau; t then rounds to zero, which is the right rotation
            with np.errstate(over="ignore"):
                tau = np.divide(aqq - app, 2.0 * apq, out=np.zeros_like(apq), where=rotate)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(rotate, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            j = np.broadcast_to(eye, a.shape).copy()
            j[rows, p, p] = c
            j[rows, q, q] = c
            j[rows, p, q] = s
            j[rows, q, p] = -s

            a = utils.transpose(j) @ a @ j
            a[rows, p, q] = 0.0
            a[rows, q, p] = 0.0
            v = v @ j

        a = utils.sym(a)

    raise NumericError(
        f"The Jacobi eigensolver did not converge after {max_sweeps} sweeps "
        f"(off-diagonal norm {float(np.max(off)):.3e})",
        sweeps=max_sweeps,
    )


def _finalize(lam: np.ndarray, u: np.ndarray) -> list[SymEig]:
    """(batch, d) eigenvalues and (batch, d, d) eigenvectors as they leave the solver"""
    lam = lam.copy()
    u = u.copy()
    batch, d = lam.shape

    # Tiny negative eigenvalues of a positive semi-definite input are round-off
    lam_max = lam.max(axis=-1, keepdims=True)
    clamp = (lam_max > 0) & (lam < 0) & (lam > -CLAMP_TOLERANCE * lam_max)
    if np.any(clamp):
        logger.debug("Clamping %d eigenvalues to zero", int(clamp.sum()))
        lam[clamp] = 0.0

    # The largest-magnitude component of each eigenvector must be positive. Ties are
    # broken by the lowest index
    mags = np.abs(u)
    leading = np.argmax(mags >= mags.max(axis=-2, keepdims=True) * (1 - _SIGN_TIE), axis=-2)
    signs = np.take_along_axis(u, leading[:, None, :], axis=-2)
    u *= np.where(signs < 0, -1.0, 1.0)

    # Non-increasing eigenvalues; equal eigenvalues are ordered by their eigenvectors,
    # compared lexicographically in decreasing order. np.lexsort uses the last key first
    order = np.argsort(-lam, axis=-1, kind="stable")
    ties = np.any(np.diff(np.take_along_axis(lam, order, axis=-1), axis=-1) == 0, axis=-1)
    for i in np.flatnonzero(ties):
        keys = [-u[i, row] for row in reversed(range(d))] + [-lam[i]]
        order[i] = np.lexsort(keys)

    lam = np.take_along_axis(lam, order, axis=-1)
    u = np.take_along_axis(u, order[:, None, :], axis=-1)
    return [SymEig(u=u[i], lam=lam[i]) for i in range(batch)]
