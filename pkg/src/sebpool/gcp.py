from __future__ import annotations

# Global covariance pooling: covariance -> eigendecomposition -> normalization, with the
# scaling eigen branch (SEB) on top: S = exp(-P), factor = ||Q S^T||_F, A = (factor + 1) Q.

from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Sequence
import json
import logging

import numpy as np

from . import utils
from .linalg import SymEig, as_mat, as_square, sym_eig_many
from .spectral import (
    SpectralFn, Sqrt, ExpInv, K_EPSILON,
    spectral_values, mat_fn_backward_stack, eig_backward_stack,
    parse_spectral_fn, spectral_fn_name, project_kept, top_k_mask,
)
from .exceptions import DimensionError, DomainError, NumericError, ValidationError

logger = logging.getLogger(__name__)

# Covariances are positive semi-definite; negative eigenvalues in
# (-NEGATIVE_CLAMP * lambda_max, 0) are round-off and become zero
NEGATIVE_CLAMP = 1e-10

_UPPER_SYMMETRY_TOLERANCE = 1e-8


class SubsetMode(Enum):
    # The top-k eigenvalues
    TOP = "top"
    # lambda_1 plus the last k eigenvalues
    FIRST_PLUS_SMALL = "first-plus-small"


@dataclass(frozen=True)
class GcpConfig:
    use_seb: bool = False
    normalization: SpectralFn = field(default_factory=Sqrt)
    # Number of eigenvalues kept before the normalization, None keeps all of them
    truncate_k: int | None = None
    subset_mode: SubsetMode = SubsetMode.TOP
    k_epsilon: float = K_EPSILON

    def __post_init__(self):
        if self.truncate_k is not None and self.truncate_k < 1:
            raise ValidationError(f"truncate_k must be at least 1, found {self.truncate_k}")
        if self.k_epsilon <= 0:
            raise ValidationError(f"k_epsilon must be positive, found {self.k_epsilon}")

    def keep_mask(self, d: int) -> np.ndarray:
        if self.truncate_k is None:
            return np.ones(d, dtype=bool)

        match self.subset_mode:
            case SubsetMode.TOP:
                return top_k_mask(d, self.truncate_k)
            case SubsetMode.FIRST_PLUS_SMALL:
                if not 1 <= self.truncate_k <= d:
                    raise ValidationError(f"k must be in [1, {d}], found {self.truncate_k}")
                mask = np.arange(d) >= d - self.truncate_k
                mask[0] = True
                return mask

    def to_json(self) -> str:
        data = asdict(self)
        data["normalization"] = spectral_fn_name(self.normalization)
        data["subset_mode"] = self.subset_mode.value
        return json.dumps(data)

    @classmethod
    def from_json(cls, data: str) -> GcpConfig:
        data = json.loads(data)
        return cls(
            use_seb=bool(data.get("use_seb", False)),
            normalization=parse_spectral_fn(data.get("normalization", "sqrt")),
            truncate_k=data.get("truncate_k"),
            subset_mode=SubsetMode(data.get("subset_mode", SubsetMode.TOP.value)),
            k_epsilon=float(data.get("k_epsilon", K_EPSILON)),
        )


@dataclass(frozen=True)
class GcpState:
    """Everything the backward pass needs from the forward pass"""

    x: np.ndarray
    p: np.ndarray
    eig: SymEig
    # Which eigenvalues reach the normalization
    kept: np.ndarray
    # The covariance entering the normalization (p itself when everything is kept)
    p_kept: np.ndarray
    q: np.ndarray
    s: np.ndarray | None
    factor: float | None
    a: np.ndarray
    cfg: GcpConfig


def centering_matrix(n: int) -> np.ndarray:
    """(1/N)(I - (1/N) 1 1^T)"""
    return (np.eye(n) - np.full((n, n), 1.0 / n)) / n


def covariance(x) -> np.ndarray:
    """P = X I_bar X^T, that is, the rows are centered and (1/N) X_c X_c^T is returned"""
    x = as_mat(x, "feature matrix")
    n = x.shape[1]
    if n < 2:
        raise ValidationError(f"The covariance needs at least 2 features, found {n}")

    xc = x - x.mean(axis=1, keepdims=True)
    return utils.sym(xc @ xc.T / n)


def covariance_backward(x, d_p) -> np.ndarray:
    """dl/dX = (G + G^T) X I_bar"""
    x = as_mat(x, "feature matrix")
    g = np.asarray(d_p, dtype=np.float64)
    d = x.shape[0]
    if g.shape != (d, d):
        raise DimensionError(f"Expected a {d}x{d} gradient, found {g.shape}")

    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    return (g + g.T) @ xc / n


def seb_factor(eig: SymEig, normalization: SpectralFn = Sqrt()) -> float:
    """||Q S^T||_F computed from the eigenvalues: sqrt(sum_i (f(lambda_i) e^{-lambda_i})^2),
    which is sqrt(sum_i lambda_i e^{-2 lambda_i}) for the square root"""

    if np.any(eig.lam < 0):
        idx = int(np.argmin(eig.lam))
        raise DomainError(f"Eigenvalue {idx} is negative ({eig.lam[idx]:.3e})")

    values = spectral_values(normalization, eig.lam) * np.exp(-eig.lam)
    return float(np.sqrt(np.sum(values ** 2)))


def seb_factor_backward(q, s, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ||Q S^T||_F w.r.t. Q and S: Q S^T S / factor and S Q^T Q / factor"""

    if factor == 0:
        raise NumericError("The SEB factor is zero, its gradient is not defined")

    q = as_square(q)
    s = as_square(s)
    if q.shape != s.shape:
        raise DimensionError(f"Q {q.shape} and S {s.shape} must have the same shape")

    return q @ s.T @ s / factor, s @ q.T @ q / factor


def _clamp_covariance(lam: np.ndarray) -> np.ndarray:
    """(batch, d) eigenvalues of covariances, with the round-off negatives set to zero"""
    lam_max = np.maximum(lam.max(axis=-1), 0.0)
    invalid = np.any(lam < -NEGATIVE_CLAMP * lam_max[:, None], axis=-1) | (
        (lam_max == 0.0) & np.any(lam < 0, axis=-1)
    )
    if np.any(invalid):
        i = int(np.argmax(invalid))
        idx = int(np.argmin(lam[i]))
        raise DomainError(
            f"The covariance has a negative eigenvalue ({lam[i, idx]:.3e} at {idx})"
        )
    if np.any(lam < 0):
        logger.debug("Clamping %d negative covariance eigenvalues", int((lam < 0).sum()))
        return np.maximum(lam, 0.0)
    return lam


def gcp_forward(x, cfg: GcpConfig = GcpConfig(), keep: np.ndarray | None = None) -> GcpState:
    """The GCP meta-layer for one feature matrix X (d x N). 'keep' overrides the
    eigenvalues kept by the configuration"""

    return gcp_forward_many([x], cfg, keep)[0]


def gcp_forward_many(
    xs: Sequence[np.ndarray],
    cfg: GcpConfig = GcpConfig(),
    keep: np.ndarray | None = None
) -> list[GcpState]:
    """One covariance per sample, all of them the same shape. The eigendecompositions
    are solved together and the normalization is applied to the whole stack"""

    xs = [as_mat(x, "feature matrix") for x in xs]
    if len(xs) == 0:
        return []
    if any(x.shape != xs[0].shape for x in xs):
        raise DimensionError("All the feature matrices must have the same shape")

    d, n = xs[0].shape
    if n < 2:
        raise ValidationError(f"The covariance needs at least 2 features, found {n}")

    x = np.stack(xs)
    xc = x - x.mean(axis=-1, keepdims=True)
    p = utils.sym(xc @ utils.transpose(xc) / n)
    eigs = sym_eig_many(p)

    u = np.stack([eig.u for eig in eigs])
    lam = _clamp_covariance(np.stack([eig.lam for eig in eigs]))

    kept = cfg.keep_mask(d) if keep is None else np.asarray(keep, dtype=bool)
    if kept.shape != (d,):
        raise DimensionError(f"The keep mask must have {d} entries, found {kept.shape}")

    lam_kept = np.where(kept, lam, 0.0)
    truncated = keep is not None or cfg.truncate_k is not None

    values = spectral_values(cfg.normalization, lam_kept)
    q = utils.compose(u, values)
    if cfg.use_seb:
        s = utils.compose(u, np.exp(-lam_kept))
        # ||Q S^T||_F from the eigenvalues, as in seb_factor
        factor = np.sqrt(np.sum((values * np.exp(-lam_kept)) ** 2, axis=-1))
        a = (factor + 1.0)[:, None, None] * q

    return [
        GcpState(
            x=xs[i],
            p=p[i],
            eig=SymEig(u=u[i], lam=lam[i]),
            kept=kept,
            p_kept=project_kept(SymEig(u=u[i], lam=lam[i]), kept) if truncated else p[i],
            q=q[i],
            s=s[i] if cfg.use_seb else None,
            factor=float(factor[i]) if cfg.use_seb else None,
            a=a[i] if cfg.use_seb else q[i],
            cfg=cfg,
        )
        for i in range(len(xs))
    ]


def gcp_backward(state: GcpState, d_a) -> np.ndarray:
    """dl/dX given dl/dA"""
    return gcp_backward_many([state], [d_a])[0]


def gcp_backward_many(states: Sequence[GcpState], d_as: Sequence[np.ndarray]) -> np.ndarray:
    """gcp_backward for states of the same shape and configuration, as a
    (batch, d, N) stack"""

    if len(states) != len(d_as):
        raise DimensionError(f"{len(states)} states but {len(d_as)} gradients")
    if len(states) == 0:
        raise ValidationError("There are no states to backpropagate through")

    cfg = states[0].cfg
    if any(state.cfg != cfg or state.x.shape != states[0].x.shape for state in states):
        raise ValidationError("The states must share their configuration and shape")

    g = [np.asarray(d_a, dtype=np.float64) for d_a in d_as]
    for state, grad in zip(states, g):
        if grad.shape != state.a.shape:
            raise DimensionError(f"Expected a {state.a.shape} gradient, found {grad.shape}")
    g = np.stack(g)

    u = np.stack([state.eig.u for state in states])
    lam = np.stack([state.eig.lam for state in states])
    kept = np.stack([state.kept for state in states])
    lam_kept = np.where(kept, lam, 0.0)

    if cfg.use_seb:
        # A = (F + 1) Q with F = ||Q S^T||_F, so
        #   dl = (F + 1) <G, dQ> + <G, Q> dF
        #   dF = <dF/dQ, dQ> + <dF/dS, dS>
        # and Q, S reach P through the square root and the exponential inverse branches.
        # F is not differentiable where it is zero (every kept eigenvalue is zero), A = Q there
        q = np.stack([state.q for state in states])
        s = np.stack([state.s for state in states])
        factor = np.array([state.factor for state in states])
        live = factor > 0
        safe = np.where(live, factor, 1.0)[:, None, None]

        d_factor = np.where(live, np.sum(g * q, axis=(-2, -1)), 0.0)[:, None, None]
        factor_q = q @ utils.transpose(s) @ s / safe
        factor_s = s @ utils.transpose(q) @ q / safe
        d_q = np.where(live, factor + 1.0, 1.0)[:, None, None] * g + d_factor * factor_q

        grad = (
            mat_fn_backward_stack(u, lam_kept, cfg.normalization, d_q, active=kept)
            + mat_fn_backward_stack(u, lam_kept, ExpInv(), d_factor * factor_s, active=kept)
        )
    else:
        grad = mat_fn_backward_stack(u, lam_kept, cfg.normalization, g, active=kept)

    d_p = eig_backward_stack(u, lam, grad, cfg.k_epsilon)

    x = np.stack([state.x for state in states])
    xc = x - x.mean(axis=-1, keepdims=True)
    return (d_p + utils.transpose(d_p)) @ xc / x.shape[-1]


def upper_tri_vec(a) -> np.ndarray:
    """Row-major upper triangle (diagonal included), raw entries"""
    a = as_square(a)
    if np.linalg.norm(a - a.T) > _UPPER_SYMMETRY_TOLERANCE * max(np.linalg.norm(a), 1.0):
        raise ValidationError("Only the upper triangle of a symmetric matrix can be vectorized")
    return a[np.triu_indices(a.shape[0])]


def _size_from_length(n: int) -> int:
    d = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if d * (d + 1) // 2 != n:
        raise DimensionError(f"{n} is not the length of an upper triangle")
    return d


def upper_tri_unvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    d = _size_from_length(v.shape[0])
    a = np.zeros((d, d))
    rows, cols = np.triu_indices(d)
    a[rows, cols] = v
    a[cols, rows] = v
    return a


def upper_tri_vec_backward(g, d: int) -> np.ndarray:
    """The upper triangle gets the gradient, the strict lower triangle is never read"""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (d * (d + 1) // 2,):
        raise DimensionError(f"Expected {d * (d + 1) // 2} entries, found {g.shape}")
    out = np.zeros((d, d))
    out[np.triu_indices(d)] = g
    return out
