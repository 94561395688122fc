from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from . import utils
from .linalg import SymEig, as_square
from .exceptions import DimensionError, DomainError, NumericError, ValidationError

logger = logging.getLogger(__name__)

# Eigenvalues below this make the matrix logarithm fail instead of being clamped,
# the log is only used for the Log-Euclidean distance and clamping would change it
LOG_FLOOR = 1e-12

# Negative eigenvalues in (-ROOT_CLAMP * lambda_max, 0) are taken as zero by the roots
ROOT_CLAMP = 1e-10

K_EPSILON = 1e-12


@dataclass(frozen=True)
class Sqrt:
    pass


@dataclass(frozen=True)
class PRoot:
    p: int

    def __post_init__(self):
        if not isinstance(self.p, (int, np.integer)) or self.p < 2:
            raise ValidationError(f"The root order must be an integer >= 2, found {self.p}")


@dataclass(frozen=True)
class Log:
    pass


@dataclass(frozen=True)
class ExpInv:
    pass


SpectralFn = Sqrt | PRoot | Log | ExpInv


def parse_spectral_fn(name: str) -> SpectralFn:
    """Accepts 'sqrt', 'log', 'exp_inv' and 'proot:<p>'"""
    match name.strip().lower().split(":"):
        case ["sqrt"]:
            return Sqrt()
        case ["log"]:
            return Log()
        case ["exp_inv"]:
            return ExpInv()
        case ["proot", p] if p.isdigit():
            return PRoot(int(p))
        case _:
            raise ValidationError(f"'{name}' is not a valid spectral function")


def spectral_fn_name(fn: SpectralFn) -> str:
    match fn:
        case Sqrt():
            return "sqrt"
        case PRoot(p):
            return f"proot:{p}"
        case Log():
            return "log"
        case ExpInv():
            return "exp_inv"


@dataclass(frozen=True)
class EigGrad:
    # dl/dU
    d_u: np.ndarray
    # dl/dLambda, only its diagonal
    d_lambda: np.ndarray

    def __add__(self, other: EigGrad) -> EigGrad:
        return EigGrad(self.d_u + other.d_u, self.d_lambda + other.d_lambda)


@dataclass(frozen=True)
class KMatrix:
    # K_ij = 1 / (lambda_i - lambda_j), zero diagonal
    k: np.ndarray
    epsilon: float


def _clamp_roots(lam: np.ndarray) -> np.ndarray:
    lam_max = max(float(lam.max()), 0.0)
    negative = lam < 0
    if np.any(lam < -ROOT_CLAMP * lam_max) or (lam_max == 0.0 and np.any(negative)):
        idx = int(np.argmin(lam))
        raise DomainError(
            f"Eigenvalue {idx} is negative ({lam[idx]:.3e}), the matrix root is not defined"
        )
    return np.where(negative, 0.0, lam)


def _check_log(lam: np.ndarray):
    below = np.flatnonzero(lam < LOG_FLOOR)
    if below.size > 0:
        idx = int(below[0])
        raise DomainError(
            f"Eigenvalue {idx} ({lam[idx]:.3e}) is below the logarithm floor {LOG_FLOOR}"
        )


def spectral_values(fn: SpectralFn, lam: np.ndarray) -> np.ndarray:
    """f applied elementwise to the eigenvalues"""
    lam = np.asarray(lam, dtype=np.float64)
    match fn:
        case Sqrt():
            return np.sqrt(_clamp_roots(lam))
        case PRoot(p):
            return _clamp_roots(lam) ** (1.0 / p)
        case Log():
            _check_log(lam)
            return np.log(lam)
        case ExpInv():
            return np.exp(-lam)
        case invalid:
            raise ValidationError(f"{invalid!r} is not a spectral function")


def spectral_derivative(fn: SpectralFn, lam: np.ndarray) -> np.ndarray:
    """f' applied elementwise. The roots are not differentiable at zero; a zero
    eigenvalue is considered inactive there and gets a zero derivative"""
    lam = np.asarray(lam, dtype=np.float64)
    match fn:
        case Sqrt():
            lam = _clamp_roots(lam)
            safe = np.where(lam > 0, lam, 1.0)
            return np.where(lam > 0, 0.5 / np.sqrt(safe), 0.0)
        case PRoot(p):
            lam = _clamp_roots(lam)
            safe = np.where(lam > 0, lam, 1.0)
            return np.where(lam > 0, safe ** (1.0 / p - 1.0) / p, 0.0)
        case Log():
            _check_log(lam)
            return 1.0 / lam
        case ExpInv():
            return -np.exp(-lam)
        case invalid:
            raise ValidationError(f"{invalid!r} is not a spectral function")


def mat_fn(eig: SymEig, fn: SpectralFn) -> np.ndarray:
    """U f(Lambda) U^T"""
    return utils.compose(eig.u, spectral_values(fn, eig.lam))


def mat_fn_backward(
    eig: SymEig,
    fn: SpectralFn,
    d_out: np.ndarray,
    active: np.ndarray | None = None
) -> EigGrad:
    """Gradients w.r.t. U and Lambda of l(U f(Lambda) U^T), given G = dl/d(output).

    Differentiating Y = U F U^T gives dl = <(G + G^T) U F, dU> + <U^T G U, dF>, so
        dl/dU      = (G + G^T) U diag(f(lambda))
        dl/dLambda = f'(lambda) * diag(U^T G U)
    For f = exp(-x) this is exactly the rule of the exponential inverse: the U term
    carries e^{-lambda} without a sign and the Lambda term carries -e^{-lambda}.

    Eigenvalues outside 'active' are treated as constants of the forward pass.
    """

    g = np.asarray(d_out, dtype=np.float64)
    if g.shape != (eig.d, eig.d):
        raise DimensionError(f"Expected a {eig.d}x{eig.d} gradient, found {g.shape}")

    return mat_fn_backward_stack(eig.u, eig.lam, fn, g, active)


def mat_fn_backward_stack(
    u: np.ndarray,
    lam: np.ndarray,
    fn: SpectralFn,
    d_out: np.ndarray,
    active: np.ndarray | None = None
) -> EigGrad:
    """mat_fn_backward for a (batch, d, d) stack of eigenvectors, (batch, d) eigenvalues
    and (batch, d, d) gradients. The fields of the result are stacks too"""

    values = spectral_values(fn, lam)
    derivative = spectral_derivative(fn, lam)
    if active is not None:
        derivative = np.where(active, derivative, 0.0)

    d_u = ((d_out + utils.transpose(d_out)) @ u) * values[..., None, :]
    d_lambda = derivative * np.einsum("...ki,...kl,...li->...i", u, d_out, u)
    return EigGrad(d_u=d_u, d_lambda=d_lambda)


def k_matrix(lam: np.ndarray, epsilon: float = K_EPSILON) -> KMatrix:
    """K_ij = 1 / (lambda_i - lambda_j) with |lambda_i - lambda_j| clamped below at
    'epsilon'. Exactly equal eigenvalues get +epsilon above the diagonal and -epsilon
    below so K stays antisymmetric. A (batch, d) stack of spectra gives a stack of K"""

    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, found {epsilon}")

    lam = np.asarray(lam, dtype=np.float64)
    diff = lam[..., :, None] - lam[..., None, :]
    d = lam.shape[-1]
    upper = np.triu(np.ones((d, d), dtype=bool), k=1)
    sign = np.where(diff > 0, 1.0, np.where(diff < 0, -1.0, np.where(upper, 1.0, -1.0)))
    k = 1.0 / (sign * np.maximum(np.abs(diff), epsilon))
    return KMatrix(k=np.where(np.eye(d, dtype=bool), 0.0, k), epsilon=epsilon)


def eig_backward(eig: SymEig, grad: EigGrad, epsilon: float = K_EPSILON) -> np.ndarray:
    """dl/dP from the gradients w.r.t. the eigenvectors and eigenvalues of P.

    First-order perturbation gives U^T dU = K^T o (U^T dP U), that is, the entry (i, j)
    is divided by lambda_j - lambda_i. Hence
        dl/dP = sym(U (K^T o (U^T dl/dU) + diag(dl/dLambda)) U^T)
    The K^T placement is the one the finite-difference checks agree with.
    """

    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, found {epsilon}")

    if grad.d_u.shape != eig.u.shape or grad.d_lambda.shape != eig.lam.shape:
        raise DimensionError("The gradient does not match the eigendecomposition")

    return eig_backward_stack(eig.u, eig.lam, grad, epsilon)


def eig_backward_stack(u: np.ndarray, lam: np.ndarray, grad: EigGrad, epsilon: float = K_EPSILON) -> np.ndarray:
    """eig_backward for (batch, d, d) eigenvectors and (batch, d) eigenvalues"""

    k = k_matrix(lam, epsilon).k
    d_lambda = grad.d_lambda[..., None, :] * np.eye(lam.shape[-1])
    inner = utils.transpose(k) * (utils.transpose(u) @ grad.d_u) + d_lambda
    return utils.sym(u @ inner @ utils.transpose(u))


def newton_schulz_sqrt(p, iters: int) -> np.ndarray:
    """Approximate square root by the coupled Newton-Schulz iteration. P is divided by
    its trace first so the iteration converges, and the result is multiplied back by
    sqrt(tr(P)). Forward only"""

    p = as_square(p)
    if iters < 1:
        raise ValidationError(f"At least one iteration is needed, found {iters}")

    if not np.any(p):
        return np.zeros_like(p)

    trace = float(np.trace(p))
    if trace <= 0:
        raise NumericError(f"Newton-Schulz needs a positive trace, found {trace:.3e}")

    eye = np.eye(p.shape[0])
    y = p / trace
    z = eye
    for _ in range(iters):
        t = 0.5 * (3.0 * eye - z @ y)
        y, z = y @ t, t @ z

    return np.sqrt(trace) * y


def top_k_mask(d: int, k: int) -> np.ndarray:
    if not 1 <= k <= d:
        raise ValidationError(f"k must be in [1, {d}], found {k}")
    return np.arange(d) < k


def project_kept(eig: SymEig, kept: np.ndarray) -> np.ndarray:
    """U Lambda_kept U^T where the eigenvalues outside 'kept' are zeroed"""
    return utils.compose(eig.u, np.where(kept, eig.lam, 0.0))


def truncate_eig(eig: SymEig, k: int) -> np.ndarray:
    """Best rank-k approximation: only the top-k eigenvalues are kept"""
    return project_kept(eig, top_k_mask(eig.d, k))
