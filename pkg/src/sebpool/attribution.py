from __future__ import annotations

# Explaining a GCP head: which eigenvalues the decision depends on. Two procedures,
# eigen-selective backpropagation down to the input and perturbation of the input so
# that its covariance moves towards (or away from) a spectral subspace.

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING
import logging
import math

import numpy as np

from . import export
from .linalg import SymEig, as_mat, as_square, fro_inner, fro_norm, sym_eig
from .gcp import GcpConfig, covariance, covariance_backward, gcp_forward, gcp_backward
from .exceptions import (
    DimensionError, DivergenceError, DomainError, UndefinedCorrelationError, ValidationError
)

if TYPE_CHECKING:
    from .model import ToyModel

logger = logging.getLogger(__name__)

# Spectra whose smallest eigenvalue is below -SPSD_TOLERANCE * lambda_max are not SPSD
SPSD_TOLERANCE = 1e-10

# Share of the eigenvalue energy below which a suffix counts as "small"
ENERGY_THRESHOLD = 1e-3

DEFAULT_PERTURB_STEPS = 1000
DEFAULT_PERTURB_LR = 0.1


class EigMode(Enum):
    ALL = "all"
    LARGE = "large"
    SMALL = "small"


class ReluRule(Enum):
    VANILLA = "vanilla"
    DECONV = "deconv"


class PerturbMode(Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class EigSelection:
    mode: EigMode
    # Number of large eigenvalues; ignored for EigMode.ALL
    t: int = 0

    def validate(self, d: int):
        if self.mode is not EigMode.ALL and not 0 < self.t < d:
            raise ValidationError(f"The split must be in (0, {d}), found {self.t}")

    def mask(self, d: int) -> np.ndarray:
        self.validate(d)
        large = np.arange(d) < self.t
        match self.mode:
            case EigMode.ALL:
                return np.ones(d, dtype=bool)
            case EigMode.LARGE:
                return large
            case EigMode.SMALL:
                return ~large


def default_split(d: int) -> int:
    """About 80% of the eigenvalues are considered large"""
    return math.ceil(0.8 * d)


def energy_split(lam, threshold: float = ENERGY_THRESHOLD) -> int:
    """The smallest t whose suffix lambda_{t+1..d} carries less than 'threshold' of the
    total energy. Falls back to d - 1 so that the small set is never empty"""

    lam = np.asarray(lam, dtype=np.float64)
    d = lam.shape[0]
    if d < 2:
        raise ValidationError("At least two eigenvalues are needed to split a spectrum")

    total = lam.sum()
    if total <= 0:
        raise DomainError("The spectrum has no energy")

    # suffix[t] = sum of lam[t:]
    suffix = np.cumsum(lam[::-1])[::-1]
    for t in range(1, d):
        if suffix[t] / total < threshold:
            return t
    return d - 1


def select_eigs(lam, sel: EigSelection) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    return np.where(sel.mask(lam.shape[0]), lam, 0.0)


def project_subspace(eig: SymEig, sel: EigSelection) -> np.ndarray:
    """P_L = U Lambda_L U^T or P_S = U Lambda_S U^T"""
    return eig.with_values(select_eigs(eig.lam, sel)).reconstruct()


def relu_backward(
    rule: ReluRule,
    upstream,
    activation: np.ndarray | None = None,
    gate_on_activation: bool = False
) -> np.ndarray:
    """Backward rules of the rectifier, gated on the incoming gradient p:
        vanilla: p > 0 -> 1, p <= 0 -> 0
        deconv:  p > 0 -> p, p <= 0 -> 0
    With 'gate_on_activation' the forward activation z gates instead, as guided
    backpropagation does: vanilla -> p * 1[z > 0], deconv -> max(p, 0) * 1[z > 0]"""

    p = np.asarray(upstream, dtype=np.float64)

    if gate_on_activation:
        if activation is None:
            raise ValidationError("The activation is needed to gate on it")
        z = np.asarray(activation, dtype=np.float64)
        if z.shape != p.shape:
            raise DimensionError(f"Activation {z.shape} and gradient {p.shape} differ in shape")
        gate = z > 0
        match rule:
            case ReluRule.VANILLA:
                return np.where(gate, p, 0.0)
            case ReluRule.DECONV:
                return np.where(gate, np.maximum(p, 0.0), 0.0)

    match rule:
        case ReluRule.VANILLA:
            return (p > 0).astype(np.float64)
        case ReluRule.DECONV:
            return np.where(p > 0, p, 0.0)


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    rule: ReluRule

    def to_pgm(self, path: str | Path):
        export.save_pgm(path, self.values)

    def to_spm(self, path: str | Path):
        export.save_matrix(path, self.values)


def eigen_saliency(
    model: ToyModel,
    x_input,
    sel: EigSelection,
    rule: ReluRule = ReluRule.DECONV,
    cfg: GcpConfig = GcpConfig(),
    target: int | None = None,
    d_logits: np.ndarray | None = None,
    gate_on_activation: bool = False
) -> SaliencyMap:
    """Backpropagates the class score to the input through the eigenvalues in 'sel' only.

    The seed is the one-hot of 'target' (the predicted class by default), unless
    'd_logits' is given. The gradient dl/dA of the full forward pass is sent back
    through a GCP state whose spectrum outside 'sel' is zeroed, so only the selected
    eigenvalues (and their eigenvectors) carry gradient. The rectifier applies 'rule'."""

    # Importing at the top would be circular: the model is built on the GCP layer too
    from .model import model_forward, classifier_backward

    x_input = as_mat(x_input, "input")
    logits, cache = model_forward(model, x_input, cfg)

    if d_logits is None:
        target = int(np.argmax(logits)) if target is None else target
        if not 0 <= target < logits.shape[0]:
            raise ValidationError(f"Class {target} does not exist")
        d_logits = np.zeros_like(logits)
        d_logits[target] = 1.0

    d_a = classifier_backward(model, cache, d_logits).d_a

    features = cache.features
    d = features.shape[0]
    keep = sel.mask(d) & cache.state.kept
    state = gcp_forward(features, cfg, keep=keep)
    d_features = gcp_backward(state, d_a)

    if model.rectify:
        d_z = relu_backward(rule, d_features, cache.z, gate_on_activation)
    else:
        d_z = d_features

    d_x = model.proj.T @ d_z
    return SaliencyMap(values=np.abs(d_x), rule=rule)


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"Shapes {a.shape} and {b.shape} do not match")


def corr_coeff(a, b) -> float:
    """Pearson correlation of the entries of two maps, in [-1, 1]"""
    a = as_mat(a)
    b = as_mat(b)
    _check_same_shape(a, b)

    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.sum(da ** 2))
    nb = np.sqrt(np.sum(db ** 2))
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("The correlation of a constant map is not defined")

    return float(np.clip(np.sum(da * db) / (na * nb), -1.0, 1.0))


def mae(a, b) -> float:
    a = as_mat(a)
    b = as_mat(b)
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss(m, p_l) -> float:
    """||M - P_L||_F^2, pulls M towards the large-eigenvalue part"""
    m = as_square(m)
    p_l = as_square(p_l)
    _check_same_shape(m, p_l)
    return fro_norm(m - p_l) ** 2


def l2_loss(m, p_l, p_s) -> float:
    """-||M - P_L||_F^2 + ||M - P_S||_F^2, pushes M away from P_L and towards P_S"""
    m = as_square(m)
    p_l = as_square(p_l)
    p_s = as_square(p_s)
    _check_same_shape(m, p_l)
    _check_same_shape(m, p_s)
    return -fro_norm(m - p_l) ** 2 + fro_norm(m - p_s) ** 2


def perturbation_loss(m, p_l, p_s, mode: PerturbMode) -> tuple[float, np.ndarray]:
    """The loss and its gradient w.r.t. M"""
    m = as_square(m)
    p_l = as_square(p_l)
    match mode:
        case PerturbMode.L1:
            return l1_loss(m, p_l), 2.0 * (m - p_l)
        case PerturbMode.L2:
            p_s = as_square(p_s)
            return l2_loss(m, p_l, p_s), 2.0 * (p_l - p_s)


@dataclass
class PerturbTrace:
    image: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    mode: PerturbMode = PerturbMode.L1

    def to_csv(self, path: str | Path):
        export.write_csv(
            path, ["step", "loss"],
            ((step, float(loss)) for step, loss in enumerate(self.loss_history))
        )


def perturb(
    model: ToyModel,
    x0,
    t: int,
    mode: PerturbMode,
    steps: int = DEFAULT_PERTURB_STEPS,
    lr: float = DEFAULT_PERTURB_LR
) -> PerturbTrace:
    """Gradient descent on the input only. M is the covariance of the rectified
    projection of the current input; P_L and P_S split the covariance of x0 at 't'.
    The model itself is never modified"""

    if steps < 1:
        raise ValidationError(f"At least one step is needed, found {steps}")
    if lr <= 0:
        raise ValidationError(f"The learning rate must be positive, found {lr}")

    x0 = as_mat(x0, "input")

    def features_of(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = model.proj @ x
        return z, np.maximum(z, 0.0) if model.rectify else z

    _, features0 = features_of(x0)
    eig0 = sym_eig(covariance(features0))
    p_l = project_subspace(eig0, EigSelection(EigMode.LARGE, t))
    p_s = project_subspace(eig0, EigSelection(EigMode.SMALL, t))

    trace = PerturbTrace(image=x0.copy(), mode=mode)
    x = x0.copy()
    for step in range(steps):
        z, features = features_of(x)
        m = covariance(features)
        loss, d_m = perturbation_loss(m, p_l, p_s, mode)
        if not np.isfinite(loss):
            raise DivergenceError(f"The perturbation diverged at step {step}", step=step)

        trace.loss_history.append(loss)

        d_features = covariance_backward(features, d_m)
        d_z = d_features * (z > 0) if model.rectify else d_features
        x = x - lr * (model.proj.T @ d_z)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"The perturbed input diverged at step {step}", step=step)

        if step % 100 == 0:
            logger.debug("Perturbation step %d: loss %.6e", step, loss)

    trace.image = x
    return trace


def vn_trace_gap(a, b) -> float:
    """sum_i sigma_i(A) sigma_i(B) - |<A, B>|, non-negative by von Neumann's trace inequality"""
    a = as_square(a)
    b = as_square(b)
    _check_same_shape(a, b)

    sigma_a = sym_eig(a).lam
    sigma_b = sym_eig(b).lam
    for name, sigma in (("first", sigma_a), ("second", sigma_b)):
        if sigma[-1] < -SPSD_TOLERANCE * max(float(sigma[0]), 0.0):
            raise DomainError(f"The {name} matrix is not SPSD (eigenvalue {sigma[-1]:.3e})")

    sigma_a = np.maximum(sigma_a, 0.0)
    sigma_b = np.maximum(sigma_b, 0.0)
    return float(np.sum(sigma_a * sigma_b) - abs(fro_inner(a, b)))
