from __future__ import annotations

# Finite-difference oracles for every analytic gradient of the package, plus the
# random inputs they run on.

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence
import logging

import numpy as np

from . import export, utils
from .linalg import sym_eig, sym_eig_many, fro_inner, fro_norm
from .spectral import Sqrt, PRoot, Log, ExpInv, EigGrad, mat_fn, mat_fn_backward, eig_backward
from .gcp import (
    GcpConfig, covariance, covariance_backward, seb_factor_backward, gcp_forward, gcp_forward_many, gcp_backward,
)
from .data import make_rng, gen_dataset
from .model import ToyModel, head_logits, model_forward, model_forward_many, model_backward, softmax_cross_entropy
from .exceptions import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_H = 1e-5


def numerical_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    h_rel: float = DEFAULT_H,
    symmetric: bool = False
) -> np.ndarray:
    """Central differences, entry by entry, with a step of h_rel * max(1, |x_ij|).

    With 'symmetric', x must be a symmetric matrix and each off-diagonal pair is moved
    together so the input stays symmetric. The pair derivative is halved, so the result
    is comparable with sym(G) for an analytic gradient G"""

    return numerical_gradient_many(lambda inputs: [fn(v) for v in inputs], x, h_rel, symmetric)


def numerical_gradient_many(
    fn_many: Callable[[list[np.ndarray]], Sequence[float]],
    x: np.ndarray,
    h_rel: float = DEFAULT_H,
    symmetric: bool = False
) -> np.ndarray:
    """numerical_gradient for a function that evaluates a list of inputs at once. Every
    perturbed copy of x, two per entry, goes through a single call"""

    x = np.array(x, dtype=np.float64)
    if symmetric:
        entries = [(i, j) for i in range(x.shape[0]) for j in range(i, x.shape[0])]
    else:
        entries = list(np.ndindex(x.shape))

    inputs = []
    steps = np.empty(len(entries))
    for k, idx in enumerate(entries):
        steps[k] = h_rel * max(1.0, abs(x[idx]))
        for value in (x[idx] + steps[k], x[idx] - steps[k]):
            moved = x.copy()
            moved[idx] = value
            if symmetric:
                moved[idx[::-1]] = value
            inputs.append(moved)

    values = np.asarray(fn_many(inputs), dtype=np.float64).reshape(-1, 2)
    derivatives = (values[:, 0] - values[:, 1]) / (2 * steps)

    grad = np.zeros_like(x)
    for idx, derivative in zip(entries, derivatives):
        if symmetric and idx[0] != idx[1]:
            grad[idx] = grad[idx[::-1]] = derivative / 2
        else:
            grad[idx] = derivative
    return grad


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def random_spsd(
    rng: np.random.Generator,
    d: int,
    low: float = 0.1,
    high: float = 10.0,
    gap: float = 0.1
) -> np.ndarray:
    """Random SPD matrix with eigenvalues in [low, high], any two of them at least
    'gap' apart"""
    if high - gap * (d - 1) <= low:
        raise ValidationError(f"[{low}, {high}] cannot hold {d} eigenvalues {gap} apart")

    lam = np.sort(rng.uniform(low, high - gap * (d - 1), d)) + gap * np.arange(d)
    return utils.compose(random_orthogonal(rng, d), lam)


def conditioned_feature_map(rng: np.random.Generator, d: int, n: int, spectrum) -> np.ndarray:
    """A d x N feature matrix whose covariance has exactly the given spectrum:
    X = U diag(sqrt(N lambda)) Q^T with Q orthonormal and orthogonal to the ones vector"""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (d,):
        raise ValidationError(f"Expected {d} eigenvalues, found {spectrum.shape}")
    if n < d + 1:
        raise ValidationError(f"N must be at least d + 1 = {d + 1}, found {n}")

    a = rng.standard_normal((n, d))
    q, _ = np.linalg.qr(a - a.mean(axis=0))
    u = random_orthogonal(rng, d)
    return (u * np.sqrt(n * spectrum)) @ q.T


def _random_sizes(rng: np.random.Generator) -> tuple[int, int]:
    d = int(rng.integers(3, 9))
    n = int(rng.integers(d + 2, 17))
    return d, n


def _check_covariance(rng: np.random.Generator, trial: int) -> float:
    d, n = _random_sizes(rng)
    x = rng.standard_normal((d, n))
    w = rng.standard_normal((d, d))

    analytic = covariance_backward(x, w)
    numeric = numerical_gradient(lambda v: fro_inner(w, covariance(v)), x)
    return utils.relative_error(analytic, numeric)


_SPECTRAL_FNS = (Sqrt(), PRoot(3), Log(), ExpInv())


def _check_mat_fn(rng: np.random.Generator, trial: int) -> float:
    fn = _SPECTRAL_FNS[trial % len(_SPECTRAL_FNS)]
    d = int(rng.integers(3, 9))
    p = random_spsd(rng, d)
    w = rng.standard_normal((d, d))

    eig = sym_eig(p)
    analytic = eig_backward(eig, mat_fn_backward(eig, fn, w))
    numeric = numerical_gradient_many(
        lambda ps: [fro_inner(w, mat_fn(e, fn)) for e in sym_eig_many(ps)], p, symmetric=True
    )
    return utils.relative_error(analytic, numeric)


def _check_eig(rng: np.random.Generator, trial: int) -> float:
    d = int(rng.integers(3, 9))
    p = random_spsd(rng, d)
    w_u = rng.standard_normal((d, d))
    w_lam = rng.standard_normal(d)

    def losses(ps: list[np.ndarray]) -> list[float]:
        return [fro_inner(w_u, eig.u) + float(w_lam @ eig.lam) for eig in sym_eig_many(ps)]

    analytic = eig_backward(sym_eig(p), EigGrad(d_u=w_u, d_lambda=w_lam))
    numeric = numerical_gradient_many(losses, p, symmetric=True)
    return utils.relative_error(analytic, numeric)


def _check_seb_factor(rng: np.random.Generator, trial: int) -> float:
    d = int(rng.integers(3, 9))
    eig = sym_eig(random_spsd(rng, d, high=4.0))
    q = mat_fn(eig, Sqrt())
    s = mat_fn(eig, ExpInv())
    factor = fro_norm(q @ s.T)

    d_q, d_s = seb_factor_backward(q, s, factor)
    numeric_q = numerical_gradient(lambda v: fro_norm(v @ s.T), q)
    numeric_s = numerical_gradient(lambda v: fro_norm(q @ v.T), s)
    return max(utils.relative_error(d_q, numeric_q), utils.relative_error(d_s, numeric_s))


def _check_gcp(cfg: GcpConfig) -> Callable[[np.random.Generator, int], float]:
    def check(rng: np.random.Generator, trial: int) -> float:
        d, n = _random_sizes(rng)
        spectrum = np.sort(rng.uniform(0.1, 4.0 - 0.1 * (d - 1), d))[::-1] + 0.1 * np.arange(d)[::-1]
        x = conditioned_feature_map(rng, d, n, spectrum)
        w = rng.standard_normal((d, d))

        analytic = gcp_backward(gcp_forward(x, cfg), w)
        numeric = numerical_gradient_many(
            lambda xs: [fro_inner(w, state.a) for state in gcp_forward_many(xs, cfg)], x
        )
        return utils.relative_error(analytic, numeric)

    return check


def _check_model(rng: np.random.Generator, trial: int) -> float:
    """End-to-end: softmax cross-entropy of a 3-class model with d = 6, w.r.t. every
    parameter and the input"""

    seed = int(rng.integers(0, 2 ** 31))
    dataset = gen_dataset(
        num_classes=3, n_per_class=2, d_in=8, n=12, seed=seed,
        noise_dims=2, signal_scale=0.3, jitter=1.0
    )
    cfg = GcpConfig(use_seb=True)
    model = ToyModel.init(6, dataset.d_in, dataset.num_classes, rng)
    model = model.with_params({
        "classifier_w": 0.1 * rng.standard_normal(model.classifier_w.shape),
        "classifier_b": 0.1 * rng.standard_normal(model.num_classes)
    })
    model = model.with_standardizer(np.stack([
        cache.vec for _, cache in model_forward_many(model, [x for x, _ in dataset.samples], cfg)
    ]))
    x, label = dataset.samples[0]

    logits, cache = model_forward(model, x, cfg)
    _, d_logits = softmax_cross_entropy(logits, label)
    grads = model_backward(model, cache, d_logits)

    def ce(all_logits) -> list[float]:
        return [softmax_cross_entropy(logits, label)[0] for logits in all_logits]

    def proj_losses(projs: list[np.ndarray]) -> list[float]:
        z = [p @ x for p in projs]
        features = [np.maximum(v, 0.0) for v in z] if model.rectify else z
        return ce(head_logits(model, gcp_forward_many(features, cfg)))

    # The classifier sits after the pooling, so its losses only need the cached vector
    numeric = {
        "proj": numerical_gradient_many(proj_losses, model.proj),
        "classifier_w": numerical_gradient_many(
            lambda ws: ce(w @ cache.h + model.classifier_b for w in ws), model.classifier_w
        ),
        "classifier_b": numerical_gradient_many(
            lambda bs: ce(model.classifier_w @ cache.h + b for b in bs), model.classifier_b
        ),
        "x": numerical_gradient_many(
            lambda xs: ce(logits for logits, _ in model_forward_many(model, xs, cfg)), x
        ),
    }
    analytic = {"proj": grads.d_proj, "classifier_w": grads.d_w, "classifier_b": grads.d_b, "x": grads.d_x}
    return max(utils.relative_error(analytic[name], numeric[name]) for name in numeric)


@dataclass(frozen=True)
class GradTarget:
    name: str
    tolerance: float
    check: Callable[[np.random.Generator, int], float]


TARGETS: dict[str, GradTarget] = {
    target.name: target for target in (
        GradTarget("covariance_backward", 1e-6, _check_covariance),
        GradTarget("mat_fn_backward", 1e-4, _check_mat_fn),
        GradTarget("eig_backward", 1e-4, _check_eig),
        GradTarget("seb_factor_backward", 1e-4, _check_seb_factor),
        GradTarget("gcp_backward", 1e-3, _check_gcp(GcpConfig(use_seb=True))),
        GradTarget("gcp_backward_noseb", 1e-3, _check_gcp(GcpConfig(use_seb=False))),
        GradTarget("model_backward", 1e-3, _check_model),
    )
}


@dataclass(frozen=True)
class TrialResult:
    trial: int
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    target: str
    tolerance: float
    seed: int
    results: list[TrialResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((result.max_rel_err for result in self.results), default=0.0)

    def to_csv(self, path: str | Path):
        export.write_csv(
            path, ["trial", "max_rel_err", "pass"],
            ((r.trial, r.max_rel_err, str(r.passed).lower()) for r in self.results)
        )


def gradcheck(target: str, trials: int = 100, seed: int = 0, report_path: str | Path | None = None) -> GradcheckReport:
    """Runs the finite-difference oracle of 'target'. Trial i draws everything from
    make_rng(seed, i), so any trial can be replayed on its own"""

    if target not in TARGETS:
        raise ValidationError(
            f"Unknown gradient target '{target}', expected one of {', '.join(sorted(TARGETS))}"
        )
    if trials < 1:
        raise ValidationError(f"At least one trial is needed, found {trials}")

    grad_target = TARGETS[target]
    report = GradcheckReport(target, grad_target.tolerance, seed)
    for trial in range(trials):
        error = grad_target.check(make_rng(seed, trial), trial)
        passed = bool(error <= grad_target.tolerance)
        if not passed:
            logger.warning(
                "%s: trial %d has a relative error of %.3e (tolerance %.0e)",
                target, trial, error, grad_target.tolerance
            )
        report.results.append(TrialResult(trial, error, passed))

    logger.info(
        "%s: %d/%d trials passed, max relative error %.3e",
        target, sum(r.passed for r in report.results), trials, report.max_rel_err
    )

    if report_path is not None:
        report.to_csv(report_path)

    return report
