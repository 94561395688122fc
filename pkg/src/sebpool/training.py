from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
import logging

import numpy as np

from . import export
from .data import Dataset, make_rng
from .gcp import GcpConfig, SubsetMode
from .model import ToyModel, model_forward_many, model_backward_many, softmax_cross_entropy
from .diagnostics import spectrum_conditioning
from .exceptions import DivergenceError, ValidationError

logger = logging.getLogger(__name__)

# Keys of the random streams derived from TrainConfig.seed
_INIT_STREAM = 1
_SHUFFLE_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.0025
    momentum: float = 0.9
    # Applied to the weights, never to the biases
    weight_decay: float = 1e-3
    batch_size: int = 10
    # The classifier learns this many times faster than the projection
    classifier_lr_mult: float = 20.0
    # Largest Frobenius norm of the batch gradient of each parameter, None disables it.
    # Near-zero eigenvalues make the projection gradient spike by orders of magnitude
    clip_norm: float | None = 1.0
    # Step decay: the learning rate is multiplied by decay_factor at each of these epochs
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    snapshot_every: int = 10
    # Channels after the projection
    d: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be non-negative, found {self.epochs}")
        if self.lr < 0:
            raise ValidationError(f"The learning rate must be non-negative, found {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"The momentum must be in [0, 1), found {self.momentum}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, found {self.batch_size}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValidationError(f"clip_norm must be positive, found {self.clip_norm}")
        if self.snapshot_every < 1:
            raise ValidationError(f"snapshot_every must be positive, found {self.snapshot_every}")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.lr * self.decay_factor ** decays


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


class SGD:
    """SGD with momentum. The velocity already includes the learning rate:
        v = momentum * v + lr * mult * (clip(grad) + weight_decay * param)
        param = param - v
    """

    def __init__(
        self,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        lr_mults: dict[str, float] | None = None,
        no_decay: tuple[str, ...] = (),
        clip_norm: float | None = None
    ):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_mults = lr_mults or {}
        self.no_decay = set(no_decay)
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] | None = None

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        if self.velocity is None:
            self.velocity = {name: np.zeros_like(value) for name, value in params.items()}

        updated = {}
        for name, value in params.items():
            grad = clip_by_norm(grads[name], self.clip_norm)
            if name not in self.no_decay:
                grad = grad + self.weight_decay * value

            step = lr * self.lr_mults.get(name, 1.0) * grad
            self.velocity[name] = self.momentum * self.velocity[name] + step
            updated[name] = value - self.velocity[name]

        return updated


@dataclass
class TrainReport:
    model: ToyModel
    epoch_losses: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    # Empty when training runs without a validation set
    val_acc: list[float] = field(default_factory=list)
    # epoch -> (samples x d) eigenvalues of the pooled covariances
    spectra_snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    # (epoch, median condition number of the pooled covariances). It is taken over the
    # numerical range of each covariance, so a dead channel does not make it infinite
    kappa_series: list[tuple[int, float]] = field(default_factory=list)
    # (epoch, share of the pooled covariances that are numerically singular)
    rank_deficient_series: list[tuple[int, float]] = field(default_factory=list)

    def to_csv(self, path: str | Path):
        val = self.val_acc if self.val_acc else [float("nan")] * len(self.epoch_losses)
        export.write_csv(
            path, ["epoch", "loss", "train_acc", "val_acc"],
            (
                (epoch, loss, acc, v)
                for epoch, (loss, acc, v) in enumerate(zip(self.epoch_losses, self.train_acc, val))
            )
        )


@dataclass(frozen=True)
class _Pass:
    accuracy: float
    # samples x d(d+1)/2, in sample order
    vectors: np.ndarray
    spectra: np.ndarray


def _full_pass(
    model: ToyModel,
    dataset: Dataset,
    cfg: GcpConfig,
    keep: np.ndarray | None = None
) -> _Pass:
    outputs = model_forward_many(model, [x for x, _ in dataset.samples], cfg, keep)
    predictions = np.array([int(np.argmax(logits)) for logits, _ in outputs])
    return _Pass(
        accuracy=float(np.mean(predictions == dataset.labels)),
        vectors=np.stack([cache.vec for _, cache in outputs]),
        spectra=np.stack([cache.state.eig.lam for _, cache in outputs]),
    )


def evaluate(model: ToyModel, dataset: Dataset, cfg: GcpConfig = GcpConfig(), keep: np.ndarray | None = None) -> float:
    """Accuracy of the model on 'dataset'. 'keep' overrides which eigenvalues are used"""
    if len(dataset) == 0:
        raise ValidationError("Cannot evaluate on an empty dataset")
    return _full_pass(model, dataset, cfg, keep).accuracy


def _conditioning_summary(spectra: np.ndarray) -> tuple[float, float]:
    """Median condition number over the numerical range and the share of rank-deficient
    samples"""
    conditionings = [spectrum_conditioning(lam) for lam in spectra]
    kappa = float(np.median([c.kappa_on_range for c in conditionings]))
    deficient = float(np.mean([c.rank < lam.shape[0] for c, lam in zip(conditionings, spectra)]))
    return kappa, deficient


def train(
    dataset: Dataset,
    cfg: GcpConfig = GcpConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    val: Dataset | None = None
) -> TrainReport:
    """Minibatch SGD of a fresh ToyModel on softmax cross-entropy. Deterministic given
    train_cfg.seed. Truncation in 'cfg' applies to the forward and backward passes alike.

    The standardization in front of the classifier is fitted on the initial model and
    refreshed at the end of every epoch from the pass that measures the train accuracy."""

    if len(dataset) == 0:
        raise ValidationError("Cannot train on an empty dataset")

    model = ToyModel.init(
        train_cfg.d, dataset.d_in, dataset.num_classes, make_rng(train_cfg.seed, _INIT_STREAM)
    )
    shuffle_rng = make_rng(train_cfg.seed, _SHUFFLE_STREAM)
    optimizer = SGD(
        momentum=train_cfg.momentum,
        weight_decay=train_cfg.weight_decay,
        lr_mults={
            "classifier_w": train_cfg.classifier_lr_mult,
            "classifier_b": train_cfg.classifier_lr_mult
        },
        no_decay=("classifier_b",),
        clip_norm=train_cfg.clip_norm,
    )

    xs = [x for x, _ in dataset.samples]
    labels = dataset.labels
    model = model.with_standardizer(_full_pass(model, dataset, cfg).vectors)

    report = TrainReport(model=model)
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(dataset))
        total_loss = 0.0

        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            outputs = model_forward_many(model, [xs[i] for i in batch], cfg)

            d_logits = np.zeros((len(batch), model.num_classes))
            for row, (i, (logits, cache)) in enumerate(zip(batch, outputs)):
                loss, d_logits[row] = softmax_cross_entropy(logits, int(labels[i]))
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"The loss is not finite at epoch {epoch}, sample {i}",
                        epoch=epoch, sample_index=int(i), spectrum=cache.state.eig.lam.copy()
                    )
                total_loss += loss

            grads = model_backward_many(model, [cache for _, cache in outputs], d_logits).as_params()
            grads = {name: grad / len(batch) for name, grad in grads.items()}
            params = optimizer.step(model.params(), grads, lr)
            if not all(np.all(np.isfinite(value)) for value in params.values()):
                last = int(batch[-1])
                raise DivergenceError(
                    f"The parameters are not finite after epoch {epoch}, sample {last}",
                    epoch=epoch, sample_index=last, spectrum=outputs[-1][1].state.eig.lam.copy()
                )
            model = model.with_params(params)

        full = _full_pass(model, dataset, cfg)
        model = model.with_standardizer(full.vectors)

        report.epoch_losses.append(total_loss / len(dataset))
        report.train_acc.append(full.accuracy)
        if val is not None:
            report.val_acc.append(evaluate(model, val, cfg))

        if (epoch + 1) % train_cfg.snapshot_every == 0 or epoch + 1 == train_cfg.epochs:
            kappa, deficient = _conditioning_summary(full.spectra)
            report.spectra_snapshots[epoch + 1] = full.spectra
            report.kappa_series.append((epoch + 1, kappa))
            report.rank_deficient_series.append((epoch + 1, deficient))
            logger.debug(
                "Epoch %d: median condition number %.3e, %.0f%% rank-deficient",
                epoch + 1, kappa, 100 * deficient
            )

        logger.info(
            "Epoch %d: loss %.4f, train accuracy %.3f%s",
            epoch + 1, report.epoch_losses[-1], full.accuracy,
            f", validation accuracy {report.val_acc[-1]:.3f}" if val is not None else ""
        )

    report.model = model
    return report


def truncation_sweep(
    model: ToyModel,
    dataset: Dataset,
    ks: list[int],
    cfg: GcpConfig = GcpConfig(),
    subset_mode: SubsetMode = SubsetMode.TOP
) -> dict[int, float]:
    """Accuracy at inference when only k eigenvalues reach the normalization. With
    SubsetMode.FIRST_PLUS_SMALL the largest eigenvalue is added to the last k"""

    results = {}
    for k in ks:
        results[k] = evaluate(model, dataset, replace(cfg, truncate_k=k, subset_mode=subset_mode))
        logger.info("k = %d (%s): accuracy %.3f", k, subset_mode.value, results[k])
    return results
