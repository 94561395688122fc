from __future__ import annotations

# Synthetic feature maps whose class information lives in low-variance directions.
#
# Every sample is a d_in x N matrix. A random orthonormal basis of R^{d_in} is split
# into 'noise_dims' directions with large, class-independent variance and the
# remaining signal directions with a tiny variance. Inside the signal subspace each
# class owns a direction along which the features vary coherently, so the class can
# only be read from the smallest eigenvalues of the covariance (and their eigenvectors).

from dataclasses import dataclass, replace
import logging

import numpy as np

from .linalg import fro_norm
from .exceptions import ValidationError

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "PCG64"


def make_rng(*keys: int) -> np.random.Generator:
    """Every random stream in the package comes from here, keyed by non-negative integers"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 5
    n_per_class: int = 60
    d_in: int = 12
    # Features (columns) per sample
    n: int = 24
    noise_scale: float = 1.0
    seed: int = 0
    noise_dims: int = 4
    signal_scale: float = 0.02
    # Added to every channel so that a positive projection stays in the active region
    # of the rectifier; centering removes it from every covariance
    offset: float = 3.0
    # Isotropic spread inside the signal subspace, relative to signal_scale
    jitter: float = 0.15

    def __post_init__(self):
        if self.d_in < 4:
            raise ValidationError(f"d_in must be at least 4, found {self.d_in}")
        if self.n < self.d_in + 2:
            raise ValidationError(f"N must be at least d_in + 2 = {self.d_in + 2}, found {self.n}")
        if self.num_classes < 2:
            raise ValidationError(f"At least two classes are needed, found {self.num_classes}")
        if self.n_per_class < 1:
            raise ValidationError(f"n_per_class must be positive, found {self.n_per_class}")
        if not 1 <= self.noise_dims < self.d_in:
            raise ValidationError(f"noise_dims must be in [1, {self.d_in}), found {self.noise_dims}")
        if self.noise_scale <= 0 or self.signal_scale <= 0 or self.jitter < 0:
            raise ValidationError("The scales must be positive")
        if self.seed < 0:
            raise ValidationError(f"The seed must be non-negative, found {self.seed}")

    @property
    def signal_dims(self) -> int:
        return self.d_in - self.noise_dims


@dataclass(frozen=True)
class Dataset:
    samples: list[tuple[np.ndarray, int]]
    num_classes: int
    seed: int
    config: DatasetConfig
    # d_in x signal_dims, orthonormal columns
    signal_basis: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def noise_dims(self) -> int:
        return self.config.noise_dims

    @property
    def signal_dims(self) -> int:
        return self.config.signal_dims

    @property
    def d_in(self) -> int:
        return self.samples[0][0].shape[0]

    @property
    def n(self) -> int:
        return self.samples[0][0].shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.samples], dtype=np.intp)

    def split(self, val_fraction: float) -> tuple[Dataset, Dataset]:
        """Stratified and deterministic: the last samples of every class go to validation"""
        if not 0 < val_fraction < 1:
            raise ValidationError(f"val_fraction must be in (0, 1), found {val_fraction}")

        val_indices = set()
        labels = self.labels
        for c in range(self.num_classes):
            indices = np.flatnonzero(labels == c)
            n_val = int(round(len(indices) * val_fraction))
            val_indices.update(int(i) for i in indices[len(indices) - n_val:])

        train = [s for i, s in enumerate(self.samples) if i not in val_indices]
        val = [s for i, s in enumerate(self.samples) if i in val_indices]
        return replace(self, samples=train), replace(self, samples=val)


def _class_directions(rng: np.random.Generator, dims: int, num_classes: int) -> np.ndarray:
    """Columns are unit vectors; orthonormal when there is room for them"""
    if num_classes <= dims:
        q, _ = np.linalg.qr(rng.standard_normal((dims, num_classes)))
        return q

    directions = rng.standard_normal((dims, num_classes))
    return directions / np.linalg.norm(directions, axis=0, keepdims=True)


def generate(cfg: DatasetConfig) -> Dataset:
    rng = make_rng(cfg.seed)

    basis, _ = np.linalg.qr(rng.standard_normal((cfg.d_in, cfg.d_in)))
    noise_basis = basis[:, :cfg.noise_dims]
    signal_basis = basis[:, cfg.noise_dims:]
    directions = _class_directions(rng, cfg.signal_dims, cfg.num_classes)

    samples = []
    for c in range(cfg.num_classes):
        for _ in range(cfg.n_per_class):
            noise = cfg.noise_scale * rng.standard_normal((cfg.noise_dims, cfg.n))

            # Exactly centered with unit sample variance, so every sample of a class has
            # the same variance along its direction
            g = rng.standard_normal(cfg.n)
            g -= g.mean()
            g /= g.std()
            eps = rng.standard_normal((cfg.signal_dims, cfg.n))
            signal = cfg.signal_scale * (np.outer(directions[:, c], g) + cfg.jitter * eps)

            x = cfg.offset + noise_basis @ noise + signal_basis @ signal
            samples.append((x, c))

    order = rng.permutation(len(samples))
    samples = [samples[i] for i in order]

    logger.info(
        "Generated %d samples of %dx%d (%d classes, %d noise dims)",
        len(samples), cfg.d_in, cfg.n, cfg.num_classes, cfg.noise_dims
    )
    return Dataset(samples, cfg.num_classes, cfg.seed, cfg, signal_basis)


def gen_dataset(
    num_classes: int = 5,
    n_per_class: int = 60,
    d_in: int = 12,
    n: int = 24,
    noise_scale: float = 1.0,
    seed: int = 0,
    **kwargs
) -> Dataset:
    """Shortcut for generate(DatasetConfig(...)), the rest of DatasetConfig's fields
    can be passed as keywords"""
    return generate(DatasetConfig(
        num_classes=num_classes,
        n_per_class=n_per_class,
        d_in=d_in,
        n=n,
        noise_scale=noise_scale,
        seed=seed,
        **kwargs
    ))


def signal_separation(dataset: Dataset) -> tuple[float, float]:
    """(between, within) for the covariances restricted to the signal subspace: the mean
    distance between class means and the mean distance of a sample to its class mean,
    both in Frobenius norm"""

    b = dataset.signal_basis
    covs = []
    for x, _ in dataset.samples:
        xc = b.T @ (x - x.mean(axis=1, keepdims=True))
        covs.append(xc @ xc.T / x.shape[1])
    covs = np.stack(covs)
    labels = dataset.labels

    means = {c: covs[labels == c].mean(axis=0) for c in range(dataset.num_classes) if np.any(labels == c)}
    classes = sorted(means)
    if len(classes) < 2:
        raise ValidationError("At least two classes are needed to measure their separation")

    between = np.mean([
        fro_norm(means[c1] - means[c2])
        for i, c1 in enumerate(classes) for c2 in classes[i + 1:]
    ])
    within = np.mean([fro_norm(cov - means[label]) for cov, label in zip(covs, labels)])
    return float(between), float(within)
