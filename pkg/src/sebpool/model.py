from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence
import json
import logging

import numpy as np

from . import spm
from .linalg import as_mat
from .gcp import (
    GcpConfig, GcpState, gcp_forward_many, gcp_backward_many,
    upper_tri_vec_backward,
)
from .exceptions import DimensionError, ValidationError

logger = logging.getLogger(__name__)

# Coordinates of the pooled vector with a smaller spread than this are not rescaled
_SCALE_FLOOR = 1e-12


def vec_size(d: int) -> int:
    return d * (d + 1) // 2


@dataclass
class ToyModel:
    """x (d_in x N) -> ReLU(proj x) -> GCP head -> upper triangle -> standardization
    -> affine classifier"""

    # d x d_in channel projection
    proj: np.ndarray
    # num_classes x d(d+1)/2
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    # Standardization of the pooled vector. These are statistics of the training set,
    # not parameters: the backward pass treats them as constants
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    rectify: bool = True

    def __post_init__(self):
        d = self.d
        num_classes = self.classifier_b.shape[0]
        if self.classifier_w.shape != (num_classes, vec_size(d)):
            raise DimensionError(
                f"The classifier must be {num_classes}x{vec_size(d)}, found {self.classifier_w.shape}"
            )
        if self.feature_mean.shape != (vec_size(d),) or self.feature_scale.shape != (vec_size(d),):
            raise DimensionError("The standardization does not match the pooled vector")

    @classmethod
    def init(
        cls,
        d: int,
        d_in: int,
        num_classes: int,
        rng: np.random.Generator,
        rectify: bool = True
    ) -> ToyModel:
        """Positive projection (so a positive input stays in the active region) and a
        zero classifier, which starts from the uniform prediction"""
        if not 1 <= d <= d_in:
            raise ValidationError(f"d must be in [1, {d_in}], found {d}")

        size = vec_size(d)
        return cls(
            proj=np.abs(rng.standard_normal((d, d_in))) / np.sqrt(d_in),
            classifier_w=np.zeros((num_classes, size)),
            classifier_b=np.zeros(num_classes),
            feature_mean=np.zeros(size),
            feature_scale=np.ones(size),
            rectify=rectify,
        )

    @property
    def d(self) -> int:
        return self.proj.shape[0]

    @property
    def d_in(self) -> int:
        return self.proj.shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier_b.shape[0]

    def with_standardizer(self, vectors: np.ndarray) -> ToyModel:
        """Standardization refitted on a (samples x size) stack of pooled vectors"""
        vectors = np.asarray(vectors, dtype=np.float64)
        mean = vectors.mean(axis=0)
        std = vectors.std(axis=0)
        return replace(self, feature_mean=mean, feature_scale=np.where(std > _SCALE_FLOOR, std, 1.0))

    def params(self) -> dict[str, np.ndarray]:
        return {"proj": self.proj, "classifier_w": self.classifier_w, "classifier_b": self.classifier_b}

    def with_params(self, params: dict[str, np.ndarray]) -> ToyModel:
        return replace(self, **params)

    def to_json(self) -> str:
        return json.dumps({
            "d": self.d,
            "d_in": self.d_in,
            "num_classes": self.num_classes,
            "rectify": self.rectify
        })

    def save(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "model.json").write_text(self.to_json())
        for name in ("proj", "classifier_w", "classifier_b", "feature_mean", "feature_scale"):
            spm.save(directory / f"{name}.spm", getattr(self, name))

    @classmethod
    def load(cls, directory: str | Path) -> ToyModel:
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        # Vectors are stored as a single row
        return cls(
            proj=spm.load(directory / "proj.spm"),
            classifier_w=spm.load(directory / "classifier_w.spm"),
            classifier_b=spm.load(directory / "classifier_b.spm")[0],
            feature_mean=spm.load(directory / "feature_mean.spm")[0],
            feature_scale=spm.load(directory / "feature_scale.spm")[0],
            rectify=bool(meta["rectify"]),
        )


@dataclass(frozen=True)
class ForwardCache:
    x: np.ndarray
    # proj x, before the rectifier
    z: np.ndarray
    features: np.ndarray
    state: GcpState
    # Upper triangle of A and its standardized version
    vec: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class ClassifierGrad:
    d_w: np.ndarray
    d_b: np.ndarray
    d_a: np.ndarray


@dataclass(frozen=True)
class ModelGrad:
    # Summed over the samples when the gradient comes from model_backward_many
    d_proj: np.ndarray
    d_w: np.ndarray
    d_b: np.ndarray
    # d_in x N, or one per sample stacked
    d_x: np.ndarray

    def as_params(self) -> dict[str, np.ndarray]:
        return {"proj": self.d_proj, "classifier_w": self.d_w, "classifier_b": self.d_b}


def _project(model: ToyModel, xs: Sequence) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    xs = [as_mat(x, "input") for x in xs]
    for x in xs:
        if x.shape[0] != model.d_in:
            raise DimensionError(f"The model expects {model.d_in} channels, found {x.shape[0]}")
    if any(x.shape != xs[0].shape for x in xs):
        raise DimensionError("All the inputs must have the same shape")

    z = model.proj @ np.stack(xs)
    features = np.maximum(z, 0.0) if model.rectify else z
    return xs, z, features


def _head(model: ToyModel, states: Sequence[GcpState]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Upper triangles, standardized vectors and logits of a batch of pooled matrices"""
    rows, cols = np.triu_indices(model.d)
    vec = np.stack([state.a for state in states])[:, rows, cols]
    h = (vec - model.feature_mean) / model.feature_scale
    return vec, h, h @ model.classifier_w.T + model.classifier_b


def head_logits(model: ToyModel, states: Sequence[GcpState]) -> np.ndarray:
    """(batch x classes) logits of GCP states computed outside the model"""
    return _head(model, states)[2]


def model_forward(model: ToyModel, x, cfg: GcpConfig = GcpConfig()) -> tuple[np.ndarray, ForwardCache]:
    return model_forward_many(model, [x], cfg)[0]


def model_forward_many(
    model: ToyModel,
    xs: Sequence[np.ndarray],
    cfg: GcpConfig = GcpConfig(),
    keep: np.ndarray | None = None
) -> list[tuple[np.ndarray, ForwardCache]]:
    """model_forward over several inputs of the same shape, computed as one batch"""
    if len(xs) == 0:
        return []

    xs, z, features = _project(model, xs)
    states = gcp_forward_many(list(features), cfg, keep)
    vec, h, logits = _head(model, states)
    return [
        (logits[i], ForwardCache(xs[i], z[i], features[i], states[i], vec[i], h[i]))
        for i in range(len(xs))
    ]


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """The loss and its gradient w.r.t. the logits"""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValidationError(f"Label {label} is out of range for {logits.shape[0]} classes")

    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    probs = np.exp(shifted - log_z)

    d_logits = probs.copy()
    d_logits[label] -= 1.0
    return float(log_z - shifted[label]), d_logits


def classifier_backward(model: ToyModel, cache: ForwardCache, d_logits) -> ClassifierGrad:
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != (model.num_classes,):
        raise DimensionError(f"Expected {model.num_classes} logit gradients, found {d_logits.shape}")

    d_h = model.classifier_w.T @ d_logits
    d_vec = d_h / model.feature_scale
    return ClassifierGrad(
        d_w=np.outer(d_logits, cache.h),
        d_b=d_logits.copy(),
        d_a=upper_tri_vec_backward(d_vec, model.d),
    )


def model_backward(model: ToyModel, cache: ForwardCache, d_logits) -> ModelGrad:
    grads = model_backward_many(model, [cache], np.asarray(d_logits, dtype=np.float64)[None, :])
    return replace(grads, d_x=grads.d_x[0])


def model_backward_many(model: ToyModel, caches: Sequence[ForwardCache], d_logits) -> ModelGrad:
    """Backward pass of a batch given its (batch x classes) logit gradients. The
    parameter gradients are summed over the batch"""

    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != (len(caches), model.num_classes):
        raise DimensionError(
            f"Expected {len(caches)}x{model.num_classes} logit gradients, found {d_logits.shape}"
        )

    # The upper triangle of dl/dA receives dl/dvec, the strict lower triangle is never read
    rows, cols = np.triu_indices(model.d)
    d_a = np.zeros((len(caches), model.d, model.d))
    d_a[:, rows, cols] = d_logits @ model.classifier_w / model.feature_scale

    d_features = gcp_backward_many([cache.state for cache in caches], d_a)
    z = np.stack([cache.z for cache in caches])
    d_z = d_features * (z > 0) if model.rectify else d_features

    return ModelGrad(
        d_proj=np.einsum("bij,bkj->ik", d_z, np.stack([cache.x for cache in caches])),
        d_w=d_logits.T @ np.stack([cache.h for cache in caches]),
        d_b=d_logits.sum(axis=0),
        d_x=model.proj.T @ d_z,
    )
