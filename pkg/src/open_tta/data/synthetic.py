from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ShapeMismatchError


class SyntheticSourceSpec(BaseModel):
    """Isotropic Gaussian class clusters; covariance is class_cov_scale * I."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_classes: int = Field(10, ge=2)
    dim: int = Field(16, ge=1)
    # None -> drawn from N(0, mean_scale^2) under the seed
    class_means: Optional[List[List[float]]] = None
    mean_scale: float = Field(1.2, gt=0.0)
    class_cov_scale: float = Field(1.0, gt=0.0)
    samples_per_class: int = Field(600, ge=0)
    holdout_fraction: float = Field(0.25, ge=0.0, lt=1.0)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_means(self) -> "SyntheticSourceSpec":
        if self.class_means is None:
            return self
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.shape != (self.num_classes, self.dim):
            raise ValueError(f"class_means must be {self.num_classes}x{self.dim}, got {means.shape}")
        for i in range(self.num_classes):
            for j in range(i + 1, self.num_classes):
                if np.array_equal(means[i], means[j]):
                    raise ValueError(f"class means {i} and {j} coincide")
        return self

    def resolved_means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=np.float64)
        rng = np.random.default_rng([self.seed or 0, 7])
        return rng.normal(0.0, self.mean_scale, size=(self.num_classes, self.dim))


@dataclass
class LabeledPool:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ShapeMismatchError("features and labels disagree", features=self.features.shape, labels=self.labels.shape)


def sample_classes(means: np.ndarray, cov_scale: float, counts: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw counts[k] points from class k, grouped by class."""
    std = np.sqrt(cov_scale)
    dim = means.shape[1]
    feats = [means[k] + std * rng.standard_normal((int(c), dim)) for k, c in enumerate(counts)]
    labels = [np.full(int(c), k, dtype=np.int64) for k, c in enumerate(counts)]
    return np.concatenate(feats) if feats else np.zeros((0, dim)), np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def generate_source(spec: SyntheticSourceSpec) -> Tuple[LabeledPool, LabeledPool]:
    """Train / held-out split with exact per-class counts."""
    means = spec.resolved_means()
    rng = np.random.default_rng([spec.seed or 0, 0])
    n_test = int(round(spec.samples_per_class * spec.holdout_fraction))
    n_train = spec.samples_per_class - n_test
    counts = np.full(spec.num_classes, spec.samples_per_class)
    feats, labels = sample_classes(means, spec.class_cov_scale, counts, rng)

    train_idx, test_idx = [], []
    for k in range(spec.num_classes):
        base = k * spec.samples_per_class
        train_idx.append(np.arange(base, base + n_train))
        test_idx.append(np.arange(base + n_train, base + spec.samples_per_class))
    tr = rng.permutation(np.concatenate(train_idx))
    te = np.concatenate(test_idx)
    train = LabeledPool(feats[tr], labels[tr], spec.num_classes)
    test = LabeledPool(feats[te], labels[te], spec.num_classes)
    return train, test
