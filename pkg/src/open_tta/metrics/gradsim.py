from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import LabelRangeError, ShapeMismatchError
from ..utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class GradSimMatrix:
    """s[j, i]: mean cosine similarity between gradients of samples with truth j
    predicted as i and correct samples of class i. NaN marks a cell without pairs."""

    s: np.ndarray
    counts: np.ndarray
    excluded_zero_norm: int = 0

    @property
    def num_classes(self) -> int:
        return int(self.s.shape[0])

    def defined(self) -> np.ndarray:
        return self.counts > 0

    def mean_diagonal(self) -> Optional[float]:
        d = np.diag(self.s)[np.diag(self.defined())]
        return float(d.mean()) if d.size else None

    def mean_off_diagonal(self) -> Optional[float]:
        mask = self.defined() & ~np.eye(self.num_classes, dtype=bool)
        return float(self.s[mask].mean()) if mask.any() else None

    def to_dict(self) -> dict:
        return {
            "s": [[None if np.isnan(v) else float(v) for v in row] for row in self.s],
            "counts": self.counts.astype(int).tolist(),
            "excluded_zero_norm": self.excluded_zero_norm,
            "mean_diagonal": self.mean_diagonal(),
            "mean_off_diagonal": self.mean_off_diagonal(),
        }


def grad_cos_sim(per_sample_grads: np.ndarray, true_labels: np.ndarray, predicted_labels: np.ndarray, num_classes: int) -> GradSimMatrix:
    g = np.asarray(per_sample_grads, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if g.ndim != 2 or g.shape[0] != y.shape[0] or y.shape != p.shape:
        raise ShapeMismatchError("gradients and labels disagree", grads=g.shape, labels=y.shape, predicted=p.shape)
    for name, arr in (("true_labels", y), ("predicted_labels", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelRangeError(f"{name} outside [0, {num_classes})", min=int(arr.min()), max=int(arr.max()))

    norms = np.linalg.norm(g, axis=1)
    keep = norms > 0
    excluded = int((~keep).sum())
    if excluded:
        logger.info(f"grad_cos_sim: {excluded} zero-norm gradient(s) excluded")
    unit = g[keep] / norms[keep, None]
    y, p = y[keep], p[keep]
    cos = unit @ unit.T

    s = np.full((num_classes, num_classes), np.nan)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(num_classes):
        correct_i = np.flatnonzero((y == i) & (p == i))
        if correct_i.size == 0:
            continue
        for j in range(num_classes):
            group = np.flatnonzero((y == j) & (p == i))
            if group.size == 0:
                continue
            block = cos[np.ix_(group, correct_i)]
            total = block.sum()
            pairs = group.size * correct_i.size
            if j == i:
                # drop self-pairs
                total -= np.trace(block)
                pairs -= group.size
            if pairs > 0:
                s[j, i] = float(np.clip(total / pairs, -1.0, 1.0))
                counts[j, i] = pairs
    return GradSimMatrix(s=s, counts=counts, excluded_zero_norm=excluded)
