from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import ConfigValidationError, ShapeMismatchError

CorruptionKind = Literal["gaussian_noise", "feature_scale", "rotation_2d_pairs", "mean_shift"]

# severity 1..5 -> parameter magnitude
SEVERITY_TABLE: Dict[str, Tuple[float, ...]] = {
    "gaussian_noise": (0.4, 0.8, 1.2, 1.6, 2.0),  # noise std
    "feature_scale": (1.25, 1.5, 1.75, 2.0, 2.5),  # scale factor
    "rotation_2d_pairs": (8.0, 16.0, 24.0, 32.0, 40.0),  # degrees
    "mean_shift": (0.5, 1.0, 1.5, 2.0, 3.0),  # shift norm
}

FAMILIES: Tuple[str, ...] = ("gaussian_noise", "feature_scale", "rotation_2d_pairs", "mean_shift")


class CorruptionOp(BaseModel):
    """A parametric feature-space corruption at one severity level.

    `magnitude` overrides the severity table; `delta` gives an explicit
    mean_shift vector used as is.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: CorruptionKind
    severity: int = Field(5, ge=1, le=5)
    magnitude: Optional[float] = None
    delta: Optional[List[float]] = None

    @property
    def parameter(self) -> float:
        if self.magnitude is not None:
            return float(self.magnitude)
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    def describe(self) -> str:
        return f"{self.kind}@{self.severity}"

    def apply(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.array(features, dtype=np.float64, copy=True)
        d = x.shape[1]
        if self.kind == "gaussian_noise":
            return x + self.parameter * rng.standard_normal(x.shape)
        if self.kind == "feature_scale":
            # even features stretched, odd features squeezed
            f = np.where(np.arange(d) % 2 == 0, self.parameter, 1.0 / self.parameter)
            return x * f
        if self.kind == "rotation_2d_pairs":
            theta = np.deg2rad(self.parameter)
            c, s = np.cos(theta), np.sin(theta)
            for i in range(0, d - 1, 2):
                a, b = x[:, i].copy(), x[:, i + 1].copy()
                x[:, i] = c * a - s * b
                x[:, i + 1] = s * a + c * b
            return x
        if self.kind == "mean_shift":
            if self.delta is not None:
                delta = np.asarray(self.delta, dtype=np.float64)
                if delta.shape != (d,):
                    raise ShapeMismatchError("mean_shift delta does not match feature dimension", expected=(d,), got=delta.shape)
            else:
                signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
                delta = self.parameter * signs / np.sqrt(d)
            return x + delta
        raise ConfigValidationError("unknown corruption kind", kind=self.kind)


def default_corruption_sequence(length: int = 15) -> List[CorruptionOp]:
    """Cycle the four families; severities alternate 5 and 4 every full cycle."""
    out = []
    for i in range(length):
        severity = 5 - ((i // len(FAMILIES)) % 2)
        out.append(CorruptionOp(kind=FAMILIES[i % len(FAMILIES)], severity=severity))
    return out
