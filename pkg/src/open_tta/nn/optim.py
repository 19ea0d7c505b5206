from __future__ import annotations

from typing import Dict

import numpy as np

from .backprop import GradientSet
from .model import SmallClassifier


class Sgd:
    def __init__(self, lr: float) -> None:
        self.lr = lr

    def snapshot(self) -> Dict[str, object]:
        return {}

    def restore(self, snap: Dict[str, object]) -> None:
        pass

    def step(self, model: SmallClassifier, grads: GradientSet) -> float:
        """Apply one update in place and return the L2 norm of the change."""
        sq = 0.0
        for name, param in model.named_parameters(grads.scope):
            delta = -self.lr * grads.grads[name]
            param += delta
            sq += float(np.sum(delta * delta))
        return float(np.sqrt(sq))


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def snapshot(self) -> Dict[str, object]:
        """Copy of the moments and step count, for `restore`."""
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()}, "v": {k: a.copy() for k, a in self.v.items()}}

    def restore(self, snap: Dict[str, object]) -> None:
        self.t = int(snap["t"])  # type: ignore[arg-type]
        self.m = dict(snap["m"])  # type: ignore[arg-type]
        self.v = dict(snap["v"])  # type: ignore[arg-type]

    def step(self, model: SmallClassifier, grads: GradientSet) -> float:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        sq = 0.0
        for name, param in model.named_parameters(grads.scope):
            g = grads.grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            delta = -self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param += delta
            sq += float(np.sum(delta * delta))
        return float(np.sqrt(sq))
