from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from ..errors import BatchTooSmallError, NonFiniteError, ShapeMismatchError, TraceMismatchError
from .functional import entropy_grad_logits, softmax
from .model import Activation, ParamScope, SmallClassifier, StatsMode


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre_bn: np.ndarray
    xhat: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    inv_std: np.ndarray
    bn_out: np.ndarray
    outputs: np.ndarray
    stats_mode: StatsMode


@dataclass
class ForwardTrace:
    layers: List[LayerCache]
    batch_size: int
    signature: Tuple[Tuple[int, int, str], ...]
    stats_modes: Tuple[StatsMode, ...]


@dataclass
class GradientSet:
    scope: ParamScope
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def flatten(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads.values())

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(self.scope, {k: g * factor for k, g in self.grads.items()})

    def added(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(self.scope, {k: g + other.grads[k] for k, g in self.grads.items()})


def _check_features(model: SmallClassifier, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatchError("features do not match model input", expected_dim=model.input_dim, shape=x.shape)
    n = x.shape[0]
    if n < 1:
        raise BatchTooSmallError("empty batch", n=n)
    if n < 2 and StatsMode.TEST_BATCH in model.stats_modes:
        raise BatchTooSmallError("test-batch statistics need at least two samples", n=n)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("features contain non-finite values")
    return x


def forward(model: SmallClassifier, features: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    x = _check_features(model, features)
    caches: List[LayerCache] = []
    h = x
    for blk in model.layers:
        z = h @ blk.weight.T + blk.bias
        bn = blk.bn
        if bn.stats_mode == StatsMode.TEST_BATCH:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mean = bn.running_mean
            var = bn.running_var
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (z - mean) * inv_std
        y = bn.gamma * xhat + bn.beta
        out = np.maximum(y, 0.0) if blk.activation == Activation.RELU else y
        caches.append(LayerCache(h, z, xhat, mean, var, inv_std, y, out, bn.stats_mode))
        h = out
    trace = ForwardTrace(caches, x.shape[0], model.signature, model.stats_modes)
    return h, trace


def backward(model: SmallClassifier, trace: ForwardTrace, upstream: np.ndarray, scope: ParamScope) -> GradientSet:
    """Exact reverse pass. Under test-batch statistics the batch mean and
    variance are differentiated through, so every sample's gradient reaches
    every other sample's path."""
    if trace.signature != model.signature or trace.stats_modes != model.stats_modes:
        raise TraceMismatchError("trace was produced by a different model configuration")
    d = np.asarray(upstream, dtype=np.float64)
    if d.shape != (trace.batch_size, model.num_classes):
        raise TraceMismatchError("upstream gradient shape does not match trace", expected=(trace.batch_size, model.num_classes), got=d.shape)
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("upstream gradient contains non-finite values")

    n = trace.batch_size
    grads: Dict[str, np.ndarray] = {}
    for k in range(len(model.layers) - 1, -1, -1):
        blk = model.layers[k]
        c = trace.layers[k]
        dy = d * (c.bn_out > 0) if blk.activation == Activation.RELU else d
        dgamma = np.sum(dy * c.xhat, axis=0)
        dbeta = np.sum(dy, axis=0)
        dxhat = dy * blk.bn.gamma
        if c.stats_mode == StatsMode.TEST_BATCH:
            dz = (c.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - c.xhat * np.sum(dxhat * c.xhat, axis=0))
        else:
            dz = dxhat * c.inv_std
        if scope == ParamScope.ALL_PARAMS:
            grads[f"layers.{k}.weight"] = dz.T @ c.inputs
            grads[f"layers.{k}.bias"] = dz.sum(axis=0)
        grads[f"layers.{k}.bn.gamma"] = dgamma
        grads[f"layers.{k}.bn.beta"] = dbeta
        d = dz @ blk.weight

    ordered = {name: grads[name] for name, _ in model.named_parameters(scope)}
    return GradientSet(scope, ordered)


def per_sample_gradients(model: SmallClassifier, features: np.ndarray, scope: ParamScope) -> np.ndarray:
    """Entropy-loss gradient of every sample, one flattened row per sample.

    Each sample is back-propagated on its own while the batch-norm layers keep
    the statistics of the whole batch, so the rows sum to n times the gradient
    of the batch-mean entropy. Row layout follows `named_parameters(scope)`.
    """
    logits, trace = forward(model, features)
    probs = softmax(logits)
    dlogits = entropy_grad_logits(probs)
    n = trace.batch_size
    rows = np.zeros((n, model.num_parameters(scope)))
    upstream = np.zeros_like(dlogits)
    for i in range(n):
        upstream[i] = dlogits[i]
        rows[i] = backward(model, trace, upstream, scope).flatten()
        upstream[i] = 0.0
    return rows
