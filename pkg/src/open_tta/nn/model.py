from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import NonFiniteError, ShapeMismatchError


class StatsMode(str, Enum):
    SOURCE = "source"
    TEST_BATCH = "test_batch"


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


class ParamScope(str, Enum):
    AFFINE_ONLY = "affine_only"
    ALL_PARAMS = "all_params"


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    stats_mode: StatsMode = StatsMode.SOURCE

    @classmethod
    def fresh(cls, dim: int, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            eps=eps,
        )

    def validate(self, dim: int) -> None:
        for name in ("running_mean", "running_var", "gamma", "beta"):
            arr = getattr(self, name)
            if arr.shape != (dim,):
                raise ShapeMismatchError(f"batch-norm {name} has wrong shape", expected=(dim,), got=arr.shape)
        if self.eps <= 0:
            raise ShapeMismatchError("batch-norm eps must be positive", eps=self.eps)
        if np.any(self.running_var <= 0):
            raise NonFiniteError("batch-norm running_var must be strictly positive")


@dataclass
class LayerBlock:
    weight: np.ndarray  # out_dim x in_dim
    bias: np.ndarray
    bn: BatchNormState
    activation: Activation = Activation.RELU

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    def validate(self) -> None:
        if self.weight.ndim != 2:
            raise ShapeMismatchError("weight must be a matrix", ndim=self.weight.ndim)
        if self.bias.shape != (self.out_dim,):
            raise ShapeMismatchError("bias has wrong shape", expected=(self.out_dim,), got=self.bias.shape)
        self.bn.validate(self.out_dim)


@dataclass
class SmallClassifier:
    """Feed-forward classifier: every block is linear -> batch norm -> activation.

    The final block uses the identity activation and emits logits.
    """

    layers: List[LayerBlock] = field(default_factory=list)

    @classmethod
    def init(cls, input_dim: int, hidden: Sequence[int], num_classes: int, seed: int = 0) -> "SmallClassifier":
        if input_dim < 1 or num_classes < 2:
            raise ShapeMismatchError("need input_dim >= 1 and num_classes >= 2", input_dim=input_dim, num_classes=num_classes)
        rng = np.random.default_rng(seed)
        dims = [input_dim, *hidden, num_classes]
        layers: List[LayerBlock] = []
        for k in range(len(dims) - 1):
            fan_in, fan_out = dims[k], dims[k + 1]
            # He init for the ReLU stack
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            last = k == len(dims) - 2
            layers.append(
                LayerBlock(
                    weight=w,
                    bias=np.zeros(fan_out),
                    bn=BatchNormState.fresh(fan_out),
                    activation=Activation.IDENTITY if last else Activation.RELU,
                )
            )
        model = cls(layers)
        model.validate()
        return model

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def signature(self) -> Tuple[Tuple[int, int, str], ...]:
        return tuple((blk.in_dim, blk.out_dim, blk.activation.value) for blk in self.layers)

    def validate(self) -> None:
        if not self.layers:
            raise ShapeMismatchError("model has no layers")
        for k, blk in enumerate(self.layers):
            blk.validate()
            if k > 0 and blk.in_dim != self.layers[k - 1].out_dim:
                raise ShapeMismatchError("layer dimensions do not chain", layer=k)
        if self.layers[-1].activation != Activation.IDENTITY:
            raise ShapeMismatchError("final layer must use the identity activation")
        if self.num_classes < 2:
            raise ShapeMismatchError("need at least two classes", num_classes=self.num_classes)
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError("non-finite parameter", name=name)

    def set_stats_mode(self, mode: StatsMode) -> None:
        for blk in self.layers:
            blk.bn.stats_mode = mode

    @property
    def stats_modes(self) -> Tuple[StatsMode, ...]:
        return tuple(blk.bn.stats_mode for blk in self.layers)

    def copy(self) -> "SmallClassifier":
        clone = copy.deepcopy(self)
        for _, arr in clone.named_arrays():
            arr.flags.writeable = True
        return clone

    def named_parameters(self, scope: ParamScope) -> List[Tuple[str, np.ndarray]]:
        """Trainable arrays in concatenation order: layer ascending, then
        weight, bias, gamma, beta (weight/bias only under ALL_PARAMS)."""
        out: List[Tuple[str, np.ndarray]] = []
        for k, blk in enumerate(self.layers):
            if scope == ParamScope.ALL_PARAMS:
                out.append((f"layers.{k}.weight", blk.weight))
                out.append((f"layers.{k}.bias", blk.bias))
            out.append((f"layers.{k}.bn.gamma", blk.bn.gamma))
            out.append((f"layers.{k}.bn.beta", blk.bn.beta))
        return out

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Every stored array, running statistics included."""
        out = list(self.named_parameters(ParamScope.ALL_PARAMS))
        for k, blk in enumerate(self.layers):
            out.append((f"layers.{k}.bn.running_mean", blk.bn.running_mean))
            out.append((f"layers.{k}.bn.running_var", blk.bn.running_var))
        return out

    def num_parameters(self, scope: ParamScope) -> int:
        return int(sum(arr.size for _, arr in self.named_parameters(scope)))

    def flat_parameters(self, scope: ParamScope) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_parameters(scope)])

    def load_flat_parameters(self, scope: ParamScope, flat: np.ndarray) -> None:
        if flat.shape != (self.num_parameters(scope),):
            raise ShapeMismatchError("flat parameter vector has wrong length", expected=self.num_parameters(scope), got=flat.shape)
        offset = 0
        for _, arr in self.named_parameters(scope):
            arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def freeze(self) -> None:
        """Make every array read-only; in-place writes raise afterwards."""
        for _, arr in self.named_arrays():
            arr.flags.writeable = False

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.signature).encode())
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()
