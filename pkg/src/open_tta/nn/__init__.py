from .backprop import ForwardTrace, GradientSet, backward, forward, per_sample_gradients
from .functional import entropy, softmax
from .model import Activation, BatchNormState, LayerBlock, ParamScope, SmallClassifier, StatsMode

__all__ = [
    "Activation",
    "BatchNormState",
    "ForwardTrace",
    "GradientSet",
    "LayerBlock",
    "ParamScope",
    "SmallClassifier",
    "StatsMode",
    "backward",
    "entropy",
    "forward",
    "per_sample_gradients",
    "softmax",
]
