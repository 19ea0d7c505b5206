from .corruptions import CorruptionOp, default_corruption_sequence
from .streams import LabeledBatch, OpenSetMixed, OpenSetOff, ScenarioSpec, make_stream
from .synthetic import LabeledPool, SyntheticSourceSpec, generate_source
from .tabular import load_tabular

__all__ = [
    "CorruptionOp",
    "LabeledBatch",
    "LabeledPool",
    "OpenSetMixed",
    "OpenSetOff",
    "ScenarioSpec",
    "SyntheticSourceSpec",
    "default_corruption_sequence",
    "generate_source",
    "load_tabular",
    "make_stream",
]
