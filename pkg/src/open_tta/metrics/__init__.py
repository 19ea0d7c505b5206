from .gradsim import GradSimMatrix, grad_cos_sim
from .online import (
    ConfidenceDropStats,
    SelectionStats,
    confidence_drop_stats,
    error_by_round,
    error_rate,
    selection_stats,
    selection_stats_by_round,
    trend_correlation,
)
from .separation import NegativesMode, OodResult, OodScoreKind, auroc, fpr_at_tpr, ood_eval, ood_score

__all__ = [
    "ConfidenceDropStats",
    "GradSimMatrix",
    "NegativesMode",
    "OodResult",
    "OodScoreKind",
    "SelectionStats",
    "auroc",
    "confidence_drop_stats",
    "error_by_round",
    "error_rate",
    "fpr_at_tpr",
    "grad_cos_sim",
    "ood_eval",
    "ood_score",
    "selection_stats",
    "selection_stats_by_round",
    "trend_correlation",
]
