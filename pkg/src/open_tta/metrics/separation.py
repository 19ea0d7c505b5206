"""Correct-vs-noisy separation: OoD scores, AUROC and FPR at a fixed TPR.

Every score is oriented so that higher means "more likely correct/closed-set".
Energy is therefore stored as +logsumexp(logits).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from ..errors import EmptyEvaluationError, ShapeMismatchError, SingleClassError
from ..nn.functional import log_sum_exp
from .online import Records, as_frame, correct_mask


class OodScoreKind(str, Enum):
    MSP = "msp"
    MAX_LOGIT = "max_logit"
    ENERGY = "energy"
    CONF_DIFF = "conf_diff"


class NegativesMode(str, Enum):
    INCLUDE_CLOSED_WRONG = "include_closed_wrong"
    EXCLUDE_CLOSED_WRONG = "exclude_closed_wrong"


def ood_score(
    kind: OodScoreKind,
    logits: Optional[np.ndarray] = None,
    probs: Optional[np.ndarray] = None,
    conf_tilde: Optional[np.ndarray] = None,
    conf_hat: Optional[np.ndarray] = None,
) -> np.ndarray:
    kind = OodScoreKind(kind)
    if kind is OodScoreKind.MSP:
        return np.asarray(probs, dtype=np.float64).max(axis=-1)
    if kind is OodScoreKind.MAX_LOGIT:
        return np.asarray(logits, dtype=np.float64).max(axis=-1)
    if kind is OodScoreKind.ENERGY:
        return log_sum_exp(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
    return np.asarray(conf_hat, dtype=np.float64) - np.asarray(conf_tilde, dtype=np.float64)


def _split(scores: np.ndarray, positive: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    if scores.shape != positive.shape:
        raise ShapeMismatchError("scores and flags differ in length", scores=scores.shape, flags=positive.shape)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("need at least one positive and one negative", positives=n_pos, negatives=n_neg)
    return scores, positive, n_pos, n_neg


def auroc(scores: np.ndarray, positive_flags: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg) from average ranks; ties count one half."""
    scores, positive, n_pos, n_neg = _split(scores, positive_flags)
    ranks = rankdata(scores, method="average")
    # average ranks are multiples of 1/2, so 2*U is an exact integer
    twice_u = 2.0 * ranks[positive].sum() - n_pos * (n_pos + 1)
    return float(twice_u / (2.0 * n_pos * n_neg))


def fpr_at_tpr(scores: np.ndarray, positive_flags: np.ndarray, tpr_target: float = 0.95) -> float:
    """FPR at the largest observed-score threshold t whose TPR reaches the target.

    A sample is predicted positive iff score >= t, so tied scores are admitted
    together.
    """
    scores, positive, n_pos, n_neg = _split(scores, positive_flags)
    pos = np.sort(scores[positive])
    neg = np.sort(scores[~positive])
    thresholds = np.unique(scores)[::-1]
    tp = n_pos - np.searchsorted(pos, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg, thresholds, side="left")
    ok = np.flatnonzero(tp / n_pos >= tpr_target)
    # the lowest threshold admits everything, so ok is never empty
    return float(fp[ok[0]] / n_neg)


@dataclass
class OodResult:
    kind: str
    negatives_mode: str
    auroc: float
    fpr_at_tpr95: float
    num_positives: int
    num_negatives: int

    def to_dict(self) -> dict:
        return asdict(self)


def record_scores(df: pd.DataFrame, kind: OodScoreKind) -> np.ndarray:
    kind = OodScoreKind(kind)
    if kind is OodScoreKind.CONF_DIFF:
        return df["conf_hat"].to_numpy(dtype=np.float64) - df["conf_tilde"].to_numpy(dtype=np.float64)
    return df[kind.value].to_numpy(dtype=np.float64)


def ood_eval(
    records: Records,
    kind: OodScoreKind,
    negatives_mode: NegativesMode = NegativesMode.INCLUDE_CLOSED_WRONG,
    round_id: Optional[int] = None,
) -> OodResult:
    """Positives are correct closed-set samples. Negatives are wrong closed-set
    plus open-set samples, or open-set samples only (wrong closed-set dropped)."""
    kind = OodScoreKind(kind)
    negatives_mode = NegativesMode(negatives_mode)
    df = as_frame(records)
    if round_id is not None:
        df = df[df["round_id"] == round_id]
    if df.empty:
        raise EmptyEvaluationError("no samples to score", round_id=round_id)
    correct = correct_mask(df)
    is_open = df["open_flags"].to_numpy(dtype=bool)
    if negatives_mode is NegativesMode.INCLUDE_CLOSED_WRONG:
        keep = np.ones(len(df), dtype=bool)
    else:
        keep = correct | is_open
    scores = record_scores(df, kind)[keep]
    flags = correct[keep]
    if not (~flags).any():
        raise EmptyEvaluationError("no negative samples", kind=kind.value, negatives_mode=negatives_mode.value)
    return OodResult(
        kind=kind.value,
        negatives_mode=negatives_mode.value,
        auroc=auroc(scores, flags),
        fpr_at_tpr95=fpr_at_tpr(scores, flags, 0.95),
        num_positives=int(flags.sum()),
        num_negatives=int((~flags).sum()),
    )
