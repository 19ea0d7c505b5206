from __future__ import annotations

from dataclasses import dataclass
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import ShapeMismatchError
from ..nn.functional import entropy_rows

# default threshold as a fraction of ln C
DEFAULT_ENTROPY_FRACTION = 0.4


class _Strategy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SelectAll(_Strategy):
    kind: Literal["all"] = "all"

    def describe(self) -> str:
        return "all"


class ConfidenceThreshold(_Strategy):
    kind: Literal["confidence_threshold"] = "confidence_threshold"
    p: float = Field(0.9, gt=0.0, lt=1.0)

    def describe(self) -> str:
        return f"conf>={self.p:g}"


class EntropyThreshold(_Strategy):
    kind: Literal["entropy_threshold"] = "entropy_threshold"
    # None -> 0.4 * ln C
    e0: Optional[float] = Field(None, gt=0.0)

    def threshold(self, num_classes: int) -> float:
        return self.e0 if self.e0 is not None else DEFAULT_ENTROPY_FRACTION * float(np.log(num_classes))

    def describe(self) -> str:
        return "ent<e0" if self.e0 is None else f"ent<{self.e0:g}"


class ConfidenceDifference(_Strategy):
    kind: Literal["confidence_difference"] = "confidence_difference"
    margin: float = 0.0
    score_space: Literal["softmax", "logit"] = "softmax"

    def describe(self) -> str:
        suffix = "" if self.score_space == "softmax" else "-logit"
        return f"confdiff{suffix}>={self.margin:g}"


SelectionStrategy = Annotated[
    Union[SelectAll, ConfidenceThreshold, EntropyThreshold, ConfidenceDifference],
    Field(discriminator="kind"),
]


@dataclass
class SelectionScores:
    """Per-sample quantities every strategy predicate reads. StepRecords store
    these same arrays so a recorded mask can be re-derived exactly."""

    conf_tilde: np.ndarray  # y_tilde at c_o
    conf_hat: np.ndarray  # y_hat at c_o
    logit_tilde: np.ndarray  # logits_tilde at c_o
    logit_hat: np.ndarray  # logits_hat at c_o
    max_hat: np.ndarray
    entropy_hat: np.ndarray
    num_classes: int


def selection_scores(
    y_tilde: np.ndarray,
    y_hat: np.ndarray,
    logits_tilde: np.ndarray,
    logits_hat: np.ndarray,
    c_o: np.ndarray,
) -> SelectionScores:
    n, c = y_hat.shape
    for name, arr in (("y_tilde", y_tilde), ("logits_tilde", logits_tilde), ("logits_hat", logits_hat)):
        if arr.shape != (n, c):
            raise ShapeMismatchError(f"{name} does not match y_hat", expected=(n, c), got=arr.shape)
    if c_o.shape != (n,):
        raise ShapeMismatchError("c_o does not match batch size", expected=(n,), got=c_o.shape)
    rows = np.arange(n)
    return SelectionScores(
        conf_tilde=y_tilde[rows, c_o],
        conf_hat=y_hat[rows, c_o],
        logit_tilde=logits_tilde[rows, c_o],
        logit_hat=logits_hat[rows, c_o],
        max_hat=y_hat.max(axis=1),
        entropy_hat=entropy_rows(y_hat),
        num_classes=c,
    )


def apply_strategy(strategy: SelectionStrategy, scores: SelectionScores) -> np.ndarray:
    if isinstance(strategy, SelectAll):
        return np.ones(scores.conf_hat.shape[0], dtype=bool)
    if isinstance(strategy, ConfidenceThreshold):
        return scores.max_hat >= strategy.p
    if isinstance(strategy, EntropyThreshold):
        return scores.entropy_hat < strategy.threshold(scores.num_classes)
    if isinstance(strategy, ConfidenceDifference):
        if strategy.score_space == "softmax":
            diff = scores.conf_hat - scores.conf_tilde
        else:
            diff = scores.logit_hat - scores.logit_tilde
        return diff >= strategy.margin
    raise TypeError(f"unknown selection strategy {type(strategy).__name__}")


def select(
    strategy: SelectionStrategy,
    y_tilde: np.ndarray,
    y_hat: np.ndarray,
    logits_tilde: np.ndarray,
    logits_hat: np.ndarray,
    c_o: np.ndarray,
) -> np.ndarray:
    return apply_strategy(strategy, selection_scores(y_tilde, y_hat, logits_tilde, logits_hat, c_o))
