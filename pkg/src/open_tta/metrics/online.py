from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from ..adapt.runlog import StepRecord, samples_frame
from ..errors import EmptyEvaluationError

Records = Union[Sequence[StepRecord], pd.DataFrame]


def as_frame(records: Records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    return samples_frame(list(records))


def correct_mask(df: pd.DataFrame) -> np.ndarray:
    """Closed-set samples whose online adapted prediction is right."""
    return (~df["open_flags"].to_numpy(dtype=bool)) & (df["c_a"].to_numpy() == df["labels"].to_numpy())


def error_rate(records: Records, exclude_open: bool = True) -> float:
    df = as_frame(records)
    if exclude_open:
        df = df[~df["open_flags"].astype(bool)]
    if df.empty:
        raise EmptyEvaluationError("no samples left to evaluate", exclude_open=exclude_open)
    return float(np.mean(df["c_a"].to_numpy() != df["labels"].to_numpy()))


def error_by_round(records: Records, exclude_open: bool = True) -> pd.Series:
    df = as_frame(records)
    if exclude_open:
        df = df[~df["open_flags"].astype(bool)]
    wrong = (df["c_a"] != df["labels"]).astype(float)
    return wrong.groupby(df["round_id"]).mean().rename("error")


@dataclass
class SelectionStats:
    # None marks an undefined ratio (empty denominator)
    precision: Optional[float]
    recall: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)


def selection_stats(records: Records) -> SelectionStats:
    """Positives are selected samples; relevant samples are correct closed-set
    ones. Open-set samples always count as noisy."""
    df = as_frame(records)
    sel = df["selected"].to_numpy(dtype=bool)
    rel = correct_mask(df)
    tp = int(np.sum(sel & rel))
    fp = int(np.sum(sel & ~rel))
    fn = int(np.sum(~sel & rel))
    tn = int(np.sum(~sel & ~rel))
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    return SelectionStats(precision, recall, tp, fp, fn, tn)


def selection_stats_by_round(records: Records) -> pd.DataFrame:
    df = as_frame(records)
    rows = []
    for r, g in df.groupby("round_id", sort=True):
        s = selection_stats(g)
        rows.append({"round": int(r), "precision": s.precision, "recall": s.recall})
    return pd.DataFrame(rows, columns=["round", "precision", "recall"])


@dataclass
class ConfidenceDropStats:
    round_id: int
    num_samples: int
    num_dropped: int
    # None when nothing dropped
    wrong_fraction: Optional[float]


def confidence_drop_stats(records: Records) -> List[ConfidenceDropStats]:
    """Per round: how many samples lost confidence on the original prediction
    (y_hat^{c_o} < y_tilde^{c_o}) and how many of those c_o got wrong."""
    df = as_frame(records)
    out: List[ConfidenceDropStats] = []
    for r, g in df.groupby("round_id", sort=True):
        dropped = g["conf_hat"].to_numpy() < g["conf_tilde"].to_numpy()
        wrong = g["c_o"].to_numpy() != g["labels"].to_numpy()
        k = int(dropped.sum())
        frac = float(np.sum(dropped & wrong) / k) if k else None
        out.append(ConfidenceDropStats(int(r), len(g), k, frac))
    return out


def trend_correlation(values: Sequence[float]) -> Optional[float]:
    """Spearman correlation of a series against its index; None when undefined."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) < 2 or np.all(vals == vals[0]):
        return None
    rho = spearmanr(np.arange(len(vals)), vals).correlation
    return None if rho is None or not np.isfinite(rho) else float(rho)
